"""Optimizer and schedule tests.

The LAMB reference below re-derives the update longhand in plain NumPy
(moments, bias correction, trust ratio) so the module is checked against
the equations rather than against itself.
"""

import numpy as np
import pytest

from nexception import tensor as T
from nexception.errors import ConfigError
from nexception.optim import Lamb, cosine_warmup_lr


def _param(arr, **kw):
    return T.Parameter(T.Tensor(np.asarray(arr, dtype=np.float64),
                                requires_grad=True), **kw)


def _reference_lamb(w0, grads, lr, *, beta1=0.9, beta2=0.999, eps=1e-6,
                    wd=0.0, exempt=False):
    w = np.array(w0, dtype=np.float64)
    m = np.zeros_like(w)
    v = np.zeros_like(w)
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        r = (m / (1 - beta1 ** t)) / (np.sqrt(v / (1 - beta2 ** t)) + eps)
        if wd and not exempt:
            r = r + wd * w
        wn, rn = np.linalg.norm(w), np.linalg.norm(r)
        phi = wn / rn if wn > 0 and rn > 0 else 1.0
        w = w - lr * phi * r
    return w


class TestLamb:
    def test_single_step_matches_hand_arithmetic(self):
        p = _param([1.0, 2.0])
        p.value.grad = np.array([0.1, -0.2])
        opt = Lamb([p], lr=0.01)
        opt.step()
        # t=1: m_hat = g, v_hat = g^2, r = g / (|g| + eps).
        r = np.array([0.1 / (0.1 + 1e-6), -0.2 / (0.2 + 1e-6)])
        phi = np.sqrt(5.0) / np.linalg.norm(r)
        np.testing.assert_allclose(p.data, np.array([1.0, 2.0]) - 0.01 * phi * r,
                                   rtol=0, atol=1e-15)

    def test_hundred_steps_match_reference(self):
        rng = np.random.default_rng(11)
        w0 = rng.normal(size=(4, 3))
        grads = [rng.normal(size=(4, 3)) for _ in range(100)]
        p = _param(w0.copy())
        opt = Lamb([p], lr=3e-3, weight_decay=0.05)
        for g in grads:
            p.value.grad = g.copy()
            opt.step()
        np.testing.assert_allclose(
            p.data, _reference_lamb(w0, grads, 3e-3, wd=0.05), rtol=0, atol=1e-12)

    def test_decay_exempt_parameter_skips_weight_decay(self):
        rng = np.random.default_rng(3)
        w0 = rng.normal(size=5)
        grads = [rng.normal(size=5) for _ in range(20)]
        p = _param(w0.copy(), weight_decay_exempt=True)
        opt = Lamb([p], lr=1e-2, weight_decay=0.5)
        for g in grads:
            p.value.grad = g.copy()
            opt.step()
        np.testing.assert_allclose(
            p.data, _reference_lamb(w0, grads, 1e-2, wd=0.5, exempt=True),
            rtol=0, atol=1e-12)

    def test_zero_weight_trust_ratio_is_one(self):
        # ||w|| = 0 at the first step, so the update is the plain
        # bias-corrected Adam direction times lr.
        p = _param(np.zeros(3))
        p.value.grad = np.array([1.0, -2.0, 0.5])
        opt = Lamb([p], lr=0.1)
        opt.step()
        g = np.array([1.0, -2.0, 0.5])
        np.testing.assert_allclose(p.data, -0.1 * g / (np.abs(g) + 1e-6),
                                   rtol=0, atol=1e-15)

    def test_missing_grad_means_zero(self):
        p = _param([1.0, -1.0])
        q = _param([2.0])
        q.value.grad = np.array([1.0])
        opt = Lamb([p, q], lr=0.1)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, -1.0])
        assert q.data[0] != 2.0

    def test_non_trainable_params_are_filtered(self):
        stat = T.Parameter(T.Tensor(np.array([5.0])), trainable=False)
        p = _param([1.0])
        opt = Lamb([stat, p], lr=0.1)
        assert opt.params == [p]

    def test_moments_follow_param_dtype(self):
        p = _param(np.zeros(2))  # float64
        opt = Lamb([p], lr=0.1)
        assert opt._m[0].dtype == np.float64

    def test_rejects_empty_and_bad_lr(self):
        with pytest.raises(ConfigError):
            Lamb([], lr=0.1)
        with pytest.raises(ConfigError):
            Lamb([_param([1.0])], lr=0.0)

    def test_zero_grad_clears(self):
        p = _param([1.0])
        p.value.grad = np.array([3.0])
        Lamb([p], lr=0.1).zero_grad()
        assert p.grad is None


class TestCosineWarmup:
    KW = dict(total_epochs=10, warmup_epochs=5, peak_lr=1e-2, min_lr=1e-6)

    def test_endpoints_exact(self):
        assert cosine_warmup_lr(0.0, **self.KW) == 0.0
        assert cosine_warmup_lr(5.0, **self.KW) == 1e-2
        assert cosine_warmup_lr(10.0, **self.KW) == 1e-6
        assert cosine_warmup_lr(99.0, **self.KW) == 1e-6

    def test_warmup_is_linear(self):
        assert cosine_warmup_lr(2.5, **self.KW) == 0.5 * 1e-2
        assert cosine_warmup_lr(1.0, **self.KW) == pytest.approx(1e-2 / 5, abs=0)

    def test_cosine_midpoint(self):
        lr = cosine_warmup_lr(7.5, **self.KW)
        assert lr == pytest.approx((1e-2 + 1e-6) / 2, abs=1e-18)

    def test_monotone_decay_after_warmup(self):
        ts = np.linspace(5.0, 10.0, 101)
        lrs = [cosine_warmup_lr(float(t), **self.KW) for t in ts]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_no_warmup_starts_at_peak(self):
        assert cosine_warmup_lr(0.0, total_epochs=10, warmup_epochs=0,
                                peak_lr=3e-3, min_lr=0.0) == 3e-3

    def test_bad_bounds(self):
        with pytest.raises(ConfigError):
            cosine_warmup_lr(0.0, total_epochs=5, warmup_epochs=6,
                             peak_lr=1e-3, min_lr=0.0)
