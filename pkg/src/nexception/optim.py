"""Layerwise-adaptive optimizer and the warmup/cosine learning-rate rule."""

from __future__ import annotations

from math import cos, pi

import numpy as np

from .errors import ConfigError
from .tensor import Parameter


class Lamb:
    """Adam-style moments with a per-parameter trust ratio.

    For each trainable parameter: biased first/second moments with bias
    correction, update direction r = m_hat / (sqrt(v_hat) + eps) plus
    decoupled weight decay (skipped for decay-exempt parameters), scaled by
    trust ratio phi = ||w|| / ||r||. phi falls back to 1 when either norm is
    zero and is not clipped. Moments live in the parameter dtype.
    """

    def __init__(self, params, lr: float, *, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-6, weight_decay: float = 0.0):
        self.params: list[Parameter] = [p for p in params if p.trainable]
        if not self.params:
            raise ConfigError("optimizer received no trainable parameters")
        if not 0 < lr:
            raise ConfigError(f"lr must be positive, got {lr}")
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            r = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and not p.weight_decay_exempt:
                r += self.weight_decay * p.data
            w_norm = float(np.linalg.norm(p.data))
            r_norm = float(np.linalg.norm(r))
            phi = w_norm / r_norm if w_norm > 0.0 and r_norm > 0.0 else 1.0
            p.data = p.data - (self.lr * phi) * r


def cosine_warmup_lr(t: float, *, total_epochs: float, warmup_epochs: float,
                     peak_lr: float, min_lr: float = 0.0) -> float:
    """Learning rate at fractional epoch ``t``.

    Linear ramp 0 -> peak over the warmup, then a half cosine from peak to
    min over the remainder. The endpoints are computed exactly: t ==
    warmup_epochs gives peak_lr and t >= total_epochs gives min_lr with no
    floating-point residue.
    """
    if total_epochs <= 0 or warmup_epochs < 0 or warmup_epochs > total_epochs:
        raise ConfigError(
            f"bad schedule bounds: warmup={warmup_epochs}, total={total_epochs}")
    if t >= total_epochs:
        return min_lr
    if t <= warmup_epochs:
        if warmup_epochs == 0:
            return peak_lr
        return peak_lr * (t / warmup_epochs)
    frac = (t - warmup_epochs) / (total_epochs - warmup_epochs)
    return min_lr + 0.5 * (peak_lr - min_lr) * (1.0 + cos(pi * frac))
