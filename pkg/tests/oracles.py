"""Independent reference implementations used to pin expected values.

Everything here is deliberately slow and literal (explicit loops, no shared
code with the package) so test expectations do not inherit bugs from the
implementation under test.
"""

import numpy as np


def conv2d_naive(x, w, b=None, stride=1, padding=1, groups=1):
    """Direct six-loop convolution on NCHW input, float64 accumulation."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    bs, cin, h, wd = x.shape
    cout, cw, kh, kw = w.shape
    assert cin % groups == 0 and cout % groups == 0 and cw == cin // groups
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((bs, cout, ho, wo))
    cg_in = cin // groups
    cg_out = cout // groups
    for n in range(bs):
        for oc in range(cout):
            g = oc // cg_out
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ic in range(cg_in):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += (xp[n, g * cg_in + ic, oy * stride + ky, ox * stride + kx]
                                        * w[oc, ic, ky, kx])
                    out[n, oc, oy, ox] = acc
            if b is not None:
                out[n, oc] += b[oc]
    return out


def max_pool_naive(x, kernel=3, stride=2, padding=1):
    """Loop max pooling with -inf padding."""
    x = np.asarray(x, dtype=np.float64)
    bs, c, h, w = x.shape
    ho = (h + 2 * padding - kernel) // stride + 1
    wo = (w + 2 * padding - kernel) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf)
    out = np.zeros((bs, c, ho, wo))
    for n in range(bs):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    out[n, ch, oy, ox] = xp[n, ch,
                                            oy * stride:oy * stride + kernel,
                                            ox * stride:ox * stride + kernel].max()
    return out


def finite_diff(f, arr, h=1e-5):
    """Central-difference gradient of scalar-valued f at float64 array arr."""
    arr = np.asarray(arr, dtype=np.float64)
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(arr)
        flat[i] = orig - h
        fm = f(arr)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_grad_error(analytic, numeric):
    """Max elementwise error scaled by the gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    denom = max(np.abs(numeric).max(), 1.0)
    return np.abs(analytic - numeric).max() / denom
