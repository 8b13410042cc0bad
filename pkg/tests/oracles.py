"""Independent reference implementations used as test oracles.

Everything here is written as plainly as possible (nested loops, no
vectorization) and must stay independent of the library code paths it
checks.
"""

import numpy as np


def conv2d_loops(x, w, b, stride=1, pad=0):
    """Direct six-nested-loop cross-correlation; x (C,H,W), w (Cout,Cin,kh,kw)."""
    cin, h, width = x.shape
    cout, cin2, kh, kw = w.shape
    assert cin == cin2
    xp = np.zeros((cin, h + 2 * pad, width + 2 * pad))
    xp[:, pad:pad + h, pad:pad + width] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (width + 2 * pad - kw) // stride + 1
    out = np.zeros((cout, ho, wo))
    for co in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = b[co]
                for ci in range(cin):
                    for u in range(kh):
                        for v in range(kw):
                            acc += w[co, ci, u, v] * xp[ci, i * stride + u, j * stride + v]
                out[co, i, j] = acc
    return out


def maxpool2_loops(x):
    """Window-max oracle; x (C,H,W) with even H, W."""
    c, h, w = x.shape
    out = np.zeros((c, h // 2, w // 2))
    for ci in range(c):
        for i in range(h // 2):
            for j in range(w // 2):
                out[ci, i, j] = max(x[ci, 2 * i, 2 * j], x[ci, 2 * i, 2 * j + 1],
                                    x[ci, 2 * i + 1, 2 * j], x[ci, 2 * i + 1, 2 * j + 1])
    return out


def fc_loops(x, w, b):
    """Dot-product loop oracle; x (K,), w (M,K), b (M,)."""
    m, k = w.shape
    out = np.zeros(m)
    for i in range(m):
        acc = b[i]
        for j in range(k):
            acc += w[i, j] * x[j]
        out[i] = acc
    return out


def softmax_xent_mpmath(logits, label):
    """Arbitrary-precision cross entropy via mpmath."""
    import mpmath

    mpmath.mp.dps = 50
    vals = [mpmath.mpf(float(v)) for v in logits]
    denom = mpmath.fsum(mpmath.e ** v for v in vals)
    return float(-mpmath.log((mpmath.e ** vals[label]) / denom))


def finite_diff_grad(f, param_array, h=1e-5):
    """Central finite differences of scalar f() w.r.t. every entry of param_array.

    f is re-evaluated after in-place perturbation of param_array; the
    array is restored afterwards.
    """
    g = np.zeros_like(param_array)
    flat = param_array.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def potts_energy_loops(labels, window, mus, beta):
    """Labeling energy computed with explicit loops."""
    h, w = window.shape
    e = 0.0
    for y in range(h):
        for x in range(w):
            e += (window[y, x] - mus[labels[y, x]]) ** 2
            if y + 1 < h and labels[y, x] != labels[y + 1, x]:
                e += beta
            if x + 1 < w and labels[y, x] != labels[y, x + 1]:
                e += beta
    return e


def icm_brute_force(window, mus, beta):
    """Exhaustive minimum-energy labeling of a tiny window."""
    import itertools

    h, w = window.shape
    best_e, best_lab = None, None
    for assign in itertools.product(range(len(mus)), repeat=h * w):
        lab = np.array(assign, dtype=int).reshape(h, w)
        e = potts_energy_loops(lab, window, mus, beta)
        if best_e is None or e < best_e:
            best_e, best_lab = e, lab
    return best_e, best_lab


def max_rel_err(a, b, floor=1e-8):
    """Max elementwise relative error with an absolute floor for tiny values."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
