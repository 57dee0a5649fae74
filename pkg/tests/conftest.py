import numpy as np
import pytest


def naive_conv2d(x, w, bias=None, stride=1, padding=0, groups=1):
    """Six-loop reference convolution (cross-correlation), float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c_in, h, wd = x.shape
    c_out, cg, kh, kw = w.shape
    assert c_in % groups == 0 and c_out % groups == 0 and cg == c_in // groups
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    for b in range(n):
        for co in range(c_out):
            g = co // (c_out // groups)
            for ci in range(cg):
                for i in range(ho):
                    for j in range(wo):
                        patch = xp[b, g * cg + ci, i * stride:i * stride + kh, j * stride:j * stride + kw]
                        out[b, co, i, j] += np.sum(patch * w[co, ci])
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64).reshape(1, -1, 1, 1)
    return out


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return np.abs(a - b).max(initial=0.0) / denom


def numeric_grad(f, x, eps=1e-6):
    """Central finite differences of a scalar-valued f at x, float64."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f(x)
        flat[i] = old - eps
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * eps)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(0)
