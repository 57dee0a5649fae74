"""Optimizer against a hand-computed reference recurrence."""

import numpy as np
import pytest

from cagn.errors import ConfigurationError
from cagn.optim import Adam
from cagn.tensor import Tensor


def reference_adam(x0, grads, lr, b1, b2, eps):
    x = x0.astype(np.float64).copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        x -= lr * mhat / (np.sqrt(vhat) + eps)
    return x


def test_adam_matches_reference():
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(4, 3))
    grads = [rng.normal(size=(4, 3)) for _ in range(7)]
    opt = Adam(lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8)
    p = {"x": Tensor(x0.copy(), requires_grad=True)}
    for g in grads:
        opt.step(p, {"x": Tensor(g)})
    want = reference_adam(x0, grads, 0.01, 0.9, 0.999, 1e-8)
    assert np.allclose(p["x"].data, want, atol=1e-12)


def test_adam_quadratic_converges():
    opt = Adam(lr=0.1)
    p = {"x": Tensor(np.array([5.0]), requires_grad=True)}
    for _ in range(300):
        opt.step(p, {"x": Tensor(2 * p["x"].data)})  # d/dx x^2
    assert abs(p["x"].data[0]) < 1e-3


def test_adam_skips_params_without_grads():
    opt = Adam(lr=0.1)
    p = {
        "a": Tensor(np.ones(2), requires_grad=True),
        "b": Tensor(np.ones(2), requires_grad=True),
    }
    opt.step(p, {"a": Tensor(np.ones(2))})
    assert np.array_equal(p["b"].data, np.ones(2))
    assert not np.array_equal(p["a"].data, np.ones(2))


def test_adam_timestep_is_shared():
    """The bias-correction step counter is global to the optimizer: two
    optimizers fed the same grads in the same order agree exactly."""
    g = [np.full(1, 0.5), np.full(1, -0.25)]
    p1 = {"x": Tensor(np.zeros(1), requires_grad=True)}
    p2 = {"x": Tensor(np.zeros(1), requires_grad=True)}
    o1, o2 = Adam(lr=0.1), Adam(lr=0.1)
    for gi in g:
        o1.step(p1, {"x": Tensor(gi)})
        o2.step(p2, {"x": Tensor(gi)})
    assert np.array_equal(p1["x"].data, p2["x"].data)


def test_adam_rejects_bad_lr():
    with pytest.raises(ConfigurationError):
        Adam(lr=0.0)
