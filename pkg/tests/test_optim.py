"""Adam optimizer against a hand-rolled scalar reference."""

import numpy as np
import pytest

from cvq.optim import Adam
from cvq.tensor import Tensor


def reference_adam(x0, grads, lr, b1, b2, eps, wd=0.0, decoupled=False):
    """Scalar Adam trace computed step by step, no vectorization tricks."""
    x, m, v = float(x0), 0.0, 0.0
    trace = []
    for t, g in enumerate(grads, start=1):
        if wd and not decoupled:
            g = g + wd * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        upd = (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        if wd and decoupled:
            upd = upd + wd * x
        x = x - lr * upd
        trace.append(x)
    return trace


@pytest.mark.parametrize("wd,decoupled", [(0.0, False), (0.1, False), (0.1, True)])
def test_matches_scalar_reference(wd, decoupled):
    rng = np.random.default_rng(3)
    grads = rng.normal(size=8)
    p = Tensor(np.array([0.7]), requires_grad=True)
    opt = Adam([p], lr=0.05, beta1=0.5, beta2=0.9, eps=1e-8, weight_decay=wd, decoupled=decoupled)
    ref = reference_adam(0.7, grads, 0.05, 0.5, 0.9, 1e-8, wd, decoupled)
    for g, want in zip(grads, ref):
        p.grad = np.array([g])
        opt.step()
        assert p.data[0] == pytest.approx(want, rel=1e-14)


def test_first_step_moves_by_lr():
    # bias correction makes m_hat == g and v_hat == g*g on step one, so the
    # update is sign(g) up to eps
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([p], lr=0.01)
    p.grad = np.array([3.0, -0.5])
    opt.step()
    assert np.allclose(p.data, [1.0 - 0.01 * (3.0 / (3.0 + 1e-8)), -2.0 + 0.01 * (0.5 / (0.5 + 1e-8))])


def test_none_grad_is_skipped():
    p = Tensor(np.array([1.0]), requires_grad=True)
    q = Tensor(np.array([2.0]), requires_grad=True)
    opt = Adam([p, q], lr=0.1)
    p.grad = np.array([1.0])
    opt.step()
    assert q.data[0] == 2.0
    assert p.data[0] != 1.0


def test_zero_grad_clears():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([p])
    p.grad = np.array([5.0])
    opt.zero_grad()
    assert p.grad is None


def test_decoupled_decay_without_grad_step():
    # decoupled decay applies only on steps where the param has a gradient
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([p], lr=0.1, weight_decay=0.5, decoupled=True)
    opt.step()
    assert p.data[0] == 1.0


def test_converges_on_quadratic():
    p = Tensor(np.array([5.0]), requires_grad=True)
    opt = Adam([p], lr=0.1, beta1=0.9, beta2=0.999)
    for _ in range(500):
        p.grad = 2.0 * (p.data - 3.0)
        opt.step()
    assert abs(p.data[0] - 3.0) < 1e-3
