import numpy as np
import pytest

from vitalnet import optim as O
from vitalnet import tensor as T
from vitalnet.tensor import Tensor


def param(v):
    return Tensor(np.asarray(v, dtype=float), requires_grad=True)


def test_sgd_zero_grad_no_decay_is_noop():
    p = param([1.0, -2.0])
    O.sgd_step([p], [np.zeros(2)], O.OptimState("sgd", lr=0.1, weight_decay=0.0))
    assert p.data.tolist() == [1.0, -2.0]


def test_sgd_single_step():
    p = param([1.0])
    O.sgd_step([p], [np.array([1.0])], O.OptimState("sgd", lr=0.1, weight_decay=0.0))
    assert abs(p.data[0] - 0.9) < 1e-15


def test_sgd_weight_decay_is_added_to_gradient():
    p = param([2.0])
    O.sgd_step([p], [np.array([0.0])], O.OptimState("sgd", lr=0.1, weight_decay=0.5))
    assert abs(p.data[0] - (2.0 - 0.1 * 0.5 * 2.0)) < 1e-15


def bowl_grad(p, center):
    return p.data - center


@pytest.mark.parametrize("kind,lr,steps", [("sgd", 0.1, 200), ("adamw", 0.05, 2000)])
def test_quadratic_bowl_convergence(kind, lr, steps):
    center = np.array([1.5, -0.5, 3.0])
    p = param(np.zeros(3))
    state = O.OptimState(kind, lr=lr, weight_decay=0.0)
    for _ in range(steps):
        if kind == "adamw" and state.step == 1000:
            state.lr = 0.001
        (O.sgd_step if kind == "sgd" else O.adamw_step)([p], [bowl_grad(p, center)], state)
    np.testing.assert_allclose(p.data, center, atol=1e-6)


def test_adamw_zero_grad_no_decay_is_noop():
    p = param([0.3, 0.7])
    O.adamw_step([p], [np.zeros(2)], O.OptimState("adamw", lr=0.1, weight_decay=0.0))
    assert p.data.tolist() == [0.3, 0.7]


def test_adamw_first_step_is_lr_sign():
    p = param([0.0, 0.0])
    O.adamw_step([p], [np.array([1e3, -5e2])], O.OptimState("adamw", lr=1e-3, weight_decay=0.0))
    np.testing.assert_allclose(p.data, [-1e-3, 1e-3], rtol=1e-9)


def test_adamw_decoupled_decay():
    p = param([2.0])
    O.adamw_step([p], [np.zeros(1)], O.OptimState("adamw", lr=0.1, weight_decay=0.5))
    assert abs(p.data[0] - 2.0 * (1 - 0.05)) < 1e-15


def test_shape_mismatch():
    with pytest.raises(T.DimensionError):
        O.sgd_step([param([1.0, 2.0])], [np.zeros(3)], O.OptimState("sgd", lr=0.1))


def test_invalid_state():
    with pytest.raises(ValueError):
        O.OptimState("rmsprop", lr=0.1)
    with pytest.raises(ValueError):
        O.OptimState("sgd", lr=0.0)


@pytest.mark.parametrize("lr", [0.01, 0.3, 0.99])
def test_sgd_step_decreases_half_norm_loss(lr):
    p = param([1.0, -2.0, 0.5])
    loss0 = 0.5 * np.sum(p.data ** 2)
    O.sgd_step([p], [p.data.copy()], O.OptimState("sgd", lr=lr, weight_decay=0.0))
    assert 0.5 * np.sum(p.data ** 2) < loss0


def test_updates_deterministic():
    rng = np.random.default_rng(0)
    g = [rng.normal(size=(3, 2)) for _ in range(5)]
    outs = []
    for _ in range(2):
        p = param(np.ones((3, 2)))
        s = O.OptimState("adamw", lr=1e-2)
        for gi in g:
            O.adamw_step([p], [gi], s)
        outs.append(p.data.tobytes())
    assert outs[0] == outs[1]


# ---- schedule ------------------------------------------------------------------

def test_steplr_decay_values():
    assert O.steplr(0) == 1e-3
    assert O.steplr(29) == 1e-3
    assert O.steplr(30) == 3e-4
    assert O.steplr(60) == 9e-5
    assert O.steplr(90) == 2.7e-5
    assert O.steplr(99) == 2.7e-5


def test_steplr_composition_oracle():
    assert abs(O.steplr(90) - 0.3 ** 3 * 1e-3) < 1e-20


def test_steplr_shape():
    lrs = [O.steplr(e) for e in range(200)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    jumps = [e for e in range(1, 200) if lrs[e] != lrs[e - 1]]
    assert jumps == [30, 60, 90]


def test_steplr_negative_epoch():
    with pytest.raises(ValueError):
        O.steplr(-1)
