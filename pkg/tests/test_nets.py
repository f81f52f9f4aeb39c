import numpy as np
import pytest

from koopplan.nets import (
    AdamState, Mlp, OptimizerError, adam_step, init_params, mlp_backward,
    mlp_forward,
)


def finite_diff(fn, params, h=1e-5):
    grads = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + h
            hi = fn()
            p[idx] = old - h
            lo = fn()
            p[idx] = old
            g[idx] = (hi - lo) / (2 * h)
        grads.append(g)
    return grads


def test_zero_weight_net_outputs_zero():
    net = init_params([3, 4, 2], "relu", np.random.default_rng(0))
    for w in net.weights:
        w[:] = 0.0
    y, _ = mlp_forward(net, np.ones(3))
    assert np.array_equal(y, np.zeros(2))


def test_identity_linear_net():
    net = Mlp([2, 2], "linear", [np.eye(2)], [np.zeros(2)])
    x = np.array([0.3, -1.2])
    y, _ = mlp_forward(net, x)
    assert np.array_equal(y, x)


def test_batch_consistency():
    net = init_params([3, 5, 2], "relu", np.random.default_rng(1))
    X = np.random.default_rng(2).normal(size=(7, 3))
    Y, _ = mlp_forward(net, X)
    rows = np.stack([mlp_forward(net, x)[0] for x in X])
    assert np.allclose(Y, rows)


def test_forward_shape_mismatch():
    net = init_params([3, 2], "relu", np.random.default_rng(0))
    with pytest.raises(ValueError):
        mlp_forward(net, np.ones(4))


def test_linear_net_input_grad_closed_form():
    W = np.random.default_rng(3).normal(size=(2, 4))
    net = Mlp([4, 2], "linear", [W.copy()], [np.zeros(2)])
    x = np.random.default_rng(4).normal(size=4)
    _, tape = mlp_forward(net, x)
    g = np.array([1.0, -2.0])
    gin, _ = mlp_backward(net, tape, g)
    assert np.allclose(gin, W.T @ g)


def test_zero_output_grad_gives_zero_grads():
    net = init_params([3, 4, 2], "relu", np.random.default_rng(5))
    x = np.ones(3)
    _, tape = mlp_forward(net, x)
    gin, grads = mlp_backward(net, tape, np.zeros(2))
    assert np.allclose(gin, 0.0)
    assert all(np.allclose(g, 0.0) for g in grads)


@pytest.mark.parametrize("dims,act", [
    ([2, 8, 3], "relu"),
    ([4, 16, 8, 4], "relu"),
    ([3, 6, 3], "linear"),
])
def test_gradients_match_finite_differences(dims, act):
    rng = np.random.default_rng(6)
    net = init_params(dims, act, rng)
    X = rng.normal(size=(5, dims[0]))
    G = rng.normal(size=(5, dims[-1]))

    def loss():
        y, _ = mlp_forward(net, X)
        return float((y * G).sum())

    _, tape = mlp_forward(net, X)
    gin, grads = mlp_backward(net, tape, G)
    fd = finite_diff(loss, net.params())
    for a, b in zip(grads, fd):
        denom = np.maximum(np.abs(b), 1e-6)
        assert np.max(np.abs(a - b) / denom) < 1e-4

    # input gradient too
    def loss_x():
        y, _ = mlp_forward(net, X)
        return float((y * G).sum())

    fd_x = finite_diff(loss_x, [X])[0]
    denom = np.maximum(np.abs(fd_x), 1e-6)
    assert np.max(np.abs(gin - fd_x) / denom) < 1e-4


def test_adam_first_step_is_lr_signed():
    p = np.array([1.0, -2.0, 0.5])
    g = np.array([0.3, -4.0, 1e-3])
    st = AdamState.for_params([p], lr=0.01)
    (out,) = adam_step(st, [p], [g])
    # bias correction makes mhat = g, vhat = g*g, so the step is
    # lr * g / (|g| + eps) ~= lr * sign(g)
    assert np.allclose(out, p - 0.01 * np.sign(g), atol=1e-4)


def test_adam_hand_computed_two_steps():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    p = np.array([2.0])
    st = AdamState.for_params([p], lr=lr, beta1=b1, beta2=b2, eps=eps)
    m = v = 0.0
    ref = p.copy()
    for g in (np.array([0.5]), np.array([-1.5])):
        (p,) = adam_step(st, [p], [g])
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        t = st.step
        ref = ref - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    assert np.allclose(p, ref, atol=1e-14)


def test_adam_zero_grads_leave_params():
    p = np.array([1.0, 2.0])
    st = AdamState.for_params([p])
    for _ in range(5):
        (p,) = adam_step(st, [p], [np.zeros(2)])
    assert np.array_equal(p, [1.0, 2.0])


def test_adam_rejects_nonfinite():
    p = np.array([1.0])
    st = AdamState.for_params([p])
    with pytest.raises(OptimizerError):
        adam_step(st, [p], [np.array([np.nan])])


def test_adam_determinism():
    rng = np.random.default_rng(7)
    grads = [rng.normal(size=3) for _ in range(10)]

    def run():
        p = np.ones(3)
        st = AdamState.for_params([p], lr=0.05)
        for g in grads:
            (p,) = adam_step(st, [p], [g])
        return p

    assert np.array_equal(run(), run())


def test_init_rejects_bad_dims():
    with pytest.raises(ValueError):
        init_params([3], "relu", np.random.default_rng(0))
    with pytest.raises(ValueError):
        init_params([3, 0, 2], "relu", np.random.default_rng(0))


def test_init_variance_matches_scheme():
    rng = np.random.default_rng(8)
    net = init_params([128, 128], "relu", rng)
    var = net.weights[0].var()
    assert abs(var - 2.0 / 128) / (2.0 / 128) < 0.1
    net2 = init_params([128, 128], "linear", np.random.default_rng(9))
    var2 = net2.weights[0].var()
    want = (2 * np.sqrt(6.0 / 256)) ** 2 / 12
    assert abs(var2 - want) / want < 0.1


def test_init_seed_determinism():
    a = init_params([4, 8, 2], "relu", np.random.default_rng(10))
    b = init_params([4, 8, 2], "relu", np.random.default_rng(10))
    for wa, wb in zip(a.params(), b.params()):
        assert np.array_equal(wa, wb)
