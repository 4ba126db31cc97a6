import numpy as np
import pytest

import simrel as sr
from simrel.nets import forward_cached, backward, checkpoint_config_hash


def kink_free(net, x, margin=1e-3):
    """True when no preactivation sits within `margin` of a ReLU/clamp kink."""
    a = np.atleast_2d(x)
    for j in range(len(net.weights) - 1):
        z = a @ net.weights[j].T + net.biases[j]
        if np.any(np.abs(z) < margin):
            return False
        a = np.maximum(z, 0)
    z = a @ net.weights[-1].T + net.biases[-1]
    if net.head == "relu" and np.any(np.abs(z) < margin):
        return False
    if net.head == "clamp":
        if np.any(np.abs(z - net.head_box.lb) < margin):
            return False
        if np.any(np.abs(z - net.head_box.ub) < margin):
            return False
    return True


def finite_diff_check(net, x, upstream, delta=1e-5, tol=1e-4):
    cache = forward_cached(net, x)
    g = backward(net, cache, upstream)

    def loss():
        return float(np.sum(sr.forward(net, x) * upstream))

    worst = 0.0
    for params, grads in ((net.weights, g.dW), (net.biases, g.db)):
        for P, G in zip(params, grads):
            flat, gflat = P.reshape(-1), G.reshape(-1)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + delta
                lp = loss()
                flat[i] = old - delta
                lm = loss()
                flat[i] = old
                fd = (lp - lm) / (2 * delta)
                worst = max(worst, abs(gflat[i] - fd) / (abs(fd) + 1e-8))
    return worst


def test_forward_relu_single_layer():
    net = sr.Mlp((2, 2), [np.array([[1.0, 0.0], [0.0, 1.0]])], [np.zeros(2)], head="relu")
    assert np.allclose(sr.forward(net, np.array([3.0, -2.0])), [3.0, 0.0])


def test_forward_sigmoid_zero_weights():
    net = sr.init_mlp((4, 8, 1), head="sigmoid", seed=0)
    for W in net.weights:
        W[:] = 0.0
    assert np.allclose(sr.forward(net, np.ones(4)), [0.5])


def test_forward_clamp_head():
    net = sr.Mlp((1, 1), [np.array([[1.0]])], [np.array([1.5])],
                 head="clamp", head_box=sr.box((-1, 1)))
    assert np.allclose(sr.forward(net, np.array([1.0])), [1.0])


def test_forward_dim_mismatch():
    net = sr.init_mlp((3, 2), seed=0)
    with pytest.raises(ValueError, match="dim"):
        sr.forward(net, np.zeros(4))


def test_scalar_gradient_active_inactive():
    net = sr.Mlp((1, 1), [np.array([[2.0]])], [np.zeros(1)], head="relu")
    c = forward_cached(net, np.array([3.0]))
    g = backward(net, c, np.array([1.0]))
    assert np.isclose(g.dW[0][0, 0], 3.0)
    c = forward_cached(net, np.array([-3.0]))
    g = backward(net, c, np.array([1.0]))
    assert g.dW[0][0, 0] == 0.0


def test_gradient_finite_difference_random_nets():
    rng = np.random.default_rng(0)
    checked = 0
    trial = 0
    while checked < 6:
        trial += 1
        head = ["relu", "linear", "sigmoid", "clamp"][trial % 4]
        dims = [3, int(rng.integers(3, 8)), 2]
        if head == "sigmoid":
            dims[-1] = 1
        hb = sr.box(*[(-1, 1)] * dims[-1]) if head == "clamp" else None
        net = sr.init_mlp(dims, head=head, head_box=hb, seed=trial)
        x = rng.uniform(-1, 1, dims[0])
        if not kink_free(net, x):
            continue
        up = rng.uniform(-1, 1, dims[-1])
        assert finite_diff_check(net, x, up) < 1e-4
        checked += 1


def test_lipschitz_bound_row_sum():
    net = sr.Mlp((2, 1), [np.array([[2.0, -1.0]])], [np.zeros(1)], head="relu")
    assert sr.lipschitz_upper_bound(net) == 3.0


def test_lipschitz_bound_sigmoid_factor():
    W1 = np.array([[1.0, 1.0], [0.5, -0.5]])   # row sums 2, 1 -> norm 2
    W2 = np.array([[2.0, -1.0]])               # norm 3
    net = sr.Mlp((2, 2, 1), [W1, W2], [np.zeros(2), np.zeros(1)], head="sigmoid")
    assert np.isclose(sr.lipschitz_upper_bound(net), 1.5)
    assert sr.spectral_product(net) > 0


def test_lipschitz_bound_soundness_monte_carlo():
    rng = np.random.default_rng(4)
    for seed in range(3):
        net = sr.init_mlp((3, 10, 5, 2), head="relu", seed=seed, scale=2.0)
        L = sr.lipschitz_upper_bound(net)
        a = rng.uniform(-2, 2, (30000, 3))
        b = rng.uniform(-2, 2, (30000, 3))
        lhs = np.max(np.abs(sr.forward(net, a) - sr.forward(net, b)), axis=1)
        rhs = L * np.max(np.abs(a - b), axis=1)
        assert np.all(lhs <= rhs + 1e-12)


def test_head_output_ranges():
    rng = np.random.default_rng(5)
    v = sr.init_mlp((4, 8, 1), head="sigmoid", seed=1, scale=3.0)
    out = sr.forward(v, rng.uniform(-5, 5, (1000, 4)))
    assert np.all((out >= 0) & (out <= 1))
    U = sr.box((-0.5, 1.0))
    k = sr.init_mlp((4, 8, 1), head="clamp", head_box=U, seed=2, scale=3.0)
    out = sr.forward(k, rng.uniform(-5, 5, (1000, 4)))
    assert np.all((out >= U.lb) & (out <= U.ub))


def test_project_lipschitz():
    net = sr.init_mlp((3, 16, 16, 1), head="sigmoid", seed=3, scale=4.0)
    sr.project_lipschitz(net, 2.0)
    assert sr.lipschitz_upper_bound(net) <= 2.0 + 1e-12


def test_optimizer_zero_gradient_noop():
    net = sr.init_mlp((2, 4, 1), head="sigmoid", seed=0)
    before = [W.copy() for W in net.weights]
    st = sr.TrainState.for_net(net, lr=0.1)
    g = sr.Gradients([np.zeros_like(W) for W in net.weights],
                     [np.zeros_like(b) for b in net.biases], np.zeros((1, 2)))
    sr.optimizer_step(net, g, st)
    assert st.t == 1
    for W, Wb in zip(net.weights, before):
        assert np.array_equal(W, Wb)


def test_optimizer_rejects_nonfinite():
    net = sr.init_mlp((2, 4, 1), head="sigmoid", seed=0)
    st = sr.TrainState.for_net(net, lr=0.1)
    g = sr.Gradients([np.full_like(W, np.nan) for W in net.weights],
                     [np.zeros_like(b) for b in net.biases], np.zeros((1, 2)))
    with pytest.raises(FloatingPointError):
        sr.optimizer_step(net, g, st)


def test_optimizer_deterministic_replay():
    def run():
        rng = np.random.default_rng(9)
        net = sr.init_mlp((3, 8, 1), head="sigmoid", seed=1)
        st = sr.TrainState.for_net(net, lr=0.01)
        for _ in range(100):
            x = rng.uniform(-1, 1, (16, 3))
            cache = forward_cached(net, x)
            g = backward(net, cache, cache.out - 1.0)
            sr.optimizer_step(net, g, st)
        return net

    a, b = run(), run()
    for Wa, Wb in zip(a.weights, b.weights):
        assert np.array_equal(Wa, Wb)


def test_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    net = sr.init_mlp((3, 7, 2), head="clamp", head_box=sr.box((-1, 1), (-2, 2)),
                      seed=12, role="K")
    path = tmp_path / "k.ckpt"
    sr.save_mlp(net, path, config_hash="abc123")
    loaded = sr.load_mlp(path, expect_role="K")
    x = rng.uniform(-1, 1, (100, 3))
    assert np.array_equal(sr.forward(net, x), sr.forward(loaded, x))
    for Wa, Wb in zip(net.weights, loaded.weights):
        assert np.array_equal(Wa, Wb)
    assert checkpoint_config_hash(path) == "abc123"


def test_load_truncated_file(tmp_path):
    net = sr.init_mlp((3, 4, 1), head="sigmoid", seed=0, role="V")
    path = tmp_path / "v.ckpt"
    sr.save_mlp(net, path)
    text = path.read_text()
    lines = text.splitlines()
    # chop values off the first weight block
    for i, ln in enumerate(lines):
        if ln.startswith("W0"):
            parts = ln.split()
            lines[i] = " ".join(parts[:5])
            break
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match="expected 12 values"):
        sr.load_mlp(path)


def test_load_role_mismatch(tmp_path):
    net = sr.init_mlp((3, 4, 1), head="sigmoid", seed=0, role="V")
    path = tmp_path / "v.ckpt"
    sr.save_mlp(net, path)
    with pytest.raises(ValueError, match="head mismatch"):
        sr.load_mlp(path, expect_role="K")


def test_load_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_text("not a checkpoint\n")
    with pytest.raises(ValueError, match="malformed|format"):
        sr.load_mlp(path)
