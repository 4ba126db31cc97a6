import math

import numpy as np
import pytest

import simrel as sr
from simrel.training import (_BatchStream, label_dataset, loss_K, loss_V,
                             pair_error_max)
from conftest import leaky_train_config, make_identity_1d, passthrough_K


def small_cfg(**kw):
    base = dict(eps=0.02, eta=0.1, gamma=0.016, e=0.4, e_hat=2.0, N=5,
                max_iters=10, seed=0, v_hidden=(4,), k_hidden=(4,))
    base.update(kw)
    return sr.TrainConfig(**base)


def halving_1d(gain=0.0):
    """Identical 1-d systems x+ = 0.5 x (+ gain*u), identity output, centered
    so the e=0.4 cover of [-0.4, 0.4] has centers exactly at -0.2 and 0.2."""
    def f(x, u):
        return 0.5 * x + gain * u

    X = sr.box((-0.4, 0.4))
    return sr.SystemDef(name="halving", n=1, m=1, l=1, X=X, X0=X,
                        U=sr.box((-1, 1)), Y=X, step_fn=f,
                        output_fn=lambda x: x.copy(), L_x=0.5, L_u=gain, L_h=1.0)


def test_config_invariants():
    with pytest.raises(ValueError):
        small_cfg(eta=0.0)
    with pytest.raises(ValueError):
        small_cfg(gamma=-0.1)
    with pytest.raises(ValueError):
        small_cfg(eps=0.001, gamma=0.016)
    with pytest.raises(ValueError):
        small_cfg(e=0.0)
    with pytest.raises(ValueError):
        small_cfg(N=0)
    with pytest.raises(ValueError):
        small_cfg(cond10_mode="other")


def test_labeling_identical_pair_positive():
    s = halving_1d()
    ds = sr.build_joint_dataset(s, s, eps=1.0, e=0.4, e_hat=2.0)
    K = passthrough_K(1, 1, 1, s.U)
    cfg = small_cfg()
    labels = label_dataset(ds, s, s, K, cfg)
    x, xh = ds.pairs()
    diag = np.isclose(x[:, 0], xh[:, 0])
    # diagonal pairs have zero next-step error -> positive
    assert np.all(labels.classes[diag] == 1)
    # the (0.2, -0.2) pair: |0.1 - (-0.1)| = 0.2 >= eps - gamma -> negative
    off = ~diag
    assert np.all(labels.classes[off] == -1)
    assert np.all(np.isclose(labels.err_max[off], 0.2))


def test_labeling_rejects_bad_margins():
    s = halving_1d()
    ds = sr.build_joint_dataset(s, s, eps=1.0, e=0.4, e_hat=2.0)
    K = passthrough_K(1, 1, 1, s.U)
    cfg = small_cfg(eps=0.016, gamma=0.016)  # eps - gamma = 0
    with pytest.raises(ValueError, match="eps - gamma"):
        label_dataset(ds, s, s, K, cfg)


def test_labeling_pure_function():
    s = halving_1d()
    ds = sr.build_joint_dataset(s, s, eps=1.0, e=0.4, e_hat=2.0)
    K = passthrough_K(1, 1, 1, s.U)
    cfg = small_cfg()
    a = label_dataset(ds, s, s, K, cfg)
    b = label_dataset(ds, s, s, K, cfg)
    assert np.array_equal(a.classes, b.classes)
    assert np.array_equal(a.err_max, b.err_max)


def test_label_band_creates_undecided():
    s = halving_1d()
    ds = sr.build_joint_dataset(s, s, eps=1.0, e=0.4, e_hat=2.0)
    K = passthrough_K(1, 1, 1, s.U)
    # thresholds: positive < 0.2 - 0.15 = 0.05, negative >= 0.2; the
    # off-diagonal error is exactly 0.2 -> negative; shrink gamma so the
    # off-diagonal pair lands in the band instead
    cfg = small_cfg(eps=0.5, gamma=0.25, label_band=0.1)
    labels = label_dataset(ds, s, s, K, cfg)
    # err 0.2 < 0.25 - 0.1? no: 0.2 >= 0.15, so band; err 0 -> positive
    assert labels.n_positive == 2
    assert labels.n_undecided == 2
    assert labels.n_negative == 0


def _const_v(bias: float) -> sr.Mlp:
    net = sr.init_mlp((2, 4, 1), head="sigmoid", seed=0)
    for W in net.weights:
        W[:] = 0.0
    net.biases[-1][:] = bias
    return net


def test_loss_v_single_positive_pair():
    s = halving_1d()
    ds = sr.build_joint_dataset(s, s, eps=0.0, e=0.4, e_hat=2.0)
    K = passthrough_K(1, 1, 1, s.U)
    cfg = small_cfg()
    labels = label_dataset(ds, s, s, K, cfg)
    assert labels.n_positive == 2
    V = _const_v(0.0)  # V = 0.5 everywhere
    lb, _ = loss_V(ds, labels, V, K, s, s, cfg, np.array([0]))
    assert lb.l2 == pytest.approx(-math.log(0.5), rel=1e-12)
    assert lb.l1 == 0.0  # X_nsi empty when labels were built without V
    assert lb.l4 == 0.0


def test_loss_v_l3_gate_empty():
    s = halving_1d()
    ds = sr.build_joint_dataset(s, s, eps=0.0, e=0.4, e_hat=2.0)
    K = passthrough_K(1, 1, 1, s.U)
    cfg = small_cfg()
    labels = label_dataset(ds, s, s, K, cfg)
    V = _const_v(math.log(0.4 / 0.6))  # V = 0.5 - eta, below the gate
    lb, _ = loss_V(ds, labels, V, K, s, s, cfg, np.arange(len(ds)))
    assert lb.l3 == 0.0 and lb.n3 == 0


def test_loss_v_gradient_matches_finite_difference():
    s = halving_1d(gain=0.1)
    ds = sr.build_joint_dataset(s, s, eps=1.0, e=0.4, e_hat=2.0)
    K = passthrough_K(1, 1, 1, s.U)
    cfg = small_cfg()
    labels = label_dataset(ds, s, s, K, cfg, V=None)
    V = sr.init_mlp((2, 5, 1), head="sigmoid", seed=3)
    idx = np.arange(len(ds))
    _, g = loss_V(ds, labels, V, K, s, s, cfg, idx)
    delta = 1e-6
    for j, W in enumerate(V.weights):
        it = np.nditer(W, flags=["multi_index"])
        for _ in it:
            pos = it.multi_index
            old = W[pos]
            W[pos] = old + delta
            lp, _ = loss_V(ds, labels, V, K, s, s, cfg, idx)
            W[pos] = old - delta
            lm, _ = loss_V(ds, labels, V, K, s, s, cfg, idx)
            W[pos] = old
            fd = (lp.total_v - lm.total_v) / (2 * delta)
            assert abs(g.dW[j][pos] - fd) / (abs(fd) + 1e-6) < 1e-3


def test_loss_k_passthrough_zero():
    s = halving_1d(gain=0.1)
    ds = sr.build_joint_dataset(s, s, eps=0.0, e=0.4, e_hat=2.0)
    K = passthrough_K(1, 1, 1, s.U)
    cfg = small_cfg()
    labels = label_dataset(ds, s, s, K, cfg)
    V = _const_v(10.0)  # gate everything
    lb, g = loss_K(ds, labels, V, K, s, s, cfg, np.arange(len(ds)))
    assert lb.l_k == pytest.approx(0.0, abs=1e-12)


def test_loss_k_hand_value():
    # engineered pair: target output 0.3, source output 0.1 -> contribution 0.2
    s = halving_1d()
    ds = sr.build_joint_dataset(s, s, eps=1.0, e=0.4, e_hat=2.0)
    x, xh = ds.pairs()
    # find the pair (0.2, -0.2): next outputs 0.1 and -0.1 -> |0.1-(-0.1)| = 0.2
    row = next(i for i in range(len(ds))
               if np.isclose(x[i, 0], 0.2) and np.isclose(xh[i, 0], -0.2))
    K = passthrough_K(1, 1, 1, s.U)
    cfg = small_cfg()
    labels = label_dataset(ds, s, s, K, cfg)
    V = _const_v(10.0)
    lb, _ = loss_K(ds, labels, V, K, s, s, cfg, np.array([row]))
    assert lb.l_k == pytest.approx(0.2, rel=1e-9)


def test_loss_k_empty_gate():
    s = halving_1d(gain=0.1)
    ds = sr.build_joint_dataset(s, s, eps=0.0, e=0.4, e_hat=2.0)
    K = passthrough_K(1, 1, 1, s.U)
    cfg = small_cfg()
    labels = label_dataset(ds, s, s, K, cfg)
    V = _const_v(-10.0)  # nothing gated
    before = [W.copy() for W in K.weights]
    lb, g = loss_K(ds, labels, V, K, s, s, cfg, np.arange(len(ds)))
    assert lb.l_k == 0.0 and lb.n_k == 0
    assert all(np.all(gw == 0) for gw in g.dW)
    assert all(np.array_equal(a, b) for a, b in zip(K.weights, before))


def test_loss_k_gradient_finite_difference():
    s = halving_1d(gain=0.1)
    ds = sr.build_joint_dataset(s, s, eps=1.0, e=0.4, e_hat=2.0)
    cfg = small_cfg(k_loss="squared")
    K = sr.init_mlp((3, 4, 1), head="clamp", head_box=s.U, seed=5, scale=0.3)
    labels = label_dataset(ds, s, s, K, cfg)
    V = _const_v(10.0)
    idx = np.arange(len(ds))
    _, g = loss_K(ds, labels, V, K, s, s, cfg, idx)
    delta = 1e-6
    W = K.weights[0]
    for pos in [(0, 0), (1, 2), (3, 1)]:
        old = W[pos]
        W[pos] = old + delta
        lp, _ = loss_K(ds, labels, V, K, s, s, cfg, idx)
        W[pos] = old - delta
        lm, _ = loss_K(ds, labels, V, K, s, s, cfg, idx)
        W[pos] = old
        fd = (lp.l_k - lm.l_k) / (2 * delta)
        assert abs(g.dW[0][pos] - fd) / (abs(fd) + 1e-5) < 1e-3


def test_batch_stream_without_replacement():
    st = _BatchStream(10, 3, seed=0)
    seen = np.concatenate([st.next(), st.next(), st.next()])
    assert len(set(seen.tolist())) == 9  # one epoch, no repeats


def test_algorithm1_converges_on_contracting_pair(leaky_artifact):
    cfg, result = leaky_artifact
    assert result.converged
    assert result.report.verdict
    assert result.iterations <= cfg.max_iters
    # history carries both loss records and certification records
    assert any(r.get("phase") == "certify" for r in result.history)
    assert any(r.get("phase") == "K" for r in result.history)


def test_algorithm1_max_iters_zero(leaky_system, leaky_dataset):
    cfg = leaky_train_config(max_iters=0, k_init="zero")
    res = sr.algorithm1(leaky_system, leaky_system, leaky_dataset, cfg)
    assert not res.converged
    assert res.iterations == 0
    assert res.report.failing_conditions()


def test_algorithm1_bit_identical_replay(leaky_system):
    cfg = leaky_train_config(max_iters=80, N=40)
    ds = sr.build_joint_dataset(leaky_system, leaky_system, cfg.eps, cfg.e, cfg.e_hat)
    r1 = sr.algorithm1(leaky_system, leaky_system, ds, cfg)
    r2 = sr.algorithm1(leaky_system, leaky_system, ds, cfg)
    for a, b in zip(r1.V.weights, r2.V.weights):
        assert np.array_equal(a, b)
    for a, b in zip(r1.K.weights, r2.K.weights):
        assert np.array_equal(a, b)
    assert r1.history == r2.history


def test_loss_gates_match_certifier(leaky_artifact, leaky_system, leaky_dataset):
    """Pairs the certifier accepts as positive are exactly the pairs with
    V >= 0.5 + eta, matching the loss gates."""
    cfg, result = leaky_artifact
    labels = result.labels
    x, xh = leaky_dataset.pairs()
    v = sr.forward(result.V, np.hstack([x, xh]))[:, 0]
    pos = labels.classes == 1
    neg = labels.classes == -1
    assert np.all(v[pos] >= 0.5 + cfg.eta)
    if np.any(neg):
        assert np.all(v[neg] < 0.5 - cfg.eta)
