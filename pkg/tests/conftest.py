import numpy as np
import pytest

import simrel as sr
from simrel.systems import _make_leaky2d_pair


def leaky_train_config(**overrides):
    base = dict(
        eps=0.1, eta=0.1, gamma=0.03, e=0.025, e_hat=0.1,
        N=40, max_iters=480, lr_v=2e-2, lr_k=2e-3, batch_size=512, seed=3,
        label_band=0.01, v_hidden=(16, 16), k_hidden=(16,),
        k_init="passthrough", lip_cap_v=6.0, lip_cap_k=1.5,
    )
    base.update(overrides)
    return sr.TrainConfig(**base)


@pytest.fixture(scope="session")
def leaky_system():
    return _make_leaky2d_pair()


@pytest.fixture(scope="session")
def leaky_dataset(leaky_system):
    cfg = leaky_train_config()
    return sr.build_joint_dataset(leaky_system, leaky_system, cfg.eps, cfg.e, cfg.e_hat)


@pytest.fixture(scope="session")
def leaky_artifact(leaky_system, leaky_dataset):
    """A certified (V, K) pair on the contracting demo system."""
    cfg = leaky_train_config()
    result = sr.algorithm1(leaky_system, leaky_system, leaky_dataset, cfg)
    assert result.converged, result.report.failing_conditions()
    return cfg, result


def make_identity_1d(scale=0.5, gain=0.1):
    """Identical 1-d linear systems used by spec-level labeling examples."""
    def f(x, u):
        return scale * x + gain * u

    X = sr.box((-1, 1))
    return sr.SystemDef(
        name="lin1d", n=1, m=1, l=1,
        X=X, X0=sr.box((-0.5, 0.5)), U=sr.box((-1, 1)), Y=X,
        step_fn=f, output_fn=lambda x: x.copy(),
        L_x=scale, L_u=gain, L_h=1.0,
    )


def passthrough_K(n, n_hat, m, U):
    W = np.zeros((m, n + n_hat + m))
    for c in range(m):
        W[c, n + n_hat + c] = 1.0
    return sr.Mlp((n + n_hat + m, m), [W], [np.zeros(m)], head="clamp",
                  head_box=U, role="K")


def zero_K(n, n_hat, m_hat, m, U):
    return sr.Mlp((n + n_hat + m_hat, m), [np.zeros((m, n + n_hat + m_hat))],
                  [np.zeros(m)], head="clamp", head_box=U, role="K")
