"""Deploying a certified (V, K) pair: initial-state matching, closed-loop
co-simulation of source and target, and randomized soundness trials.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .cover import JointDataset
from .nets import Mlp, forward
from .systems import ControllerDef, SystemDef, builtin_controller
from .training import _k_input, _v_input


class MatchError(ValueError):
    pass


@dataclass
class Trace:
    """Per-step records of a transfer run; index t runs 0..T inclusive."""

    t: np.ndarray
    xhat: np.ndarray
    uhat: np.ndarray
    x: np.ndarray
    u: np.ndarray
    yhat: np.ndarray
    y: np.ndarray
    err: np.ndarray
    max_err: float
    excursions: int          # steps where a state left its declared box
    truncated: bool = False  # non-finite state encountered

    def __len__(self) -> int:
        return self.t.size


def match_initial(xhat0, ds: JointDataset, V: Mlp) -> tuple[np.ndarray, float]:
    """Initial target state: the X0 grid point maximizing V(., xhat0) among
    output-close candidates (membership in the relation needs both).

    Ties break by enumeration order.  Fails when even the best value is below
    0.5, meaning the certificate does not cover this initial source state.
    """
    xhat0 = np.asarray(xhat0, dtype=float)
    x0s = ds.x0_cover.centers_array()
    gap = np.max(np.abs(ds.target.output(x0s) - ds.source.output(xhat0)), axis=1)
    vals = forward(V, _v_input(x0s, np.broadcast_to(xhat0, (x0s.shape[0], xhat0.size))))[:, 0]
    vals = np.where(gap <= ds.eps, vals, -np.inf)
    best = int(np.argmax(vals))
    if not np.isfinite(vals[best]):
        raise MatchError("no initial candidate is output-close to this source state")
    if vals[best] < 0.5:
        raise MatchError(
            f"no matching initial state: best V={vals[best]:.6f} < 0.5"
        )
    return x0s[best], float(vals[best])


def _interface_fn(K) -> Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]:
    if isinstance(K, Mlp):
        def fn(x, xhat, uhat):
            return forward(K, np.concatenate([x, xhat, uhat])[None, :])[0]
        return fn
    return K


def run_transfer(target: SystemDef, source: SystemDef, controller: ControllerDef,
                 K, xhat0, x0, T: int, eps: float) -> Trace:
    """Run the source under its controller and the target under the interface.

    Per step: uhat = controller(xhat, t); u = K(x, xhat, uhat); both systems
    advance.  The source simulator runs in the loop (the interface consumes
    its state).  Outputs and the infinity-norm error are recorded for every
    step including step T.  A non-finite state truncates the trace with the
    diagnostic flag set.
    """
    if T < 1:
        raise ValueError("horizon must be at least 1")
    kf = _interface_fn(K)
    xhat = np.asarray(xhat0, dtype=float).copy()
    x = np.asarray(x0, dtype=float).copy()

    ts, xs, us, xhs, uhs, ys, yhs, errs = [], [], [], [], [], [], [], []
    excursions = 0
    truncated = False
    for t in range(T + 1):
        y = target.output(x)
        yh = source.output(xhat)
        ts.append(t)
        xs.append(x.copy())
        xhs.append(xhat.copy())
        ys.append(y)
        yhs.append(yh)
        errs.append(float(np.max(np.abs(y - yh))))
        if not (target.X.contains(x) and source.X.contains(xhat)):
            excursions += 1
        if t == T:
            uhs.append(np.full(source.m, np.nan))
            us.append(np.full(target.m, np.nan))
            break
        uhat = np.asarray(controller.policy(xhat, t), dtype=float)
        u = np.asarray(kf(x, xhat, uhat), dtype=float)
        uhs.append(uhat)
        us.append(u)
        xhat = source.step(xhat, uhat)
        x = target.step(x, u)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(xhat))):
            truncated = True
            break

    err = np.array(errs)
    return Trace(
        t=np.array(ts), xhat=np.array(xhs), uhat=np.array(uhs),
        x=np.array(xs), u=np.array(us), yhat=np.array(yhs), y=np.array(ys),
        err=err, max_err=float(err.max()), excursions=excursions,
        truncated=truncated,
    )


@dataclass
class MonteCarloReport:
    trials: int
    violations: int
    max_err: float
    worst_trial: int = -1
    per_trial_max: np.ndarray = field(default_factory=lambda: np.empty(0))


def monte_carlo_soundness(target: SystemDef, source: SystemDef, K, V: Mlp,
                          ds: JointDataset, trials: int, T: int, eps: float,
                          seed: int = 0) -> MonteCarloReport:
    """Randomized face of the transfer guarantee.

    Each trial samples an initial source state uniformly from X_hat_0 and a
    fresh seeded random controller, matches the initial target state through
    V, runs the closed loop, and counts eps-violations of the output error.
    """
    if trials < 0:
        raise ValueError("trials must be nonnegative")
    per_trial = np.zeros(trials)
    violations = 0
    worst = -1
    max_err = 0.0
    rng = np.random.default_rng(seed)
    for k in range(trials):
        xhat0 = source.X0.sample(rng)
        ctrl = builtin_controller("random", source.U, seed=seed * 100003 + k)
        x0, _ = match_initial(xhat0, ds, V)
        tr = run_transfer(target, source, ctrl, K, xhat0, x0, T, eps)
        per_trial[k] = tr.max_err
        if tr.max_err > eps or tr.truncated:
            violations += 1
        if tr.max_err > max_err:
            max_err, worst = tr.max_err, k
    return MonteCarloReport(trials=trials, violations=violations,
                            max_err=max_err, worst_trial=worst,
                            per_trial_max=per_trial)


def trace_to_csv(trace: Trace, path) -> None:
    """CSV export, one column per state/input/output component, fixed order."""
    n, m = trace.x.shape[1], trace.u.shape[1]
    nh, mh = trace.xhat.shape[1], trace.uhat.shape[1]
    ly = trace.y.shape[1]
    cols = (["t"]
            + [f"xhat{i}" for i in range(nh)] + [f"uhat{i}" for i in range(mh)]
            + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)]
            + [f"yhat{i}" for i in range(ly)] + [f"y{i}" for i in range(ly)]
            + ["err"])
    with open(path, "w") as f:
        f.write(",".join(cols) + "\n")
        for i in range(len(trace)):
            row = ([f"{int(trace.t[i])}"]
                   + [repr(float(v)) for v in trace.xhat[i]]
                   + [repr(float(v)) for v in trace.uhat[i]]
                   + [repr(float(v)) for v in trace.x[i]]
                   + [repr(float(v)) for v in trace.u[i]]
                   + [repr(float(v)) for v in trace.yhat[i]]
                   + [repr(float(v)) for v in trace.y[i]]
                   + [repr(float(trace.err[i]))])
            f.write(",".join(row) + "\n")
