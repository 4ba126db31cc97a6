"""Black-box discrete-time control systems and the built-in benchmark catalog.

A system is a tuple (X, X0, Y, U, f, h): state box, initial-state box, output
box, input box, step map x+ = f(x, u) and output map y = h(x), plus declared
Lipschitz constants (L_x, L_u for f, L_h for h, all under the infinity norm).
Step and output evaluators are pure and accept either a single point (n,) or
a batch (N, n).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .boxes import Box, box

BUILTIN_SYSTEMS = ("vehicle5d", "vehicle3d", "double_pendulum", "pendulum")
BUILTIN_CONTROLLERS = ("vehicle_waypoint", "pendulum_stabilizer", "zero", "random")

GRAVITY = 9.8


@dataclass(frozen=True)
class SystemDef:
    """A black-box discrete-time control system with Lipschitz metadata."""

    name: str
    n: int
    m: int
    l: int
    X: Box
    X0: Box
    U: Box
    Y: Box
    step_fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    output_fn: Callable[[np.ndarray], np.ndarray]
    L_x: float
    L_u: float
    L_h: float
    tau: float | None = None

    def __post_init__(self):
        if self.X.dim != self.n or self.X0.dim != self.n:
            raise ValueError(f"{self.name}: state boxes must be {self.n}-dimensional")
        if self.U.dim != self.m:
            raise ValueError(f"{self.name}: input box must be {self.m}-dimensional")
        if self.Y.dim != self.l:
            raise ValueError(f"{self.name}: output box must be {self.l}-dimensional")
        if not self.X0.issubset(self.X):
            raise ValueError(f"{self.name}: X0 must be contained in X")
        if min(self.L_x, self.L_u, self.L_h) < 0:
            raise ValueError(f"{self.name}: Lipschitz constants must be nonnegative")

    def step(self, x, u) -> np.ndarray:
        """One step of the dynamics; broadcasts over a leading batch axis."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        single = x.ndim == 1
        xb = np.atleast_2d(x)
        ub = np.atleast_2d(u) if u.ndim <= 1 else u
        if single and u.ndim <= 1:
            ub = np.asarray(u, dtype=float).reshape(1, self.m)
        if xb.shape[1] != self.n:
            raise ValueError(f"{self.name}: state has dim {xb.shape[1]}, expected {self.n}")
        if ub.shape[1] != self.m:
            raise ValueError(f"{self.name}: input has dim {ub.shape[1]}, expected {self.m}")
        if ub.shape[0] == 1 and xb.shape[0] > 1:
            ub = np.broadcast_to(ub, (xb.shape[0], self.m))
        out = self.step_fn(xb, ub)
        return out[0] if single else out

    def output(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xb = np.atleast_2d(x)
        if xb.shape[1] != self.n:
            raise ValueError(f"{self.name}: state has dim {xb.shape[1]}, expected {self.n}")
        out = self.output_fn(xb)
        return out[0] if single else out


@dataclass(frozen=True)
class ControllerDef:
    """A source-side control policy u_hat = policy(x_hat, t), clamped into U_hat."""

    name: str
    policy: Callable[[np.ndarray, int], np.ndarray]


@dataclass(frozen=True)
class LipschitzCheckReport:
    max_ratio_f: float
    max_ratio_h: float
    violations: int
    pairs: int


# ---------------------------------------------------------------------------
# Built-in dynamics.  All maps are written batched: x is (N, n), u is (N, m).
# ---------------------------------------------------------------------------


def _vehicle5d_step(tau):
    def f(x, u):
        x1, x2, delta, v, psi = x.T
        out = np.empty_like(x)
        out[:, 0] = x1 + tau * v * np.sin(psi)
        out[:, 1] = x2 + tau * v * np.cos(psi)
        out[:, 2] = delta + tau * u[:, 0]
        out[:, 3] = v + tau * u[:, 1]
        out[:, 4] = psi + tau * v * np.tan(delta)
        return out

    return f


def _vehicle3d_step(tau):
    def f(x, u):
        out = np.empty_like(x)
        out[:, 0] = x[:, 0] + tau * np.sin(x[:, 2])
        out[:, 1] = x[:, 1] + tau * np.cos(x[:, 2])
        out[:, 2] = x[:, 2] + tau * u[:, 0]
        return out

    return f


def _position_output(x):
    return x[:, :2].copy()


def _double_pendulum_step(tau, g):
    # Simplified discretization: the two velocity updates are decoupled.
    def f(x, u):
        th1, w1, th2, w2 = x.T
        s12 = np.sin(th1 - th2)
        out = np.empty_like(x)
        out[:, 0] = th1 + tau * w1
        out[:, 1] = w1 + tau * (g * np.sin(th1) - s12 * w1**2) + tau * 30.0 * u[:, 0]
        out[:, 2] = th2 + tau * w2
        out[:, 3] = w2 + tau * (g * np.sin(th2) + s12 * w2**2) + tau * 39.0 * u[:, 1]
        return out

    return f


def _pendulum_step(tau, g):
    def f(x, u):
        out = np.empty_like(x)
        out[:, 0] = x[:, 0] + tau * x[:, 1]
        out[:, 1] = x[:, 1] + tau * g * np.sin(x[:, 0]) + tau * 9.1 * u[:, 0]
        return out

    return f


def _identity_output(x):
    return x.copy()


def _make_vehicle5d() -> SystemDef:
    tau = 0.1
    X_hat = box((-2, 3), (0, 8), (-1, 1))
    X = X_hat.concat(box((-1, 1), (-1, 1)))
    X0 = box((-2, -1), (0, 2), (-1, 1)).concat(box((-1, 1), (-1, 1)))
    return SystemDef(
        name="vehicle5d", n=5, m=2, l=2,
        X=X, X0=X0, U=box((-1, 1), (-1, 1)), Y=box((-2, 3), (0, 8)),
        step_fn=_vehicle5d_step(tau), output_fn=_position_output,
        L_x=1.1, L_u=0.1, L_h=1.0, tau=tau,
    )


def _make_vehicle3d() -> SystemDef:
    tau = 0.1
    return SystemDef(
        name="vehicle3d", n=3, m=1, l=2,
        X=box((-2, 3), (0, 8), (-1, 1)),
        X0=box((-2, -1), (0, 2), (-1, 1)),
        U=box((-0.5, 0.5)), Y=box((-2, 3), (0, 8)),
        step_fn=_vehicle3d_step(tau), output_fn=_position_output,
        L_x=1.1, L_u=0.1, L_h=1.0, tau=tau,
    )


def _make_double_pendulum() -> SystemDef:
    tau = 0.01
    X = box((-0.5, 0.5), (-0.5, 0.5), (-0.5, 0.5), (-0.5, 0.5))
    return SystemDef(
        name="double_pendulum", n=4, m=2, l=2,
        X=X, X0=X, U=box((-1, 1), (-1, 1)), Y=box((-0.5, 0.5), (-0.5, 0.5)),
        step_fn=_double_pendulum_step(tau, GRAVITY), output_fn=_position_output,
        L_x=1.098, L_u=0.39, L_h=1.0, tau=tau,
    )


def _make_pendulum() -> SystemDef:
    tau = 0.01
    X = box((-0.5, 0.5), (-0.5, 0.5))
    return SystemDef(
        name="pendulum", n=2, m=1, l=2,
        X=X, X0=X, U=box((-1, 1)), Y=X,
        step_fn=_pendulum_step(tau, GRAVITY), output_fn=_identity_output,
        L_x=1.098, L_u=0.091, L_h=1.0, tau=tau,
    )


def _make_leaky2d_pair():
    """Demo pair of output-contracting 2-d linear systems (not a paper benchmark).

    x+ = 0.6 x + (0.1, 0.1) u with identity output.  The contraction makes the
    validity conditions satisfiable at desk scale, so this pair exercises the
    full train/certify/transfer pipeline end to end.
    """
    A = 0.6
    B = 0.1

    def f(x, u):
        return A * x + B * u[:, [0, 0]]

    X = box((-0.5, 0.5), (-0.5, 0.5))
    X0 = box((-0.2, 0.2), (-0.2, 0.2))
    target = SystemDef(
        name="leaky2d", n=2, m=1, l=2,
        X=X, X0=X0, U=box((-0.5, 0.5)), Y=X,
        step_fn=f, output_fn=_identity_output,
        L_x=A, L_u=B, L_h=1.0, tau=1.0,
    )
    return target


_SYSTEM_FACTORIES: dict[str, Callable[[], SystemDef]] = {
    "vehicle5d": _make_vehicle5d,
    "vehicle3d": _make_vehicle3d,
    "double_pendulum": _make_double_pendulum,
    "pendulum": _make_pendulum,
}

# Registry used by config-defined systems: maps a dynamics name to the
# (step_fn, output_fn) pair of the corresponding builtin.  `leaky2d` is a demo
# entry beyond the four benchmarks; builtin_system() does not expose it.
_DYNAMICS_REGISTRY: dict[str, Callable[[], SystemDef]] = dict(_SYSTEM_FACTORIES)
_DYNAMICS_REGISTRY["leaky2d"] = _make_leaky2d_pair


def builtin_system(name: str) -> SystemDef:
    """Return one of the four benchmark systems by name."""
    if name not in _SYSTEM_FACTORIES:
        raise ValueError(
            f"unknown system {name!r}; valid names: {', '.join(BUILTIN_SYSTEMS)}"
        )
    return _SYSTEM_FACTORIES[name]()


def register_dynamics(name: str, factory: Callable[[], SystemDef]) -> None:
    """Register custom dynamics so config-defined systems can select them."""
    _DYNAMICS_REGISTRY[name] = factory


def registered_dynamics() -> tuple[str, ...]:
    return tuple(sorted(_DYNAMICS_REGISTRY))


def system_from_config(spec: dict) -> SystemDef:
    """Build a system from a flat config mapping.

    Required key: `dynamics` (a registered dynamics name).  Optional keys
    override the boxes and Lipschitz constants of the registered definition:
    `x_lb`, `x_ub`, `x0_lb`, `x0_ub`, `u_lb`, `u_ub`, `y_lb`, `y_ub` (comma
    lists) and `L_x`, `L_u`, `L_h`, `name`.
    """
    dyn = spec.get("dynamics")
    if dyn is None:
        raise ValueError("system config needs a 'dynamics' key")
    if dyn not in _DYNAMICS_REGISTRY:
        raise ValueError(
            f"unknown dynamics {dyn!r}; registered: {', '.join(registered_dynamics())}"
        )
    base = _DYNAMICS_REGISTRY[dyn]()

    def _vec(key):
        val = spec.get(key)
        if val is None:
            return None
        if isinstance(val, str):
            return np.array([float(p) for p in val.replace(",", " ").split()])
        return np.asarray(val, dtype=float)

    def _box(lb_key, ub_key, default: Box) -> Box:
        lb, ub = _vec(lb_key), _vec(ub_key)
        if lb is None and ub is None:
            return default
        if lb is None or ub is None:
            raise ValueError(f"both {lb_key} and {ub_key} must be given")
        return Box(lb, ub)

    X = _box("x_lb", "x_ub", base.X)
    X0 = _box("x0_lb", "x0_ub", base.X0)
    U = _box("u_lb", "u_ub", base.U)
    Y = _box("y_lb", "y_ub", base.Y)
    return SystemDef(
        name=str(spec.get("name", base.name)),
        n=base.n, m=base.m, l=base.l,
        X=X, X0=X0, U=U, Y=Y,
        step_fn=base.step_fn, output_fn=base.output_fn,
        L_x=float(spec.get("L_x", base.L_x)),
        L_u=float(spec.get("L_u", base.L_u)),
        L_h=float(spec.get("L_h", base.L_h)),
        tau=base.tau,
    )


# ---------------------------------------------------------------------------
# Built-in source controllers (stand-ins; the transfer guarantee is
# controller-agnostic, any U_hat-valued policy exercises it).
# ---------------------------------------------------------------------------


def _waypoint_policy(U: Box):
    goal = np.array([0.5, 4.0])  # inside the 3-d car's position box

    def policy(xhat, t):
        dx, dy = goal[0] - xhat[0], goal[1] - xhat[1]
        # heading 0 points along +x2: desired heading is atan2 over (dx, dy)
        psi_des = np.arctan2(dx, dy)
        err = (psi_des - xhat[2] + np.pi) % (2 * np.pi) - np.pi
        return U.clamp(np.array([1.5 * err]))

    return policy


def _stabilizer_policy(U: Box):
    def policy(xhat, t):
        return U.clamp(np.array([-2.0 * xhat[0] - 1.0 * xhat[1]]))

    return policy


def _zero_policy(U: Box):
    zero = np.zeros(U.dim)

    def policy(xhat, t):
        return zero.copy()

    return policy


def _random_policy(U: Box, seed: int):
    def policy(xhat, t):
        # per-step generator keyed on (seed, t): deterministic across runs and
        # insensitive to call order, so concurrent trials stay reproducible
        rng = np.random.default_rng([seed, int(t)])
        return rng.uniform(U.lb, U.ub)

    return policy


def builtin_controller(name: str, U: Box, seed: int = 0) -> ControllerDef:
    """Return a built-in controller whose outputs are clamped into U."""
    if name == "vehicle_waypoint":
        return ControllerDef(name, _waypoint_policy(U))
    if name == "pendulum_stabilizer":
        return ControllerDef(name, _stabilizer_policy(U))
    if name == "zero":
        return ControllerDef(name, _zero_policy(U))
    if name == "random":
        return ControllerDef(f"random({seed})", _random_policy(U, seed))
    raise ValueError(
        f"unknown controller {name!r}; valid names: {', '.join(BUILTIN_CONTROLLERS)}"
    )


def sample_lipschitz_check(sys: SystemDef, pairs: int, seed: int = 0) -> LipschitzCheckReport:
    """Monte-Carlo sanity check of the declared Lipschitz constants.

    Draws random (x, u), (x', u') pairs and compares the empirical increments
    of f and h against L_x ||x-x'|| + L_u ||u-u'|| and L_h ||x-x'||.  A ratio
    above 1 means the declared constants are too small for that pair.
    """
    if pairs < 1:
        raise ValueError("pairs must be >= 1")
    rng = np.random.default_rng(seed)
    x = sys.X.sample(rng, pairs)
    xp = sys.X.sample(rng, pairs)
    u = sys.U.sample(rng, pairs)
    up = sys.U.sample(rng, pairs)

    dx = np.max(np.abs(x - xp), axis=1)
    du = np.max(np.abs(u - up), axis=1)

    df = np.max(np.abs(sys.step(x, u) - sys.step(xp, up)), axis=1)
    dh = np.max(np.abs(sys.output(x) - sys.output(xp)), axis=1)

    bound_f = sys.L_x * dx + sys.L_u * du
    bound_h = sys.L_h * dx

    ok_f = bound_f > 0
    ok_h = bound_h > 0
    ratio_f = df[ok_f] / bound_f[ok_f]
    ratio_h = dh[ok_h] / bound_h[ok_h]

    max_f = float(ratio_f.max()) if ratio_f.size else 0.0
    max_h = float(ratio_h.max()) if ratio_h.size else 0.0
    violations = int(np.sum(ratio_f > 1.0) + np.sum(ratio_h > 1.0))
    return LipschitzCheckReport(max_ratio_f=max_f, max_ratio_h=max_h,
                                violations=violations, pairs=pairs)
