"""Fully connected ReLU networks with exact backprop and certified norm bounds.

The last layer's activation is selected by a head:

  relu     -- the plain definition, sigma applied at every layer
  linear   -- raw affine output
  sigmoid  -- scalar logistic squashing onto [0, 1] (classifier V)
  clamp    -- componentwise hard clamp onto a box (interface K)

Hidden activations are always ReLU.  All forward/backward math is float64 and
batched: inputs are (N, n_i).
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boxes import Box

HEADS = ("relu", "linear", "sigmoid", "clamp")
_HEAD_LIP = {"relu": 1.0, "linear": 1.0, "sigmoid": 0.25, "clamp": 1.0}


@dataclass
class Mlp:
    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]        # W_j: (out_j, in_j)
    biases: list[np.ndarray]         # b_j: (out_j,)
    head: str = "relu"
    head_box: Box | None = None      # required for the clamp head
    role: str | None = None          # "V" | "K" | None
    seed: int | None = None

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}; one of {HEADS}")
        if self.head == "clamp" and self.head_box is None:
            raise ValueError("clamp head needs a box")
        if self.head == "sigmoid" and self.layer_dims[-1] != 1:
            raise ValueError("sigmoid head is scalar; last layer dim must be 1")
        k = len(self.layer_dims) - 1
        if len(self.weights) != k or len(self.biases) != k:
            raise ValueError("weights/biases must match layer_dims")
        for j, (W, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.layer_dims[j + 1], self.layer_dims[j])
            if W.shape != expect or b.shape != (expect[0],):
                raise ValueError(f"layer {j} shapes {W.shape}/{b.shape} != {expect}")

    @property
    def n_inputs(self) -> int:
        return self.layer_dims[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_dims[-1]

    def copy(self) -> "Mlp":
        return Mlp(self.layer_dims, [W.copy() for W in self.weights],
                   [b.copy() for b in self.biases], self.head, self.head_box,
                   self.role, self.seed)


def init_mlp(layer_dims: Sequence[int], head: str = "relu",
             head_box: Box | None = None, seed: int = 0,
             role: str | None = None, scale: float = 1.0) -> Mlp:
    """Uniform fan-in-scaled initialization with a fixed seed."""
    dims = tuple(int(d) for d in layer_dims)
    rng = np.random.default_rng(seed)
    Ws, bs = [], []
    for j in range(len(dims) - 1):
        bound = scale / np.sqrt(dims[j])
        Ws.append(rng.uniform(-bound, bound, size=(dims[j + 1], dims[j])))
        bs.append(np.zeros(dims[j + 1]))
    return Mlp(dims, Ws, bs, head=head, head_box=head_box, role=role, seed=seed)


def _apply_head(net: Mlp, z: np.ndarray) -> np.ndarray:
    if net.head == "relu":
        return np.maximum(z, 0.0)
    if net.head == "linear":
        return z
    if net.head == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    return np.clip(z, net.head_box.lb, net.head_box.ub)


def forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Head-transformed network output; accepts (n_i,) or (N, n_i)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    a = np.atleast_2d(x)
    if a.shape[1] != net.n_inputs:
        raise ValueError(f"input dim {a.shape[1]} != expected {net.n_inputs}")
    k = len(net.weights)
    for j in range(k - 1):
        a = np.maximum(a @ net.weights[j].T + net.biases[j], 0.0)
    z = a @ net.weights[-1].T + net.biases[-1]
    out = _apply_head(net, z)
    return out[0] if single else out


@dataclass
class ForwardCache:
    x: np.ndarray
    activations: list[np.ndarray]    # post-ReLU hidden activations
    z_last: np.ndarray               # final-layer preactivation
    out: np.ndarray


def forward_cached(net: Mlp, x: np.ndarray) -> ForwardCache:
    a = np.atleast_2d(np.asarray(x, dtype=float))
    acts = [a]
    k = len(net.weights)
    for j in range(k - 1):
        a = np.maximum(a @ net.weights[j].T + net.biases[j], 0.0)
        acts.append(a)
    z = a @ net.weights[-1].T + net.biases[-1]
    return ForwardCache(x=acts[0], activations=acts, z_last=z, out=_apply_head(net, z))


@dataclass
class Gradients:
    dW: list[np.ndarray]
    db: list[np.ndarray]
    dx: np.ndarray                   # gradient w.r.t. the network input

    def scaled(self, s: float) -> "Gradients":
        return Gradients([g * s for g in self.dW], [g * s for g in self.db], self.dx * s)


def zero_gradients(net: Mlp) -> Gradients:
    return Gradients([np.zeros_like(W) for W in net.weights],
                     [np.zeros_like(b) for b in net.biases],
                     np.zeros((1, net.n_inputs)))


def backward(net: Mlp, cache: ForwardCache, upstream: np.ndarray) -> Gradients:
    """Exact gradients of sum(upstream * output) w.r.t. parameters and input.

    ReLU uses subgradient 0 at kinks; the clamp head has zero gradient outside
    its box.
    """
    g = np.atleast_2d(np.asarray(upstream, dtype=float))
    if net.head == "sigmoid":
        s = cache.out
        g = g * s * (1.0 - s)
    elif net.head == "clamp":
        inside = (cache.z_last > net.head_box.lb) & (cache.z_last < net.head_box.ub)
        g = g * inside
    elif net.head == "relu":
        g = g * (cache.z_last > 0.0)

    k = len(net.weights)
    dW = [None] * k
    db = [None] * k
    for j in range(k - 1, -1, -1):
        a_prev = cache.activations[j]
        dW[j] = g.T @ a_prev
        db[j] = g.sum(axis=0)
        g = g @ net.weights[j]
        if j > 0:
            g = g * (cache.activations[j] > 0.0)
    return Gradients(dW=dW, db=db, dx=g)


def lipschitz_upper_bound(net: Mlp) -> float:
    """Certified infinity-norm Lipschitz bound: prod of max-row-sums x head slope."""
    bound = 1.0
    for W in net.weights:
        bound *= float(np.max(np.sum(np.abs(W), axis=1))) if W.size else 0.0
    return bound * _HEAD_LIP[net.head]


def spectral_product(net: Mlp) -> float:
    """Reference 2-norm product bound (reported, not used by the certifier)."""
    prod = 1.0
    for W in net.weights:
        prod *= float(np.linalg.norm(W, 2)) if W.size else 0.0
    return prod * _HEAD_LIP[net.head]


def project_lipschitz(net: Mlp, cap: float) -> None:
    """Scale weights uniformly so the certified bound does not exceed cap.

    In-place; a no-op when the bound is already within the cap.  Used as an
    optimizer-side constraint during training so the validity conditions stay
    reachable.
    """
    if cap <= 0:
        raise ValueError("cap must be positive")
    bound = lipschitz_upper_bound(net)
    if bound <= cap or bound == 0.0:
        return
    s = (cap / bound) ** (1.0 / len(net.weights))
    for W in net.weights:
        W *= s


@dataclass
class TrainState:
    """Adam accumulators; shapes mirror the parameters."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m_W: list[np.ndarray] = field(default_factory=list)
    v_W: list[np.ndarray] = field(default_factory=list)
    m_b: list[np.ndarray] = field(default_factory=list)
    v_b: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_net(cls, net: Mlp, lr: float) -> "TrainState":
        st = cls(lr=lr)
        st.m_W = [np.zeros_like(W) for W in net.weights]
        st.v_W = [np.zeros_like(W) for W in net.weights]
        st.m_b = [np.zeros_like(b) for b in net.biases]
        st.v_b = [np.zeros_like(b) for b in net.biases]
        return st


def optimizer_step(net: Mlp, grads: Gradients, state: TrainState) -> None:
    """One Adam update, in place.  Rejects non-finite gradients."""
    for g in grads.dW + grads.db:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient; training diverged")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for j in range(len(net.weights)):
        state.m_W[j] = b1 * state.m_W[j] + (1 - b1) * grads.dW[j]
        state.v_W[j] = b2 * state.v_W[j] + (1 - b2) * grads.dW[j] ** 2
        net.weights[j] -= state.lr * (state.m_W[j] / c1) / (np.sqrt(state.v_W[j] / c2) + state.eps)
        state.m_b[j] = b1 * state.m_b[j] + (1 - b1) * grads.db[j]
        state.v_b[j] = b2 * state.v_b[j] + (1 - b2) * grads.db[j] ** 2
        net.biases[j] -= state.lr * (state.m_b[j] / c1) / (np.sqrt(state.v_b[j] / c2) + state.eps)


# ---------------------------------------------------------------------------
# Checkpoint format: a text header followed by row-major decimal floats, one
# layer per "W"/"b" block.  repr() round-trips float64 exactly, so save/load
# is bit-exact in any language that parses decimal floats correctly.
# ---------------------------------------------------------------------------


def _format_floats(a: np.ndarray) -> str:
    return " ".join(repr(float(v)) for v in a.ravel())


def save_mlp(net: Mlp, path, config_hash: str = "") -> None:
    buf = io.StringIO()
    buf.write("format = simrel-mlp-v1\n")
    buf.write(f"role = {net.role or '-'}\n")
    buf.write(f"layer_dims = {' '.join(str(d) for d in net.layer_dims)}\n")
    buf.write(f"head = {net.head}\n")
    if net.head == "clamp":
        buf.write(f"head_lb = {_format_floats(net.head_box.lb)}\n")
        buf.write(f"head_ub = {_format_floats(net.head_box.ub)}\n")
    buf.write(f"seed = {net.seed if net.seed is not None else '-'}\n")
    buf.write(f"config_hash = {config_hash or '-'}\n")
    for j, (W, b) in enumerate(zip(net.weights, net.biases)):
        buf.write(f"W{j} = {_format_floats(W)}\n")
        buf.write(f"b{j} = {_format_floats(b)}\n")
    with open(path, "w") as f:
        f.write(buf.getvalue())


def checkpoint_config_hash(path) -> str:
    with open(path) as f:
        for line in f:
            if line.startswith("config_hash"):
                return line.split("=", 1)[1].strip()
    return "-"


def load_mlp(path, expect_role: str | None = None) -> Mlp:
    fields: dict[str, str] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: malformed line (no '=')")
            key, val = line.split("=", 1)
            fields[key.strip()] = val.strip()
    if fields.get("format") != "simrel-mlp-v1":
        raise ValueError(f"{path}: not a simrel checkpoint (format header missing)")
    dims = tuple(int(d) for d in fields["layer_dims"].split())
    head = fields["head"]
    role = fields.get("role", "-")
    role = None if role == "-" else role
    if expect_role is not None and role != expect_role:
        raise ValueError(
            f"{path}: checkpoint role is {role!r}, expected {expect_role!r} (head mismatch)"
        )
    head_box = None
    if head == "clamp":
        lb = np.array([float(v) for v in fields["head_lb"].split()])
        ub = np.array([float(v) for v in fields["head_ub"].split()])
        head_box = Box(lb, ub)
    seed = fields.get("seed", "-")
    seed = None if seed == "-" else int(seed)

    Ws, bs = [], []
    for j in range(len(dims) - 1):
        shape = (dims[j + 1], dims[j])
        for key, target_shape, sink in ((f"W{j}", shape, Ws), (f"b{j}", (dims[j + 1],), bs)):
            if key not in fields:
                raise ValueError(f"{path}: missing block {key}")
            vals = np.array([float(v) for v in fields[key].split()])
            expected = int(np.prod(target_shape))
            if vals.size != expected:
                raise ValueError(
                    f"{path}: block {key} truncated: expected {expected} values "
                    f"({expected * 8} bytes as float64), found {vals.size}"
                )
            sink.append(vals.reshape(target_shape))
    return Mlp(dims, Ws, bs, head=head, head_box=head_box, role=role, seed=seed)
