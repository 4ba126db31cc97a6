"""Dataset labeling, the classifier/interface losses, and the alternating
training loop that searches for a certifiable (V, K) pair.

Labeling rule: a state pair is *positive* when the next-step output error is
below eps - gamma - label_band for every grid input, *negative* when it is at
or above eps - gamma for some grid input.  With label_band = 0 the two classes
are exhaustive (the literal rule); a positive band leaves a buffer of
unconstrained pairs between the classes, which is what makes the classifier
conditions attainable under the Lipschitz caps of the validity conditions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .cover import JointDataset
from .nets import (Gradients, Mlp, TrainState, backward, forward,
                   forward_cached, init_mlp, lipschitz_upper_bound,
                   optimizer_step, project_lipschitz)
from .systems import SystemDef

CE_CLIP = 1e-7


@dataclass
class TrainConfig:
    eps: float                      # output closeness of the relation
    eta: float                      # robustness margin on V
    gamma: float                    # output-error margin
    e: float                        # state discretization
    e_hat: float                    # input discretization
    N: int = 500                    # iterations per phase before alternating
    max_iters: int = 2000
    lr_v: float = 5e-3
    lr_k: float = 5e-3
    batch_size: int = 256
    seed: int = 0
    cond10_mode: str = "relaxed"    # "strict" checks the inequality as written
    label_band: float = 0.0         # dead band subtracted from the positive threshold
    k_loss: str = "paper"           # "paper" = mean absolute error as printed; "squared"
    v_hidden: tuple[int, ...] = (20,) * 5
    k_hidden: tuple[int, ...] = (200,) * 5
    k_init: str = "random"          # "random" | "passthrough" | "zero"
    init_scale: float = 1.0
    lip_cap_v: float | None = None  # optimizer-side projection caps
    lip_cap_k: float | None = None
    fd_delta: float = 1e-4          # central-difference step on the control input
    workers: int = 1
    chunk: int = 65536

    def __post_init__(self):
        if self.eta <= 0 or self.gamma <= 0:
            raise ValueError("eta and gamma must be positive")
        if self.eps < self.gamma:
            raise ValueError("eps must be at least gamma")
        if self.e <= 0 or self.e_hat <= 0:
            raise ValueError("discretization parameters must be positive")
        if self.N < 1:
            raise ValueError("N must be at least 1")
        if self.cond10_mode not in ("strict", "relaxed"):
            raise ValueError("cond10_mode must be 'strict' or 'relaxed'")
        if self.k_loss not in ("paper", "squared"):
            raise ValueError("k_loss must be 'paper' or 'squared'")
        if self.label_band < 0:
            raise ValueError("label_band must be nonnegative")


@dataclass
class DatasetLabels:
    """Per-pair classes (+1 positive, -1 negative, 0 in the dead band), the
    cached source-side successors, and the initial-grid pairs currently
    violating the initial-state condition."""

    classes: np.ndarray              # int8, len(T_d)
    err_max: np.ndarray              # worst next-output error per pair
    uniq_xhat: np.ndarray            # unique source-cover indices in T_d
    inv_xhat: np.ndarray             # row -> index into uniq_xhat
    fhat_succ: np.ndarray            # (n_uniq, n_u, n_hat) source successors
    yhat_succ: np.ndarray            # (n_uniq, n_u, l) successor outputs
    x_nsi: np.ndarray                # (k, n + n_hat) initial pairs violating (7)

    @property
    def n_positive(self) -> int:
        return int(np.sum(self.classes == 1))

    @property
    def n_negative(self) -> int:
        return int(np.sum(self.classes == -1))

    @property
    def n_undecided(self) -> int:
        return int(np.sum(self.classes == 0))


@dataclass
class LossBreakdown:
    l1: float = 0.0
    l2: float = 0.0
    l3: float = 0.0
    l4: float = 0.0
    l_k: float = 0.0
    n1: int = 0
    n2: int = 0
    n3: int = 0
    n4: int = 0
    n_k: int = 0

    @property
    def total_v(self) -> float:
        return self.l1 + self.l2 + self.l3 + self.l4


def _k_input(x: np.ndarray, xhat: np.ndarray, uhat_row: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    return np.hstack([x, xhat, np.broadcast_to(uhat_row, (n, uhat_row.size))])


def _v_input(x: np.ndarray, xhat: np.ndarray) -> np.ndarray:
    return np.hstack([x, xhat])


def source_successor_cache(ds: JointDataset):
    """f_hat and h_hat(f_hat) for every unique source center and grid input."""
    uniq, inv = np.unique(ds.pair_xhat, return_inverse=True)
    xh = ds.xhat_cover.centers_array(uniq)
    uh = ds.u_hat_grid()
    n_u = uh.shape[0]
    fhat = np.empty((uniq.size, n_u, ds.source.n))
    yhat = np.empty((uniq.size, n_u, ds.source.l))
    for j in range(n_u):
        fj = ds.source.step(xh, np.broadcast_to(uh[j], (uniq.size, uh.shape[1])))
        fhat[:, j, :] = fj
        yhat[:, j, :] = ds.source.output(fj)
    return uniq, inv, fhat, yhat


def pair_error_max(ds: JointDataset, K: Mlp, cache=None,
                   chunk: int = 65536) -> tuple[np.ndarray, tuple]:
    """Worst next-step output error over the input grid, for every T_d pair."""
    if cache is None:
        cache = source_successor_cache(ds)
    uniq, inv, fhat, yhat = cache
    uh = ds.u_hat_grid()
    n = len(ds)
    err = np.zeros(n)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        x, xh = ds.pairs(np.arange(lo, hi))
        rows = inv[lo:hi]
        emax = np.zeros(hi - lo)
        for j in range(uh.shape[0]):
            u = forward(K, _k_input(x, xh, uh[j]))
            yp = ds.target.output(ds.target.step(x, u))
            ej = np.max(np.abs(yp - yhat[rows, j, :]), axis=1)
            np.maximum(emax, ej, out=emax)
        err[lo:hi] = emax
    return err, cache


def init_pair_max(ds: JointDataset, V: Mlp, chunk: int = 262144):
    """For every x_hat_0 in the initial grid: max and argmax of V over X0_d.

    Candidates are restricted to output-close pairs (the relation's own
    membership test), since the transfer guarantee starts from pairs inside
    the relation, not merely pairs where V is large.  Rows without any
    output-close candidate report -inf.
    """
    x0 = ds.x0_cover.centers_array()
    xh0 = ds.xhat0_cover.centers_array()
    y0 = ds.target.output(x0)
    yh0 = ds.source.output(xh0)
    n0, nh = x0.shape[0], xh0.shape[0]
    vmax = np.empty(nh)
    argmax = np.empty(nh, dtype=np.int64)
    rows_per = max(1, chunk // max(n0, 1))
    for lo in range(0, nh, rows_per):
        hi = min(lo + rows_per, nh)
        block = hi - lo
        xx = np.repeat(x0[None, :, :], block, axis=0).reshape(block * n0, -1)
        hh = np.repeat(xh0[lo:hi], n0, axis=0)
        v = forward(V, _v_input(xx, hh)).reshape(block, n0)
        gap = np.max(np.abs(y0[None, :, :] - yh0[lo:hi, None, :]), axis=2)
        v = np.where(gap <= ds.eps, v, -np.inf)
        vmax[lo:hi] = v.max(axis=1)
        argmax[lo:hi] = v.argmax(axis=1)
    return vmax, argmax, x0, xh0


def label_dataset(ds: JointDataset, target: SystemDef, source: SystemDef,
                  K: Mlp, cfg: TrainConfig, V: Mlp | None = None,
                  cache=None) -> DatasetLabels:
    """Classify every T_d pair against the next-output error thresholds.

    Positive: error < eps - gamma - label_band for all grid inputs.
    Negative: error >= eps - gamma for some grid input.
    The source-side successors are computed once and cached; target-side terms
    are recomputed because they depend on K.  If V is given, the initial-grid
    pairs violating the initial-state condition are collected (the argmax pair
    per uncovered x_hat_0).
    """
    if cfg.eps - cfg.gamma <= 0:
        raise ValueError("eps - gamma must be positive for labeling")
    err, cache = pair_error_max(ds, K, cache, chunk=cfg.chunk)
    uniq, inv, fhat, yhat = cache
    classes = np.zeros(len(ds), dtype=np.int8)
    classes[err >= cfg.eps - cfg.gamma] = -1
    classes[err < cfg.eps - cfg.gamma - cfg.label_band] = 1

    if V is not None:
        vmax, argmax, x0, xh0 = init_pair_max(ds, V)
        # rows with no output-close candidate are structural holes the
        # classifier cannot repair; the certifier reports them instead
        bad = (vmax < 0.5 + cfg.eta) & np.isfinite(vmax)
        x_nsi = np.hstack([x0[argmax[bad]], xh0[bad]]) if np.any(bad) \
            else np.empty((0, target.n + source.n))
    else:
        x_nsi = np.empty((0, target.n + source.n))
    return DatasetLabels(classes=classes, err_max=err, uniq_xhat=uniq,
                         inv_xhat=inv, fhat_succ=fhat, yhat_succ=yhat,
                         x_nsi=x_nsi)


def _ce_values(p: np.ndarray, y: float) -> np.ndarray:
    pc = np.clip(p, CE_CLIP, 1.0 - CE_CLIP)
    return -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))


def _accumulate(total: Gradients, part: Gradients) -> None:
    for a, b in zip(total.dW, part.dW):
        a += b
    for a, b in zip(total.db, part.db):
        a += b


def loss_V(ds: JointDataset, labels: DatasetLabels, V: Mlp, K: Mlp,
           target: SystemDef, source: SystemDef, cfg: TrainConfig,
           idx: np.ndarray) -> tuple[LossBreakdown, Gradients]:
    """Classifier loss l1 + l2 + l3 + l4 on the T_d rows `idx` plus the full
    initial-violation set; exact gradients for V only (K frozen)."""
    out = LossBreakdown()
    grads = Gradients([np.zeros_like(W) for W in V.weights],
                      [np.zeros_like(b) for b in V.biases],
                      np.zeros((1, V.n_inputs)))

    x, xh = ds.pairs(idx)
    cls = labels.classes[idx]
    cache = forward_cached(V, _v_input(x, xh))
    p = cache.out[:, 0]

    pos = cls == 1
    neg = cls == -1
    out.l2 = float(np.sum(_ce_values(p[pos], 1.0)))
    out.l4 = float(np.sum(_ce_values(p[neg], 0.0)))
    out.n2 = int(np.sum(pos))
    out.n4 = int(np.sum(neg))
    # d(CE)/dz for a sigmoid head is (p - y); zero rows for the dead band
    gz = np.zeros_like(p)
    gz[pos] = p[pos] - 1.0
    gz[neg] = p[neg]
    _accumulate(grads, _backward_logits(V, cache, gz[:, None]))

    if labels.x_nsi.shape[0]:
        c1 = forward_cached(V, labels.x_nsi)
        p1 = c1.out[:, 0]
        out.l1 = float(np.sum(_ce_values(p1, 1.0)))
        out.n1 = labels.x_nsi.shape[0]
        _accumulate(grads, _backward_logits(V, c1, (p1 - 1.0)[:, None]))

    gate = p >= 0.5 + cfg.eta
    if np.any(gate):
        xg, xhg = x[gate], xh[gate]
        rows = labels.inv_xhat[idx][gate]
        uh = ds.u_hat_grid()
        for j in range(uh.shape[0]):
            u = forward(K, _k_input(xg, xhg, uh[j]))
            xp = target.step(xg, u)
            fh = labels.fhat_succ[rows, j, :]
            c3 = forward_cached(V, _v_input(xp, fh))
            p3 = c3.out[:, 0]
            out.l3 += float(np.sum(_ce_values(p3, 1.0)))
            out.n3 += p3.size
            _accumulate(grads, _backward_logits(V, c3, (p3 - 1.0)[:, None]))
    return out, grads


def _backward_logits(net: Mlp, cache, gz: np.ndarray) -> Gradients:
    """Backward pass with the upstream gradient given at the final
    preactivation (the sigmoid head is already folded into gz)."""
    linear_view = Mlp(net.layer_dims, net.weights, net.biases, head="linear",
                      head_box=None, role=net.role, seed=net.seed)
    return backward(linear_view, cache, gz)


def loss_K(ds: JointDataset, labels: DatasetLabels, V: Mlp, K: Mlp,
           target: SystemDef, source: SystemDef, cfg: TrainConfig,
           idx: np.ndarray) -> tuple[LossBreakdown, Gradients]:
    """Interface loss over pairs the classifier currently accepts.

    The per-sample discrepancy is the formula as printed (a mean absolute
    error over output components), or squared error with k_loss="squared".
    Gradients reach K through the black-box target dynamics by central finite
    differences on the control input, chained into K's exact backprop.
    """
    out = LossBreakdown()
    grads = Gradients([np.zeros_like(W) for W in K.weights],
                      [np.zeros_like(b) for b in K.biases],
                      np.zeros((1, K.n_inputs)))
    x, xh = ds.pairs(idx)
    v = forward(V, _v_input(x, xh))[:, 0]
    gate = v >= 0.5 + cfg.eta
    if not np.any(gate):
        return out, grads
    xg, xhg = x[gate], xh[gate]
    rows = labels.inv_xhat[idx][gate]
    uh = ds.u_hat_grid()
    l_dim = target.l
    delta = cfg.fd_delta

    def sample_losses(u_eval, yh):
        yp = target.output(target.step(xg, u_eval))
        diff = yp - yh
        if cfg.k_loss == "paper":
            return np.mean(np.abs(diff), axis=1)
        return np.mean(diff**2, axis=1)

    for j in range(uh.shape[0]):
        kin = _k_input(xg, xhg, uh[j])
        cache = forward_cached(K, kin)
        u = cache.out
        yh = labels.yhat_succ[rows, j, :]
        base = sample_losses(u, yh)
        out.l_k += float(np.sum(base))
        out.n_k += base.size
        upstream = np.empty_like(u)
        for c in range(target.m):
            up = u.copy()
            up[:, c] += delta
            dn = u.copy()
            dn[:, c] -= delta
            upstream[:, c] = (sample_losses(up, yh) - sample_losses(dn, yh)) / (2 * delta)
        _accumulate(grads, backward(K, cache, upstream))
    return out, grads


@dataclass
class TrainResult:
    V: Mlp
    K: Mlp
    report: "object"                 # CertReport from the certifier
    history: list
    converged: bool
    iterations: int
    labels: DatasetLabels


def _make_nets(target: SystemDef, source: SystemDef, cfg: TrainConfig) -> tuple[Mlp, Mlp]:
    v_dims = (target.n + source.n, *cfg.v_hidden, 1)
    V = init_mlp(v_dims, head="sigmoid", seed=cfg.seed * 7919 + 1, role="V",
                 scale=cfg.init_scale)
    k_in = target.n + source.n + source.m
    if cfg.k_init == "random":
        K = init_mlp((k_in, *cfg.k_hidden, target.m), head="clamp",
                     head_box=target.U, seed=cfg.seed * 7919 + 2, role="K",
                     scale=cfg.init_scale)
    else:
        # single affine layer: passthrough picks the source input, zero is all-zero
        W = np.zeros((target.m, k_in))
        if cfg.k_init == "passthrough":
            if target.m != source.m:
                raise ValueError("passthrough init needs matching input dims")
            for c in range(target.m):
                W[c, target.n + source.n + c] = 1.0
        elif cfg.k_init != "zero":
            raise ValueError(f"unknown k_init {cfg.k_init!r}")
        K = Mlp((k_in, target.m), [W], [np.zeros(target.m)], head="clamp",
                head_box=target.U, role="K", seed=cfg.seed * 7919 + 2)
    if cfg.lip_cap_v is not None:
        project_lipschitz(V, cfg.lip_cap_v)
    if cfg.lip_cap_k is not None:
        project_lipschitz(K, cfg.lip_cap_k)
    return V, K


class _BatchStream:
    """Uniform-without-replacement mini-batch indices, reshuffled per epoch."""

    def __init__(self, n: int, batch: int, seed: int):
        self.n = n
        self.batch = min(batch, n)
        self.rng = np.random.default_rng(seed)
        self.perm = self.rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.batch > self.n:
            self.perm = self.rng.permutation(self.n)
            self.pos = 0
        out = self.perm[self.pos:self.pos + self.batch]
        self.pos += self.batch
        return out


def algorithm1(target: SystemDef, source: SystemDef, ds: JointDataset,
               cfg: TrainConfig, log=None) -> TrainResult:
    """Alternating training of K and V until the certifier accepts or the
    iteration budget runs out.  The interface phase runs first.

    On a non-finite loss the learning rate is halved and the phase restarts
    from its starting checkpoint, at most 5 times.
    """
    from .certify import full_certificate  # local import to avoid a cycle

    V, K = _make_nets(target, source, cfg)
    st_v = TrainState.for_net(V, cfg.lr_v)
    st_k = TrainState.for_net(K, cfg.lr_k)
    history: list[dict] = []
    emit = log or (lambda rec: None)

    cache = None
    labels = label_dataset(ds, target, source, K, cfg, V=V, cache=cache)
    cache = (labels.uniq_xhat, labels.inv_xhat, labels.fhat_succ, labels.yhat_succ)
    report = full_certificate(ds, labels, V, K, target, source, cfg)
    best = (report.violation_total(), V.copy(), K.copy(), report, labels)
    if report.verdict:
        return TrainResult(V, K, report, history, True, 0, labels)

    stream = _BatchStream(len(ds), cfg.batch_size, seed=cfg.seed * 7919 + 3)
    i = 0
    train_k = True   # Sign = False start: the interface trains first
    restarts = 0
    while i < cfg.max_iters:
        phase_start = i
        phase_iters = min(cfg.N, cfg.max_iters - i)
        snap = (V.copy(), K.copy())
        try:
            for _ in range(phase_iters):
                idx = stream.next()
                if train_k:
                    lb, gk = loss_K(ds, labels, V, K, target, source, cfg, idx)
                    if lb.n_k:
                        optimizer_step(K, gk, st_k)
                        if cfg.lip_cap_k is not None:
                            project_lipschitz(K, cfg.lip_cap_k)
                else:
                    lb, gv = loss_V(ds, labels, V, K, target, source, cfg, idx)
                    optimizer_step(V, gv, st_v)
                    if cfg.lip_cap_v is not None:
                        project_lipschitz(V, cfg.lip_cap_v)
                i += 1
                rec = {"iter": i, "phase": "K" if train_k else "V",
                       "l1": lb.l1, "l2": lb.l2, "l3": lb.l3, "l4": lb.l4,
                       "l_k": lb.l_k, "L_V": lipschitz_upper_bound(V),
                       "L_K": lipschitz_upper_bound(K)}
                history.append(rec)
                emit(rec)
        except FloatingPointError:
            restarts += 1
            if restarts > 5:
                break
            V, K = snap
            i = phase_start
            st_v = TrainState.for_net(V, st_v.lr * 0.5)
            st_k = TrainState.for_net(K, st_k.lr * 0.5)
            emit({"iter": i, "phase": "restart", "restarts": restarts,
                  "lr_v": st_v.lr, "lr_k": st_k.lr})
            continue

        labels = label_dataset(ds, target, source, K, cfg, V=V, cache=cache)
        report = full_certificate(ds, labels, V, K, target, source, cfg)
        viol = report.violation_total()
        rec = {"iter": i, "phase": "certify", "violations": viol,
               "failing": report.failing_conditions()}
        history.append(rec)
        emit(rec)
        if viol <= best[0]:
            best = (viol, V.copy(), K.copy(), report, labels)
        if report.verdict:
            return TrainResult(V, K, report, history, True, i, labels)
        train_k = not train_k

    _, V_b, K_b, report_b, labels_b = best
    return TrainResult(V_b, K_b, report_b, history, False, i, labels_b)
