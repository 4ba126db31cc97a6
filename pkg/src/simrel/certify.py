"""Certification of a trained (V, K) pair.

Grid conditions: initial-state coverage, classifier margins on the labeled
dataset, and the one-step value condition.  Validity conditions: three
Lipschitz-arithmetic inequalities whose left-hand sides are evaluated with
upward-rounded floating point so the certificate errs conservative.  A report
with every condition passing constitutes the formal transfer guarantee for
the relation {V >= 0.5 and outputs eps-close}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cover import JointDataset
from .nets import Mlp, forward, lipschitz_upper_bound, spectral_product
from .systems import SystemDef
from .training import (DatasetLabels, TrainConfig, _k_input, _v_input,
                       init_pair_max)

COUNTEREXAMPLE_CAP = 100

CONDITION_ORDER = ("init_7", "class_pos_8", "class_neg_9", "step_10",
                   "valid_11", "valid_12", "valid_13")


def _up(x: float) -> float:
    """Round a float up by one ulp (conservative direction for a LHS)."""
    return math.nextafter(x, math.inf)


def add_up(a: float, b: float) -> float:
    return _up(a + b)


def mul_up(a: float, b: float) -> float:
    return _up(a * b)


@dataclass
class ConditionResult:
    name: str
    passed: bool
    margin: float
    violations: int = 0
    total: int = 0
    counterexamples: np.ndarray | None = None
    note: str = ""

    def cap_examples(self):
        if self.counterexamples is not None and len(self.counterexamples) > COUNTEREXAMPLE_CAP:
            self.counterexamples = self.counterexamples[:COUNTEREXAMPLE_CAP]


@dataclass
class CertReport:
    conditions: dict[str, ConditionResult]
    L_V: float
    L_K: float
    L_V_spectral: float
    L_K_spectral: float
    eps: float
    eta: float
    gamma: float
    e: float
    e_hat: float
    cond10_mode: str
    label_band: float
    annotations: dict[str, str] = field(default_factory=dict)

    @property
    def verdict(self) -> bool:
        return all(c.passed for c in self.conditions.values())

    def violation_total(self) -> int:
        return sum(c.violations for c in self.conditions.values()) + sum(
            0 if c.passed else 1 for c in self.conditions.values() if c.violations == 0
        )

    def failing_conditions(self) -> list[str]:
        return [n for n in CONDITION_ORDER if n in self.conditions
                and not self.conditions[n].passed]


def check_init(ds: JointDataset, V: Mlp, cfg: TrainConfig) -> ConditionResult:
    """Every initial source grid point must be matched by some initial target
    grid point with V >= 0.5 + eta."""
    vmax, argmax, x0, xh0 = init_pair_max(ds, V)
    thr = 0.5 + cfg.eta
    bad = vmax < thr
    res = ConditionResult(
        name="init_7",
        passed=not bool(np.any(bad)),
        margin=float(np.min(vmax) - thr),
        violations=int(np.sum(bad)),
        total=int(xh0.shape[0]),
        counterexamples=xh0[bad] if np.any(bad) else None,
    )
    res.cap_examples()
    return res


def check_classification(ds: JointDataset, labels: DatasetLabels, V: Mlp,
                         cfg: TrainConfig, chunk: int = 262144
                         ) -> tuple[ConditionResult, ConditionResult]:
    """Positive pairs need V >= 0.5 + eta (inclusive); negative pairs need
    V < 0.5 - eta (strict)."""
    n = len(ds)
    v = np.empty(n)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        x, xh = ds.pairs(np.arange(lo, hi))
        v[lo:hi] = forward(V, _v_input(x, xh))[:, 0]

    pos = labels.classes == 1
    neg = labels.classes == -1
    thr_hi = 0.5 + cfg.eta
    thr_lo = 0.5 - cfg.eta

    pos_bad = pos & (v < thr_hi)
    pos_margin = float(np.min(v[pos]) - thr_hi) if np.any(pos) else math.inf
    neg_bad = neg & (v >= thr_lo)
    neg_margin = float(thr_lo - np.max(v[neg])) if np.any(neg) else math.inf

    def examples(mask):
        if not np.any(mask):
            return None
        sel = np.nonzero(mask)[0][:COUNTEREXAMPLE_CAP]
        x, xh = ds.pairs(sel)
        return np.hstack([x, xh])

    r_pos = ConditionResult("class_pos_8", not bool(np.any(pos_bad)), pos_margin,
                            int(np.sum(pos_bad)), int(np.sum(pos)), examples(pos_bad))
    r_neg = ConditionResult("class_neg_9", not bool(np.any(neg_bad)), neg_margin,
                            int(np.sum(neg_bad)), int(np.sum(neg)), examples(neg_bad))
    return r_pos, r_neg


def _validity_terms(target: SystemDef, source: SystemDef, L_V: float,
                    L_K: float, cfg: TrainConfig) -> dict[str, float]:
    he, hh = cfg.e / 2.0, cfg.e_hat / 2.0
    lhs11 = add_up(
        mul_up(target.L_h, add_up(mul_up(target.L_x, he),
                                  mul_up(mul_up(target.L_u, L_K), max(he, hh)))),
        mul_up(source.L_h, add_up(mul_up(source.L_x, he),
                                  mul_up(source.L_u, hh))),
    )
    lhs12 = mul_up(L_V, add_up(mul_up(max(target.L_x, source.L_x), he),
                               max(mul_up(mul_up(target.L_u, L_K), he),
                                   mul_up(source.L_u, hh))))
    lhs13 = mul_up(L_V, he)
    # as-printed (12) feeds K only the state perturbation; the variant with
    # max(e/2, e_hat/2) is reported alongside for reference
    lhs12_alt = mul_up(L_V, add_up(mul_up(max(target.L_x, source.L_x), he),
                                   max(mul_up(mul_up(target.L_u, L_K), max(he, hh)),
                                       mul_up(source.L_u, hh))))
    return {"lhs11": lhs11, "lhs12": lhs12, "lhs13": lhs13, "lhs12_alt": lhs12_alt}


def check_validity(target: SystemDef, source: SystemDef, L_V: float, L_K: float,
                   cfg: TrainConfig) -> tuple[ConditionResult, ConditionResult, ConditionResult, dict]:
    """The three Lipschitz validity inequalities, upward-rounded LHS."""
    for val, who in ((L_V, "L_V"), (L_K, "L_K")):
        if val < 0:
            raise ValueError(f"{who} must be nonnegative")
    t = _validity_terms(target, source, L_V, L_K, cfg)
    r11 = ConditionResult("valid_11", t["lhs11"] <= cfg.gamma, cfg.gamma - t["lhs11"],
                          note=f"lhs={t['lhs11']!r} rhs={cfg.gamma!r}")
    r12 = ConditionResult("valid_12", t["lhs12"] <= 2 * cfg.eta, 2 * cfg.eta - t["lhs12"],
                          note=f"lhs={t['lhs12']!r} rhs={2 * cfg.eta!r} "
                               f"alt_lhs_with_input_grid={t['lhs12_alt']!r}")
    r13 = ConditionResult("valid_13", t["lhs13"] <= cfg.eta, cfg.eta - t["lhs13"],
                          note=f"lhs={t['lhs13']!r} rhs={cfg.eta!r}")
    for r in (r11, r12, r13):
        r.violations = 0 if r.passed else 1
        r.total = 1
    return r11, r12, r13, t


def check_step(ds: JointDataset, labels: DatasetLabels, V: Mlp, K: Mlp,
               target: SystemDef, source: SystemDef, cfg: TrainConfig,
               chunk: int = 65536) -> ConditionResult:
    """One-step value condition over pairs the classifier accepts.

    strict: V(successor) >= V(pair) + eta, the inequality as written.
    relaxed: V(successor) >= 0.5 + 2*eta, the level the transfer proof needs;
    with a positive label band the threshold additionally absorbs the actual
    grid-transport losses so the certificate stays sound without the grid
    dichotomy.
    """
    n = len(ds)
    uh = ds.u_hat_grid()
    thr_gate = 0.5 + cfg.eta
    if cfg.cond10_mode == "strict":
        thr_note = "strict: V(succ) >= V + eta"
    else:
        if cfg.label_band > 0:
            t = _validity_terms(target, source, lipschitz_upper_bound(V),
                                lipschitz_upper_bound(K), cfg)
            thr = 0.5 + cfg.eta + t["lhs12"] + t["lhs13"]
            thr_note = f"relaxed+band: V(succ) >= {thr!r}"
        else:
            thr = 0.5 + 2 * cfg.eta
            thr_note = f"relaxed: V(succ) >= {thr!r}"

    worst = math.inf
    violations = 0
    total = 0
    examples = []
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        sel = np.arange(lo, hi)
        x, xh = ds.pairs(sel)
        v = forward(V, _v_input(x, xh))[:, 0]
        gate = v >= thr_gate
        if not np.any(gate):
            continue
        xg, xhg, vg = x[gate], xh[gate], v[gate]
        rows = labels.inv_xhat[sel][gate]
        for j in range(uh.shape[0]):
            u = forward(K, _k_input(xg, xhg, uh[j]))
            xp = target.step(xg, u)
            fh = labels.fhat_succ[rows, j, :]
            v_succ = forward(V, _v_input(xp, fh))[:, 0]
            if cfg.cond10_mode == "strict":
                margin = v_succ - (vg + cfg.eta)
            else:
                margin = v_succ - thr
            total += margin.size
            bad = margin < 0
            violations += int(np.sum(bad))
            worst = min(worst, float(np.min(margin)))
            if np.any(bad) and len(examples) < COUNTEREXAMPLE_CAP:
                idx_bad = np.nonzero(bad)[0][:COUNTEREXAMPLE_CAP - len(examples)]
                examples.extend(
                    np.hstack([xg[idx_bad], xhg[idx_bad],
                               np.broadcast_to(uh[j], (idx_bad.size, uh.shape[1]))])
                )
    if total == 0:
        return ConditionResult("step_10", True, math.inf, 0, 0,
                               note=thr_note + " (vacuous: no accepted pair)")
    return ConditionResult("step_10", violations == 0, worst, violations, total,
                           np.array(examples) if examples else None, note=thr_note)


@dataclass
class PrecheckReport:
    """Advisory feasibility bounds derived by inverting the validity
    inequalities before any training."""

    e_max_13: float            # largest e satisfying (13) for the assumed L_V cap
    gamma_floor_11: float      # LHS of (11) at the given caps: minimal feasible gamma
    L_V_max_12: float          # largest L_V satisfying (12) at the configured grids
    feasible: bool
    notes: list[str] = field(default_factory=list)


def precheck(target: SystemDef, source: SystemDef, cfg: TrainConfig,
             L_V_max: float, L_K_max: float) -> PrecheckReport:
    notes = []
    if cfg.eta <= 0 or L_V_max <= 0:
        return PrecheckReport(0.0, math.inf, 0.0, False,
                              ["eta and L_V_max must be positive for any feasible grid"])
    e_max = 2.0 * cfg.eta / L_V_max
    t = _validity_terms(target, source, L_V_max, L_K_max, cfg)
    gamma_floor = t["lhs11"]
    he = cfg.e / 2.0
    hh = cfg.e_hat / 2.0
    denom = max(target.L_x, source.L_x) * he + max(target.L_u * L_K_max * he,
                                                   source.L_u * hh)
    lv12 = (2.0 * cfg.eta / denom) if denom > 0 else math.inf
    feasible = cfg.e <= e_max and cfg.gamma >= gamma_floor
    if cfg.e > e_max:
        notes.append(f"e={cfg.e} exceeds the (13) bound {e_max:.6g} for L_V<={L_V_max}")
    if cfg.gamma < gamma_floor:
        notes.append(f"gamma={cfg.gamma} is below the (11) floor {gamma_floor:.6g}")
    if L_K_max == 0:
        notes.append("L_K_max=0: (11) reduces to terms independent of the interface")
    return PrecheckReport(e_max, gamma_floor, lv12, feasible, notes)


def full_certificate(ds: JointDataset, labels: DatasetLabels, V: Mlp, K: Mlp,
                     target: SystemDef, source: SystemDef,
                     cfg: TrainConfig) -> CertReport:
    """Run every grid and validity check; the verdict passes only if all do."""
    L_V = lipschitz_upper_bound(V)
    L_K = lipschitz_upper_bound(K)
    r_init = check_init(ds, V, cfg)
    r_pos, r_neg = check_classification(ds, labels, V, cfg)
    r_step = check_step(ds, labels, V, K, target, source, cfg)
    r11, r12, r13, terms = check_validity(target, source, L_V, L_K, cfg)
    conditions = {c.name: c for c in (r_init, r_pos, r_neg, r_step, r11, r12, r13)}
    annotations = {}
    if cfg.cond10_mode == "relaxed":
        annotations["step_10"] = "proof-level successor threshold used instead of the printed inequality"
    if cfg.label_band > 0:
        annotations["labeling"] = (
            f"dead band {cfg.label_band!r} between the class thresholds; "
            "undecided pairs are not constrained by the classifier conditions"
        )
    return CertReport(
        conditions=conditions, L_V=L_V, L_K=L_K,
        L_V_spectral=spectral_product(V), L_K_spectral=spectral_product(K),
        eps=cfg.eps, eta=cfg.eta, gamma=cfg.gamma, e=cfg.e, e_hat=cfg.e_hat,
        cond10_mode=cfg.cond10_mode, label_band=cfg.label_band,
        annotations=annotations,
    )


# ---------------------------------------------------------------------------
# Serialization: stable key order so certificates can be diffed and archived.
# ---------------------------------------------------------------------------


def report_to_text(report: CertReport, config_hash: str = "") -> str:
    lines = ["format = simrel-cert-v1"]
    lines.append(f"config_hash = {config_hash or '-'}")
    lines.append(f"verdict = {'pass' if report.verdict else 'fail'}")
    for key in ("eps", "eta", "gamma", "e", "e_hat"):
        lines.append(f"{key} = {getattr(report, key)!r}")
    lines.append(f"cond10_mode = {report.cond10_mode}")
    lines.append(f"label_band = {report.label_band!r}")
    lines.append(f"L_V = {report.L_V!r}")
    lines.append(f"L_K = {report.L_K!r}")
    lines.append(f"L_V_spectral = {report.L_V_spectral!r}")
    lines.append(f"L_K_spectral = {report.L_K_spectral!r}")
    for name in CONDITION_ORDER:
        if name not in report.conditions:
            continue
        c = report.conditions[name]
        lines.append(f"[{name}]")
        lines.append(f"passed = {c.passed}")
        lines.append(f"margin = {c.margin!r}")
        lines.append(f"violations = {c.violations}")
        lines.append(f"total = {c.total}")
        if c.note:
            lines.append(f"note = {c.note}")
        if c.counterexamples is not None:
            for row in np.atleast_2d(c.counterexamples)[:COUNTEREXAMPLE_CAP]:
                lines.append("cx = " + " ".join(repr(float(v)) for v in row))
    for key in sorted(report.annotations):
        lines.append(f"annotation.{key} = {report.annotations[key]}")
    return "\n".join(lines) + "\n"


def report_from_text(text: str) -> CertReport:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "format = simrel-cert-v1":
        raise ValueError("not a simrel certificate")
    header: dict[str, str] = {}
    conditions: dict[str, ConditionResult] = {}
    annotations: dict[str, str] = {}
    current: ConditionResult | None = None
    cx_rows: list[list[float]] = []

    def flush():
        nonlocal current, cx_rows
        if current is not None:
            if cx_rows:
                current.counterexamples = np.array(cx_rows)
            conditions[current.name] = current
        current, cx_rows = None, []

    for ln in lines[1:]:
        if ln.startswith("[") and ln.endswith("]"):
            flush()
            current = ConditionResult(name=ln[1:-1], passed=False, margin=math.nan)
            continue
        key, _, val = ln.partition(" = ")
        if key.startswith("annotation."):
            annotations[key[len("annotation."):]] = val
            continue
        if current is None:
            header[key] = val
            continue
        if key == "passed":
            current.passed = val == "True"
        elif key == "margin":
            current.margin = float(val)
        elif key == "violations":
            current.violations = int(val)
        elif key == "total":
            current.total = int(val)
        elif key == "note":
            current.note = val
        elif key == "cx":
            cx_rows.append([float(v) for v in val.split()])
    flush()
    return CertReport(
        conditions=conditions,
        L_V=float(header["L_V"]), L_K=float(header["L_K"]),
        L_V_spectral=float(header["L_V_spectral"]),
        L_K_spectral=float(header["L_K_spectral"]),
        eps=float(header["eps"]), eta=float(header["eta"]),
        gamma=float(header["gamma"]), e=float(header["e"]),
        e_hat=float(header["e_hat"]), cond10_mode=header["cond10_mode"],
        label_band=float(header["label_band"]), annotations=annotations,
    )
