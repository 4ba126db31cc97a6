"""Command-line pipeline: grid generation, training, certification, transfer
simulation, and Lipschitz sanity checks, driven by a config file.

Exit codes: 0 success, 1 certification or assertion failure, 2 usage/config
error.  Numeric results go to files under --out; the console shows progress
and the verdict.  Timestamps appear only in the sidecar run.log so re-runs
are byte-identical.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .certify import full_certificate, precheck, report_to_text
from .configio import RunConfig, load_run_config
from .cover import build_joint_dataset, joint_pair_counts
from .nets import checkpoint_config_hash, load_mlp, save_mlp
from .systems import (BUILTIN_SYSTEMS, builtin_controller, builtin_system,
                      sample_lipschitz_check)
from .training import algorithm1, label_dataset
from .transfer import (MatchError, match_initial, monte_carlo_soundness,
                       run_transfer, trace_to_csv)

USAGE_ERROR = 2
CHECK_FAILED = 1


class _Sidecar:
    def __init__(self, out: Path | None):
        self.fh = open(out / "run.log", "a") if out else None

    def log(self, msg: str):
        line = f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {msg}"
        if self.fh:
            self.fh.write(line + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def _prepare_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config(args) -> RunConfig:
    rc = load_run_config(args.config)
    train = rc.train
    if getattr(args, "seed", None) is not None:
        train = replace(train, seed=args.seed)
    if getattr(args, "mode", None):
        train = replace(train, cond10_mode=args.mode)
    if getattr(args, "workers", None):
        train = replace(train, workers=args.workers)
    return replace(rc, train=train)


def _echo_config(rc: RunConfig, out: Path):
    (out / "config.echo").write_text(rc.raw_text)


def cmd_info(args) -> int:
    sys_def = builtin_system(args.system)
    print(f"system {sys_def.name}")
    print(f"  dims: n={sys_def.n} m={sys_def.m} l={sys_def.l}")
    print(f"  tau: {sys_def.tau}")
    print(f"  X:  {sys_def.X}")
    print(f"  X0: {sys_def.X0}")
    print(f"  U:  {sys_def.U}")
    print(f"  Y:  {sys_def.Y}")
    print(f"  L_x={sys_def.L_x} L_u={sys_def.L_u} L_h={sys_def.L_h}")
    return 0


def cmd_lipcheck(args) -> int:
    sys_def = builtin_system(args.system)
    rep = sample_lipschitz_check(sys_def, pairs=args.pairs, seed=args.seed or 0)
    print(f"lipcheck {sys_def.name}: pairs={rep.pairs} "
          f"max_ratio_f={rep.max_ratio_f:.6f} max_ratio_h={rep.max_ratio_h:.6f} "
          f"violations={rep.violations}")
    return 0 if rep.violations == 0 else CHECK_FAILED


def cmd_gen_grid(args) -> int:
    rc = _load_config(args)
    out = _prepare_out(args)
    side = _Sidecar(out)
    side.log(f"gen-grid config={args.config}")
    t = rc.train
    mx, mh, mprod = joint_pair_counts(rc.target, rc.source, t.e)
    ds = build_joint_dataset(rc.target, rc.source, t.eps, t.e, t.e_hat, chunk=t.chunk)
    lines = [
        "format = simrel-grid-v1",
        f"config_hash = {rc.config_hash}",
        f"target = {rc.target.name}",
        f"source = {rc.source.name}",
        f"eps = {t.eps!r}",
        f"e = {t.e!r}",
        f"e_hat = {t.e_hat!r}",
        f"M_x = {mx}",
        f"M_xhat = {mh}",
        f"M_product = {mprod}",
        f"T_d = {len(ds)}",
        f"filter_pass_rate = {len(ds) / mprod!r}",
        f"U_hat_d = {ds.u_hat_cover.M}",
        f"X0_d = {ds.x0_cover.M}",
        f"Xhat0_d = {ds.xhat0_cover.M}",
    ]
    (out / "grid.txt").write_text("\n".join(lines) + "\n")
    _echo_config(rc, out)
    print(f"grid: |T_d| = {len(ds)} of {mprod} product cells "
          f"(pass rate {len(ds) / mprod:.3g}); wrote {out / 'grid.txt'}")
    side.close()
    return 0


def cmd_train(args) -> int:
    rc = _load_config(args)
    out = _prepare_out(args)
    side = _Sidecar(out)
    side.log(f"train config={args.config}")
    t = rc.train
    ds = build_joint_dataset(rc.target, rc.source, t.eps, t.e, t.e_hat, chunk=t.chunk)
    print(f"dataset: |T_d| = {len(ds)}, |U_hat_d| = {ds.u_hat_cover.M}")

    hist_fh = open(out / "history.log", "w")

    def emit(rec: dict):
        line = " ".join(f"{k}={rec[k]}" for k in rec)
        hist_fh.write(line + "\n")
        if rec.get("phase") == "certify" or rec.get("iter", 0) % 50 == 0:
            print(line)

    result = algorithm1(rc.target, rc.source, ds, t, log=emit)
    hist_fh.close()

    save_mlp(result.V, out / "V.ckpt", config_hash=rc.config_hash)
    save_mlp(result.K, out / "K.ckpt", config_hash=rc.config_hash)
    (out / "report.txt").write_text(report_to_text(result.report, rc.config_hash))
    _echo_config(rc, out)
    if args.plots:
        from .report_plots import render_history_figure
        render_history_figure(result.history, out / "history.png")
    verdict = "pass" if result.converged else "fail"
    print(f"train: {verdict} after {result.iterations} iterations; "
          f"L_V={result.report.L_V:.4g} L_K={result.report.L_K:.4g}")
    if not result.converged:
        print("failing conditions: " + ", ".join(result.report.failing_conditions()))
    side.log(f"train verdict={verdict}")
    side.close()
    return 0 if result.converged else CHECK_FAILED


def _load_pair(rc: RunConfig, out: Path):
    v_path, k_path = out / "V.ckpt", out / "K.ckpt"
    for p in (v_path, k_path):
        if not p.exists():
            raise FileNotFoundError(f"missing checkpoint {p}")
        h = checkpoint_config_hash(p)
        if h not in ("-", rc.config_hash):
            raise ValueError(
                f"checkpoint {p.name} was produced under config hash {h}, "
                f"not {rc.config_hash} (tampered or mismatched pair)"
            )
    return load_mlp(v_path, expect_role="V"), load_mlp(k_path, expect_role="K")


def cmd_certify(args) -> int:
    rc = _load_config(args)
    out = _prepare_out(args)
    side = _Sidecar(out)
    side.log(f"certify config={args.config}")
    t = rc.train
    try:
        V, K = _load_pair(rc, out)
    except ValueError as exc:
        print(f"certify: fail ({exc})")
        side.close()
        return CHECK_FAILED
    ds = build_joint_dataset(rc.target, rc.source, t.eps, t.e, t.e_hat, chunk=t.chunk)
    labels = label_dataset(ds, rc.target, rc.source, K, t, V=V)
    report = full_certificate(ds, labels, V, K, rc.target, rc.source, t)
    report_path = Path(args.report) if args.report else out / "report.txt"
    report_path.write_text(report_to_text(report, rc.config_hash))
    _echo_config(rc, out)
    print(f"certify: {'pass' if report.verdict else 'fail'} "
          f"(L_V={report.L_V:.4g}, L_K={report.L_K:.4g})")
    if not report.verdict:
        print("failing conditions: " + ", ".join(report.failing_conditions()))
    side.log(f"certify verdict={report.verdict}")
    side.close()
    return 0 if report.verdict else CHECK_FAILED


def cmd_transfer(args) -> int:
    rc = _load_config(args)
    out = _prepare_out(args)
    side = _Sidecar(out)
    side.log(f"transfer config={args.config}")
    t = rc.train
    V, K = _load_pair(rc, out)
    ds = build_joint_dataset(rc.target, rc.source, t.eps, t.e, t.e_hat, chunk=t.chunk)
    horizon = args.horizon or rc.horizon
    _echo_config(rc, out)

    if args.trials:
        mc = monte_carlo_soundness(rc.target, rc.source, K, V, ds,
                                   trials=args.trials, T=horizon, eps=t.eps,
                                   seed=t.seed)
        (out / "mc.txt").write_text(
            "format = simrel-mc-v1\n"
            f"config_hash = {rc.config_hash}\n"
            f"trials = {mc.trials}\nviolations = {mc.violations}\n"
            f"max_err = {mc.max_err!r}\nworst_trial = {mc.worst_trial}\n"
        )
        if args.plots:
            from .report_plots import render_mc_figure
            render_mc_figure(mc, t.eps, out / "mc.png")
        print(f"transfer mc: trials={mc.trials} violations={mc.violations} "
              f"max_err={mc.max_err:.6g} (eps={t.eps})")
        side.close()
        return 0 if mc.violations == 0 else CHECK_FAILED

    rng = np.random.default_rng(t.seed)
    xhat0 = rc.source.X0.sample(rng)
    ctrl = builtin_controller(rc.controller, rc.source.U, seed=t.seed)
    try:
        x0, v0 = match_initial(xhat0, ds, V)
    except MatchError as exc:
        print(f"transfer: fail ({exc})")
        side.close()
        return CHECK_FAILED
    trace = run_transfer(rc.target, rc.source, ctrl, K, xhat0, x0, horizon, t.eps)
    trace_to_csv(trace, out / "trace.csv")
    if args.plots:
        from .report_plots import render_trace_figure
        render_trace_figure(trace, t.eps, out / "trace.png")
    print(f"transfer: max_err={trace.max_err:.6g} over {horizon} steps "
          f"(eps={t.eps}, excursions={trace.excursions})")
    side.log(f"transfer max_err={trace.max_err}")
    side.close()
    return 0 if trace.max_err <= t.eps and not trace.truncated else CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="simrel",
        description="Learn, certify and deploy neural simulation relations "
                    "between black-box discrete-time control systems.",
    )
    p.add_argument("--version", action="version", version=f"simrel {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="run config file")
            sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--workers", type=int, default=None,
                        help="worker-count knob for data-parallel sweeps")

    sp = sub.add_parser("info", help="print a builtin system definition")
    sp.add_argument("--system", required=True, choices=BUILTIN_SYSTEMS)
    sp.set_defaults(fn=cmd_info)

    sp = sub.add_parser("lipcheck", help="sampling check of declared Lipschitz constants")
    sp.add_argument("--system", required=True, choices=BUILTIN_SYSTEMS)
    sp.add_argument("--pairs", type=int, default=10000)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_lipcheck)

    sp = sub.add_parser("gen-grid", help="build the joint dataset and write its metadata")
    common(sp)
    sp.set_defaults(fn=cmd_gen_grid)

    sp = sub.add_parser("train", help="run the alternating training loop")
    common(sp)
    sp.add_argument("--mode", choices=("strict", "relaxed"), default=None)
    sp.add_argument("--plots", dest="plots", action="store_true", default=True)
    sp.add_argument("--no-plots", dest="plots", action="store_false")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("certify", help="re-certify checkpoints against a config")
    common(sp)
    sp.add_argument("--mode", choices=("strict", "relaxed"), default=None)
    sp.add_argument("--report", default=None, help="certificate output path")
    sp.set_defaults(fn=cmd_certify)

    sp = sub.add_parser("transfer", help="deploy the interface and record traces")
    common(sp)
    sp.add_argument("--horizon", type=int, default=None)
    sp.add_argument("--trials", type=int, default=0,
                    help="run this many randomized soundness trials instead of one trace")
    sp.add_argument("--plots", dest="plots", action="store_true", default=True)
    sp.add_argument("--no-plots", dest="plots", action="store_false")
    sp.set_defaults(fn=cmd_transfer)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE_ERROR if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (KeyError, ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
