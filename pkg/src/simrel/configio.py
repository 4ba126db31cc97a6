"""Flat key = value config files with per-subcommand sections.

The format is INI-style (configparser) so experiment records stay archivable
and diffable.  Every output artifact embeds the config hash; subcommands
refuse artifact/config pairs whose hashes disagree.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field

from .systems import SystemDef, builtin_system, system_from_config
from .training import TrainConfig


@dataclass
class RunConfig:
    target: SystemDef
    source: SystemDef
    train: TrainConfig
    horizon: int = 1000
    trials: int = 100
    controller: str = "random"
    config_hash: str = ""
    raw_text: str = ""


def config_hash_of_text(text: str) -> str:
    canonical = "\n".join(ln.rstrip() for ln in text.strip().splitlines())
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _system_from_section(cp: configparser.ConfigParser, section: str) -> SystemDef:
    if not cp.has_section(section):
        raise KeyError(f"config is missing the [{section}] section")
    spec = dict(cp.items(section))
    if "dynamics" not in spec and "name" in spec:
        # bare builtin reference: name = pendulum
        return builtin_system(spec["name"])
    return system_from_config(spec)


_TRAIN_FLOATS = ("eps", "eta", "gamma", "e", "e_hat", "lr_v", "lr_k",
                 "label_band", "init_scale", "fd_delta", "lip_cap_v", "lip_cap_k")
_TRAIN_INTS = ("N", "max_iters", "batch_size", "seed", "workers", "chunk")
_TRAIN_STRS = ("cond10_mode", "k_loss", "k_init")
_TRAIN_TUPLES = ("v_hidden", "k_hidden")


def _train_from_section(cp: configparser.ConfigParser) -> TrainConfig:
    if not cp.has_section("train"):
        raise KeyError("config is missing the [train] section")
    sec = cp["train"]
    kwargs = {}
    for key in _TRAIN_FLOATS:
        if key in sec:
            val = sec[key].strip()
            kwargs[key] = None if val.lower() == "none" else float(val)
    for key in _TRAIN_INTS:
        if key in sec:
            kwargs[key] = int(sec[key])
    for key in _TRAIN_STRS:
        if key in sec:
            kwargs[key] = sec[key].strip()
    for key in _TRAIN_TUPLES:
        if key in sec:
            kwargs[key] = tuple(int(v) for v in sec[key].replace(",", " ").split())
    missing = [k for k in ("eps", "eta", "gamma", "e", "e_hat") if k not in kwargs]
    if missing:
        raise KeyError(f"[train] section is missing: {', '.join(missing)}")
    return TrainConfig(**kwargs)


def load_run_config(path) -> RunConfig:
    with open(path) as f:
        text = f.read()
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read_string(text)
    target = _system_from_section(cp, "system.target")
    source = _system_from_section(cp, "system.source")
    train = _train_from_section(cp)
    horizon = 1000
    trials = 100
    controller = "random"
    if cp.has_section("run"):
        sec = cp["run"]
        horizon = int(sec.get("horizon", horizon))
        trials = int(sec.get("trials", trials))
        controller = sec.get("controller", controller).strip()
    return RunConfig(target=target, source=source, train=train,
                     horizon=horizon, trials=trials, controller=controller,
                     config_hash=config_hash_of_text(text), raw_text=text)
