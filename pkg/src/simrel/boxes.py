"""Axis-aligned boxes in R^n, the only set shape the toolkit works with."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned box [lb_1, ub_1] x ... x [lb_d, ub_d]."""

    lb: np.ndarray
    ub: np.ndarray

    def __post_init__(self):
        lb = np.atleast_1d(np.asarray(self.lb, dtype=float))
        ub = np.atleast_1d(np.asarray(self.ub, dtype=float))
        if lb.shape != ub.shape or lb.ndim != 1:
            raise ValueError(f"box bounds must be 1-d and equal length, got {lb.shape} vs {ub.shape}")
        if np.any(ub < lb):
            bad = int(np.argmax(ub < lb))
            raise ValueError(f"box dimension {bad} has ub < lb ({ub[bad]} < {lb[bad]})")
        lb.setflags(write=False)
        ub.setflags(write=False)
        object.__setattr__(self, "lb", lb)
        object.__setattr__(self, "ub", ub)

    @property
    def dim(self) -> int:
        return self.lb.size

    @property
    def width(self) -> np.ndarray:
        return self.ub - self.lb

    def contains(self, x, atol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lb - atol) and np.all(x <= self.ub + atol))

    def contains_batch(self, x: np.ndarray, atol: float = 0.0) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.all((x >= self.lb - atol) & (x <= self.ub + atol), axis=1)

    def clamp(self, x: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), self.lb, self.ub)

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        if n is None:
            return rng.uniform(self.lb, self.ub)
        return rng.uniform(self.lb, self.ub, size=(n, self.dim))

    def concat(self, other: "Box") -> "Box":
        """Cartesian product with another box."""
        return Box(np.concatenate([self.lb, other.lb]), np.concatenate([self.ub, other.ub]))

    def issubset(self, other: "Box", atol: float = 1e-12) -> bool:
        return bool(np.all(self.lb >= other.lb - atol) and np.all(self.ub <= other.ub + atol))

    def __repr__(self):
        parts = "x".join(f"[{l:g},{u:g}]" for l, u in zip(self.lb, self.ub))
        return f"Box({parts})"


def box(*bounds) -> Box:
    """Convenience constructor: box((-1, 1), (0, 8), ...)."""
    lb = [b[0] for b in bounds]
    ub = [b[1] for b in bounds]
    return Box(np.array(lb, dtype=float), np.array(ub, dtype=float))
