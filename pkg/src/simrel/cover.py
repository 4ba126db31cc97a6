"""Finite hypercube covers of boxes and the joint training dataset.

A cover of a box with discretization parameter e splits every dimension into
ceil(width / e) cubes of edge e (the last cube of a dimension may be smaller).
Centers are placed at cube midpoints, so every point of the box is within
e/2 (infinity norm) of its cube's center.  Center enumeration is lexicographic
over the per-dimension index tuple, which makes runs reproducible and allows
partitioned parallel sweeps over disjoint index ranges.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .boxes import Box
from .systems import SystemDef

_MAX_COUNT = 2**63 - 1


@dataclass(frozen=True)
class GridCover:
    """Cover of `box` by disjoint hypercubes of edge `e` with center access."""

    box: Box
    e: float
    counts: np.ndarray       # cubes per dimension
    M: int                   # total number of cubes

    def center(self, i: int) -> np.ndarray:
        """Center of cube i, 0 <= i < M, lexicographic index order."""
        if not 0 <= i < self.M:
            raise IndexError(f"cube index {i} out of range [0, {self.M})")
        idx = np.array(np.unravel_index(i, self.counts), dtype=float)
        return self._centers_from_idx(idx)

    def _centers_from_idx(self, idx: np.ndarray) -> np.ndarray:
        lo = self.box.lb + idx * self.e
        hi = np.minimum(lo + self.e, self.box.ub)
        c = 0.5 * (lo + hi)
        # zero-width dimensions collapse to the single coordinate
        return np.where(self.box.width > 0, c, self.box.lb)

    def centers(self, start: int = 0, stop: int | None = None) -> Iterator[np.ndarray]:
        """Stream centers for indices [start, stop) without materializing."""
        stop = self.M if stop is None else stop
        for i in range(start, stop):
            yield self.center(i)

    def centers_array(self, idx: np.ndarray | None = None) -> np.ndarray:
        """Centers for an index array (default: all M), vectorized."""
        if idx is None:
            idx = np.arange(self.M)
        idx = np.asarray(idx, dtype=np.int64)
        multi = np.stack(np.unravel_index(idx, self.counts), axis=-1).astype(float)
        lo = self.box.lb + multi * self.e
        hi = np.minimum(lo + self.e, self.box.ub)
        c = 0.5 * (lo + hi)
        return np.where(self.box.width > 0, c, self.box.lb)

    def axis_centers(self, d: int) -> np.ndarray:
        """The 1-d center coordinates along dimension d."""
        idx = np.arange(self.counts[d], dtype=float)
        lo = self.box.lb[d] + idx * self.e
        hi = np.minimum(lo + self.e, self.box.ub[d])
        if self.box.width[d] == 0:
            return np.array([self.box.lb[d]])
        return 0.5 * (lo + hi)

    def nearest(self, t) -> tuple[int, np.ndarray]:
        """Index and center of the cube containing t (boundary maps inward)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if not self.box.contains(t):
            off = (t < self.box.lb) | (t > self.box.ub)
            d = int(np.argmax(off))
            raise ValueError(
                f"point outside box in dimension {d}: {t[d]} not in "
                f"[{self.box.lb[d]}, {self.box.ub[d]}]"
            )
        idx = np.floor((t - self.box.lb) / self.e)
        idx = np.clip(idx, 0, self.counts - 1).astype(np.int64)
        flat = int(np.ravel_multi_index(idx, self.counts))
        return flat, self._centers_from_idx(idx.astype(float))

    def nearest_batch(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        t = np.atleast_2d(np.asarray(t, dtype=float))
        inside = self.box.contains_batch(t)
        if not np.all(inside):
            bad = t[~inside][0]
            off = (bad < self.box.lb) | (bad > self.box.ub)
            d = int(np.argmax(off))
            raise ValueError(f"point outside box in dimension {d}")
        idx = np.clip(np.floor((t - self.box.lb) / self.e), 0, self.counts - 1)
        flat = np.ravel_multi_index(idx.astype(np.int64).T, self.counts)
        lo = self.box.lb + idx * self.e
        hi = np.minimum(lo + self.e, self.box.ub)
        c = 0.5 * (lo + hi)
        c = np.where(self.box.width > 0, c, self.box.lb)
        return flat, c


def cover(b: Box, e: float) -> GridCover:
    """Cover a box with hypercubes of edge e; zero-width dims get one cube."""
    if e <= 0:
        raise ValueError(f"discretization parameter must be positive, got {e}")
    counts = np.maximum(np.ceil(b.width / e), 1).astype(np.int64)
    M = 1
    for c in counts:
        M *= int(c)
    if M > _MAX_COUNT:
        raise ValueError(f"cover would have M={M} cubes, exceeding the count type")
    return GridCover(box=b, e=float(e), counts=counts, M=M)


def nearest_center(gc: GridCover, t) -> tuple[int, np.ndarray]:
    return gc.nearest(t)


@dataclass(frozen=True)
class JointDataset:
    """Grid datasets for training and certification.

    T_d is the filtered product grid over X x X_hat: pairs of state-cover
    centers whose current outputs are eps-close.  It is stored as index pairs
    into the two state covers; `pairs()` materializes coordinates on demand.
    """

    target: SystemDef
    source: SystemDef
    x_cover: GridCover           # cover of target X with parameter e
    xhat_cover: GridCover        # cover of source X_hat with parameter e
    u_hat_cover: GridCover       # cover of U_hat with parameter e_hat
    x0_cover: GridCover          # cover of X0 (under-approximation: the box itself)
    xhat0_cover: GridCover       # cover of X_hat_0 (over-approximation: the box itself)
    pair_x: np.ndarray           # T_d target-side cover indices
    pair_xhat: np.ndarray        # T_d source-side cover indices
    y_table: np.ndarray          # outputs of all x-cover centers
    yhat_table: np.ndarray       # outputs of all xhat-cover centers
    eps: float
    e: float
    e_hat: float

    def __len__(self) -> int:
        return self.pair_x.size

    def pairs(self, sel=None) -> tuple[np.ndarray, np.ndarray]:
        """(x, xhat) coordinate arrays for T_d rows `sel` (default: all)."""
        ix = self.pair_x if sel is None else self.pair_x[sel]
        ih = self.pair_xhat if sel is None else self.pair_xhat[sel]
        return self.x_cover.centers_array(ix), self.xhat_cover.centers_array(ih)

    def u_hat_grid(self) -> np.ndarray:
        return self.u_hat_cover.centers_array()

    def iter_pairs(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Stream T_d pairs in enumeration order without materializing."""
        for ix, ih in zip(self.pair_x, self.pair_xhat):
            yield self.x_cover.center(int(ix)), self.xhat_cover.center(int(ih))


def joint_pair_counts(target: SystemDef, source: SystemDef, e: float) -> tuple[int, int, int]:
    """(M_x, M_xhat, M_product) for the product cover, computed analytically."""
    cx = cover(target.X, e)
    ch = cover(source.X, e)
    return cx.M, ch.M, cx.M * ch.M


def stream_joint_pairs(target: SystemDef, source: SystemDef,
                       eps: float, e: float) -> Iterator[tuple[int, int]]:
    """Stream eq-(5)-filtered product-cover index pairs in lexicographic order.

    Yields (i_x, i_xhat) with the target index varying slowest, identical to
    the order produced by build_joint_dataset.
    """
    cx = cover(target.X, e)
    ch = cover(source.X, e)
    yhat = source.output(ch.centers_array())
    for i in range(cx.M):
        y = target.output(cx.center(i))
        close = np.max(np.abs(yhat - y), axis=1) <= eps
        for j in np.nonzero(close)[0]:
            yield i, int(j)


def build_joint_dataset(target: SystemDef, source: SystemDef,
                        eps: float, e: float, e_hat: float,
                        chunk: int = 2048) -> JointDataset:
    """Construct the joint grids with the output-closeness filter.

    The product grid is swept in chunks of target centers against the full
    vectorized source table, so T_d never requires the unfiltered product in
    memory.
    """
    if target.l != source.l:
        raise ValueError(
            f"output dimensions differ: target {target.l} vs source {source.l}"
        )
    if eps < 0:
        raise ValueError("eps must be nonnegative")

    cx = cover(target.X, e)
    ch = cover(source.X, e)
    cu = cover(source.U, e_hat)
    c0 = cover(target.X0, e)
    ch0 = cover(source.X0, e)

    yhat = source.output(ch.centers_array())
    y_all = np.empty((cx.M, target.l))
    ix_parts: list[np.ndarray] = []
    ih_parts: list[np.ndarray] = []
    for lo in range(0, cx.M, chunk):
        hi = min(lo + chunk, cx.M)
        xs = cx.centers_array(np.arange(lo, hi))
        ys = target.output(xs)
        y_all[lo:hi] = ys
        # pairwise infinity distance between chunk outputs and all source outputs
        d = np.max(np.abs(ys[:, None, :] - yhat[None, :, :]), axis=2)
        ii, jj = np.nonzero(d <= eps)
        ix_parts.append((ii + lo).astype(np.int64))
        ih_parts.append(jj.astype(np.int64))

    pair_x = np.concatenate(ix_parts) if ix_parts else np.empty(0, dtype=np.int64)
    pair_xhat = np.concatenate(ih_parts) if ih_parts else np.empty(0, dtype=np.int64)
    if pair_x.size == 0:
        raise ValueError(
            "no state pair passes the output-closeness filter: "
            "eps too small for these output maps"
        )
    return JointDataset(
        target=target, source=source,
        x_cover=cx, xhat_cover=ch, u_hat_cover=cu,
        x0_cover=c0, xhat0_cover=ch0,
        pair_x=pair_x, pair_xhat=pair_xhat,
        y_table=y_all, yhat_table=yhat,
        eps=float(eps), e=float(e), e_hat=float(e_hat),
    )
