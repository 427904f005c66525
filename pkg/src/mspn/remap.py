"""Grid-based remapping of patch features onto a coarse field-of-view grid.

Patches are bucketed by their normalised top-left coordinate into an
``H' x W'`` grid (``H' = ceil(H / s)``, ``W' = ceil(W / s)``), cells are
numbered row-major, and each cell holds the mean feature of its patches.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .tensor import ConfigError, DimensionError, Tensor, _make, reshape, transpose

MIN_FOV = 1024


class CoordinateError(ValueError):
    """Patch coordinates fall outside the slide geometry."""


@dataclass(frozen=True)
class SlideGeometry:
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ConfigError(f"slide geometry must be positive, got {self.width}x{self.height}")


@dataclass(frozen=True, eq=False)
class GridIndex:
    fov: int
    grid_w: int
    grid_h: int
    idx: np.ndarray
    counts: np.ndarray

    @property
    def n_cells(self) -> int:
        return self.grid_w * self.grid_h

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid_h, self.grid_w

    def cell_of(self, n: int) -> tuple[int, int]:
        """``(v, u)`` = (row, column) of patch ``n``."""
        return divmod(int(self.idx[n]), self.grid_w)

    @cached_property
    def groups(self) -> "Grouping":
        return Grouping(self.idx, self.n_cells)

    def cell_sums(self, rows: np.ndarray) -> np.ndarray:
        """``(H'*W', D)`` per-cell sums of ``rows``; empty cells are zero."""
        return self.groups.sums(rows)


@dataclass(frozen=True, eq=False)
class Grouping:
    """A partition of ``N`` rows into ``n_groups`` labelled groups."""

    idx: np.ndarray     # (N,) group of every row
    n_groups: int

    @cached_property
    def counts(self) -> np.ndarray:
        return np.bincount(self.idx, minlength=self.n_groups)

    @cached_property
    def members(self) -> list[tuple[int, np.ndarray]]:
        """``(group, rows)`` for every non-empty group, rows ascending."""
        order = np.argsort(self.idx, kind="stable")
        groups = np.flatnonzero(self.counts)
        stops = np.cumsum(self.counts[groups])
        return list(zip(groups.tolist(), np.split(order, stops[:-1])))

    def sums(self, rows: np.ndarray) -> np.ndarray:
        """``(n_groups, D)`` per-group sums of ``rows``; empty groups are zero."""
        # per-group gathers stay in cache; np.add.at is 5-10x slower on wide rows
        out = np.zeros((self.n_groups, rows.shape[1]))
        for group, members in self.members:
            out[group] = np.take(rows, members, axis=0).sum(axis=0)
        return out


@dataclass(frozen=True)
class CoarseFeatureMap:
    map: Tensor
    grid: GridIndex


def _as_coords(coords) -> np.ndarray:
    c = np.asarray(coords)
    if c.ndim != 2 or c.shape[1] != 2:
        raise DimensionError(f"coords must be N x 2, got shape {c.shape}")
    return c


def normalize_coords(coords, geom: SlideGeometry) -> np.ndarray:
    """Map pixel coordinates into ``[0, 1)`` by dividing by the slide extent."""
    c = _as_coords(coords)
    x, y = c[:, 0], c[:, 1]
    bad = np.flatnonzero((x < 0) | (x >= geom.width) | (y < 0) | (y >= geom.height))
    if bad.size:
        raise CoordinateError(
            f"{bad.size} coordinate(s) outside [0,{geom.width})x[0,{geom.height}); "
            f"first offending patch index {int(bad[0])}: {tuple(int(v) for v in c[bad[0]])}")
    out = np.empty(c.shape, dtype=np.float64)
    out[:, 0] = x / geom.width
    out[:, 1] = y / geom.height
    return out


def grid_shape(geom: SlideGeometry, fov: int) -> tuple[int, int]:
    """``(H', W')`` for a field of view; width and height are independent."""
    return math.ceil(geom.height / fov), math.ceil(geom.width / fov)


def build_grid_index(coords, geom: SlideGeometry, fov: int, min_fov: int | None = MIN_FOV) -> GridIndex:
    """Assign every patch to a row-major cell of the ``fov``-sized grid.

    ``min_fov`` guards against grids finer than a coarse tile; pass ``None``
    to disable it.
    """
    if fov <= 0:
        raise ConfigError(f"field of view must be positive, got {fov}")
    if min_fov is not None and fov < min_fov:
        raise ConfigError(f"field of view {fov} is below the minimum {min_fov}")
    norm = normalize_coords(coords, geom)
    gh, gw = grid_shape(geom, fov)
    u = np.minimum(np.floor(norm[:, 0] * gw).astype(np.int64), gw - 1)
    v = np.minimum(np.floor(norm[:, 1] * gh).astype(np.int64), gh - 1)
    idx = v * gw + u
    counts = np.bincount(idx, minlength=gh * gw).astype(np.int64)
    return GridIndex(fov=int(fov), grid_w=gw, grid_h=gh, idx=idx, counts=counts)


def group_sum(x: Tensor, groups: Grouping) -> Tensor:
    """``(n_groups, D)`` per-group row sums of a ``(N, D)`` tensor."""
    if x.data.ndim != 2 or x.shape[0] != groups.idx.size:
        raise DimensionError(f"rows {x.shape} do not match {groups.idx.size} grouped rows")
    idx = groups.idx

    def fn(g):
        return (g[idx],)

    return _make(groups.sums(x.data), (x,), fn, "group_sum")


def scatter_mean(features: Tensor, grid: GridIndex) -> Tensor:
    """Per-cell mean of ``features`` rows, as an ``(H'*W', D)`` tensor.

    Empty cells stay zero.  The gradient of cell ``m`` is shared equally
    among its member patches.
    """
    if features.data.ndim != 2 or features.shape[0] != grid.idx.size:
        raise DimensionError(
            f"features {features.shape} do not match {grid.idx.size} indexed patches")
    return scale_rows(group_sum(features, grid.groups), inverse_counts(grid.counts))


def inverse_counts(counts: np.ndarray) -> np.ndarray:
    """``1 / counts``, with zero for empty groups."""
    inv = np.zeros(counts.size)
    nonempty = counts > 0
    inv[nonempty] = 1.0 / counts[nonempty]
    return inv


def scale_rows(x: Tensor, scale: np.ndarray) -> Tensor:
    """Multiply row ``i`` of ``x`` by the constant ``scale[i]``."""
    col = scale[:, None]

    def fn(g):
        return (g * col,)

    return _make(x.data * col, (x,), fn, "scale_rows")


def to_map(cells: Tensor, grid: GridIndex) -> Tensor:
    """``(H'*W', D)`` cell rows -> ``(1, D, H', W')`` map."""
    return reshape(transpose(cells), (1, cells.shape[1], grid.grid_h, grid.grid_w))


def aggregate(features: Tensor, grid: GridIndex) -> CoarseFeatureMap:
    """Coarse feature map ``(1, D, H', W')`` of per-cell mean features."""
    return CoarseFeatureMap(map=to_map(scatter_mean(features, grid), grid), grid=grid)


@dataclass(frozen=True, eq=False)
class Refinement:
    """Common refinement of several grids over the same patches.

    Patches sharing a cell in every grid form one group, so any per-cell
    quantity of any grid is constant within a group.
    """

    patches: Grouping               # patch -> group
    to_grid: list[Grouping]         # group -> cell, one per grid

    @property
    def n_groups(self) -> int:
        return self.patches.n_groups


def common_refinement(grids: list[GridIndex]) -> Refinement:
    if not grids:
        raise ConfigError("at least one grid is required")
    key = np.zeros(grids[0].idx.size, dtype=np.int64)
    for g in grids:
        key = key * g.n_cells + g.idx
    _, group = np.unique(key, return_inverse=True)
    n = int(group.max()) + 1 if group.size else 0
    to_grid = []
    for g in grids:
        cell = np.zeros(n, dtype=np.int64)
        cell[group] = g.idx
        to_grid.append(Grouping(cell, g.n_cells))
    return Refinement(Grouping(group.reshape(-1), n), to_grid)


def compose_check(features, grid: GridIndex) -> float:
    """Max-abs gap between the count-weighted mean of cell means and the bag mean.

    Averaging cell means with weights ``count / N`` must reproduce plain mean
    pooling, i.e. remapping does not change what a mean aggregator sees.
    """
    h = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    n = h.shape[0]
    if n < 1:
        raise DimensionError("empty bag")
    cells = scatter_mean(Tensor(h), grid).data
    weighted = (grid.counts[:, None] / n * cells).sum(axis=0)
    return float(np.max(np.abs(weighted - h.mean(axis=0))))
