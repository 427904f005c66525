"""Coarse guidance networks and their residual multi-FOV stack."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import tensor as T
from .params import ModelParams, uniform_fan_in
from .remap import (GridIndex, SlideGeometry, aggregate, build_grid_index, common_refinement, group_sum,
                    inverse_counts, scale_rows, to_map, MIN_FOV)
from .tensor import ConfigError, Tensor

DEFAULT_HIDDEN = 64


def cgn_param_count(dim: int, hidden: int = DEFAULT_HIDDEN) -> int:
    """Learnable scalars in one CGN: two 3x3 convs and a 1x1 conv, with biases."""
    return 9 * dim * hidden + hidden + 9 * hidden * hidden + hidden + hidden + 1


def add_cgn_params(params: ModelParams, prefix: str, dim: int, hidden: int,
                   rng: np.random.Generator | None) -> None:
    """Register conv weights under ``prefix``; ``rng=None`` gives all zeros."""
    shapes = {
        "conv1.weight": ((hidden, dim, 3, 3), dim * 9),
        "conv1.bias": ((hidden,), None),
        "conv2.weight": ((hidden, hidden, 3, 3), hidden * 9),
        "conv2.bias": ((hidden,), None),
        "conv3.weight": ((1, hidden, 1, 1), hidden),
        "conv3.bias": ((1,), None),
    }
    for name, (shape, fan_in) in shapes.items():
        if rng is None or fan_in is None:
            value = np.zeros(shape)
        else:
            value = uniform_fan_in(rng, shape, fan_in)
        params.add(f"{prefix}.{name}", value)


@dataclass
class CgnOutput:
    h: Tensor               # H, (N, D)
    per_patch: Tensor       # M_A, guidance gathered per patch, (N, 1)
    guidance: Tensor        # P, (1, 1, H', W')
    grid: GridIndex

    @property
    def scored(self) -> Tensor:
        """H_k = H * M_A, (N, D)."""
        return T.mul(self.h, self.per_patch)


def guidance_map(fmap: Tensor, params: ModelParams, prefix: str) -> Tensor:
    """sigmoid(conv1x1(relu(conv3x3(relu(conv3x3(M))))))"""
    p = params
    z = T.relu(T.conv2d(fmap, p[f"{prefix}.conv1.weight"], p[f"{prefix}.conv1.bias"], k=3, padding=1))
    z = T.relu(T.conv2d(z, p[f"{prefix}.conv2.weight"], p[f"{prefix}.conv2.bias"], k=3, padding=1))
    z = T.conv2d(z, p[f"{prefix}.conv3.weight"], p[f"{prefix}.conv3.bias"], k=1, padding=0)
    return T.sigmoid(z)


def cgn_forward(h: Tensor, grid: GridIndex, params: ModelParams, prefix: str) -> CgnOutput:
    """Score every patch by the guidance value of the grid cell it falls in."""
    fmap = aggregate(h, grid).map
    guidance = guidance_map(fmap, params, prefix)
    per_patch = T.reshape(T.take(guidance, grid.idx), (grid.idx.size, 1))
    return CgnOutput(h=h, per_patch=per_patch, guidance=guidance, grid=grid)


def canonical_fovs(fovs, warn: bool = True) -> list[int]:
    """Deduplicated field-of-view list in processing order (largest first)."""
    fovs = [int(s) for s in fovs]
    if not fovs:
        raise ConfigError("at least one field of view is required")
    if len(set(fovs)) != len(fovs):
        raise ConfigError(f"duplicate fields of view in {fovs}")
    ordered = sorted(fovs, reverse=True)
    if warn and ordered != fovs:
        warnings.warn(f"fields of view reordered largest-first: {ordered}", stacklevel=3)
    return ordered


@dataclass
class MspnSpec:
    """Architecture of an MSPN stack; weights live in a shared ModelParams."""

    dim: int
    fovs: list[int]
    hidden: int = DEFAULT_HIDDEN
    prefix: str = "mspn"
    min_fov: int | None = MIN_FOV

    def __post_init__(self):
        self.fovs = canonical_fovs(self.fovs)

    @property
    def k(self) -> int:
        return len(self.fovs)

    def cgn_prefix(self, i: int) -> str:
        return f"{self.prefix}.cgn{i}"

    def init_params(self, params: ModelParams, rng: np.random.Generator | None) -> None:
        for i in range(self.k):
            add_cgn_params(params, self.cgn_prefix(i), self.dim, self.hidden, rng)

    def grids(self, coords, geom: SlideGeometry) -> list[GridIndex]:
        return [build_grid_index(coords, geom, s, min_fov=self.min_fov) for s in self.fovs]


@dataclass
class MspnOutput:
    """Stack output kept factored as ``H * weights``, one scalar per patch."""

    base: Tensor                    # H, (N, D)
    weights: Tensor | None = None   # prod_k (1 + M_A^k), (N, 1)
    guidances: list[Tensor] = field(default_factory=list)
    grids: list[GridIndex] = field(default_factory=list)

    @cached_property
    def features(self) -> Tensor:
        """H_mspn, (N, D)."""
        return self.base if self.weights is None else T.mul(self.base, self.weights)


def mspn_forward(h: Tensor, coords, geom: SlideGeometry, spec: MspnSpec, params: ModelParams,
                 grids: list[GridIndex] | None = None) -> MspnOutput:
    """Residual stack: for each FOV, largest first, ``H <- H + CGN_s(H)``.

    Precomputed ``grids`` (one per FOV, in processing order) may be passed to
    skip re-bucketing when the same bag is seen repeatedly.
    """
    if grids is None:
        grids = spec.grids(coords, geom)
    # every CGN rescales each patch row by a scalar, so the stack output is
    # H * prod_k (1 + M_A^k).  The scalars are constant on each group of the
    # grids' common refinement, so one pass of group sums S_r feeds every
    # stage: the weighted cell sums are sum_r w_r S_r over a cell's groups.
    ref = common_refinement(grids)
    sums = group_sum(h, ref.patches)                          # (R, D)
    out = MspnOutput(base=h)
    w = None                                                  # (R, 1)
    for i, grid in enumerate(grids):
        x = sums if w is None else T.mul(sums, w)
        cells = scale_rows(group_sum(x, ref.to_grid[i]), inverse_counts(grid.counts))
        guidance = guidance_map(to_map(cells, grid), params, spec.cgn_prefix(i))
        step = T.affine(T.reshape(T.take(guidance, ref.to_grid[i].idx), (ref.n_groups, 1)), 1.0, 1.0)
        w = step if w is None else T.mul(w, step)
        out.guidances.append(guidance)
        out.grids.append(grid)
    if w is not None:
        out.weights = T.reshape(T.take(w, ref.patches.idx), (h.shape[0], 1))
    return out


def count_params(spec: MspnSpec) -> int:
    return spec.k * cgn_param_count(spec.dim, spec.hidden)


def estimate_flops(n: int, dim: int, hidden: int, grid_sizes, k: int | None = None) -> int:
    """Dominant-term operation count of one MSPN forward pass.

    ``2 * (k*N*D + sum_i M_i * (9*D*D' + 9*D'^2 + D'))`` where ``M_i`` is the
    number of cells of the i-th grid.
    """
    grid_sizes = [int(m) for m in grid_sizes]
    if k is None:
        k = len(grid_sizes)
    conv = sum(m * (9 * dim * hidden + 9 * hidden * hidden + hidden) for m in grid_sizes)
    return 2 * (k * n * dim + conv)
