"""Model families: a MIL aggregator and head, optionally behind an MSPN stack."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import mil
from . import tensor as T
from .data import FeatureBag
from .objectives import SurvLabel, cross_entropy, hazards, nll_surv
from .params import ModelParams
from .pyramid import DEFAULT_HIDDEN, MspnOutput, MspnSpec, cgn_param_count, estimate_flops, mspn_forward
from .remap import GridIndex, MIN_FOV, build_grid_index
from .tensor import ConfigError, Tensor

FAMILIES = ("meanpool", "maxpool", "abmil", "abmil+mspn", "concat")
# pseudo low-magnification tiles for the concatenation baseline: a 256 px tile
# at 10x / 5x spans 512 / 1024 px at 20x
CONCAT_FOVS = (512, 1024)


@dataclass
class ModelConfig:
    family: str
    dim: int
    n_classes: int
    fovs: list[int] = field(default_factory=lambda: [3072, 2048, 1536])
    cgn_hidden: int = DEFAULT_HIDDEN
    attn_hidden: int = mil.DEFAULT_ATTN_HIDDEN
    concat_fovs: tuple[int, ...] = CONCAT_FOVS
    min_fov: int | None = MIN_FOV

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r}; choose from {FAMILIES}")


@dataclass
class ModelOutput:
    logits: Tensor
    attention: Tensor | None = None
    mspn: MspnOutput | None = None      # H_mspn is ``mspn.features``
    guidances: list[Tensor] = field(default_factory=list)
    grids: list[GridIndex] = field(default_factory=list)


class MilModel:
    """A model family bound to its parameters.

    ``rng=None`` initialises every weight to zero (useful for analytic checks).
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.params = ModelParams()
        self.mspn: MspnSpec | None = None
        self._grids: dict[tuple[str, int], GridIndex] = {}
        c, d = cfg.n_classes, cfg.dim
        if cfg.family == "abmil+mspn":
            self.mspn = MspnSpec(dim=d, fovs=list(cfg.fovs), hidden=cfg.cgn_hidden, min_fov=cfg.min_fov)
            self.mspn.init_params(self.params, rng)
        if cfg.family in ("abmil", "abmil+mspn"):
            mil.init_abmil(self.params, d, c, cfg.attn_hidden, rng)
        elif cfg.family == "concat":
            mil.init_concat(self.params, d, 1 + len(cfg.concat_fovs), c, cfg.attn_hidden, rng)
        else:
            mil.add_linear_params(self.params, "head", d, c, rng)

    @property
    def family(self) -> str:
        return self.cfg.family

    def count_params(self) -> int:
        return self.params.count()

    def grid(self, bag: FeatureBag, fov: int, min_fov: int | None) -> GridIndex:
        key = (bag.slide_id, fov)
        g = self._grids.get(key)
        if g is None or g.idx.size != bag.n:
            g = build_grid_index(bag.coords, bag.geom, fov, min_fov=min_fov)
            self._grids[key] = g
        return g

    def clear_cache(self) -> None:
        self._grids.clear()

    def forward(self, bag: FeatureBag) -> ModelOutput:
        h = Tensor(bag.features)
        fam = self.cfg.family
        if fam == "meanpool":
            return ModelOutput(mil.linear(mil.meanpool(h), self.params, "head"))
        if fam == "maxpool":
            return ModelOutput(mil.linear(mil.maxpool(h), self.params, "head"))
        if fam == "abmil":
            out = mil.abmil(h, self.params)
            return ModelOutput(out.logits, out.attention)
        if fam == "abmil+mspn":
            grids = [self.grid(bag, s, self.mspn.min_fov) for s in self.mspn.fovs]
            ms = mspn_forward(h, bag.coords, bag.geom, self.mspn, self.params, grids=grids)
            out = mil.abmil(ms.base, self.params, row_weights=ms.weights)
            return ModelOutput(out.logits, out.attention, ms, ms.guidances, ms.grids)
        scales = [h] + [Tensor(coarse_bag(bag.features, self.grid(bag, s, None)))
                        for s in self.cfg.concat_fovs]
        out = mil.concat_baseline(scales, self.params)
        return ModelOutput(out.logits, out.attention)

    def loss(self, out: ModelOutput, label, beta: float = 0.5) -> Tensor:
        if isinstance(label, SurvLabel):
            return nll_surv(hazards(out.logits), label, beta)
        return cross_entropy(out.logits, int(label))

    def flops(self, n: int, grid_sizes: list[int] | None = None) -> int:
        """Dominant-term multiply-add count (x2) of one forward pass."""
        d, hdn, c = self.cfg.dim, self.cfg.attn_hidden, self.cfg.n_classes
        attn = 2 * (2 * n * d * hdn + n * hdn + n * d)
        fam = self.cfg.family
        if fam in ("meanpool", "maxpool"):
            return 2 * (n * d + c * d)
        if fam == "abmil":
            return attn + 2 * c * d
        if fam == "abmil+mspn":
            sizes = grid_sizes or []
            return attn + 2 * c * d + estimate_flops(n, d, self.cfg.cgn_hidden, sizes, self.mspn.k)
        s = 1 + len(self.cfg.concat_fovs)
        return s * attn + 2 * c * d * s


def coarse_bag(features: np.ndarray, grid: GridIndex) -> np.ndarray:
    """One pseudo-instance per non-empty cell: the mean of its patches."""
    sums = grid.cell_sums(features)
    keep = grid.counts > 0
    return sums[keep] / grid.counts[keep][:, None]


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count of a model family."""
    d, c = cfg.dim, cfg.n_classes
    if cfg.family in ("meanpool", "maxpool"):
        return c * d + c
    if cfg.family == "abmil":
        return mil.abmil_count(d, c, cfg.attn_hidden)
    if cfg.family == "abmil+mspn":
        return mil.abmil_count(d, c, cfg.attn_hidden) + len(cfg.fovs) * cgn_param_count(d, cfg.cgn_hidden)
    return mil.concat_count(d, 1 + len(cfg.concat_fovs), c, cfg.attn_hidden)
