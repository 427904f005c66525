"""Runtime benchmark: per-slide forward time across feature dims and bag sizes."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import PATCH, FeatureBag
from .models import MilModel, ModelConfig
from .params import ModelParams
from .pyramid import MspnSpec, mspn_forward
from .remap import SlideGeometry
from .tensor import Tensor, no_grad

BENCH_FIELDS = ("family", "D", "N", "median_ms", "iqr_ms", "params", "flops_est")
DEFAULT_FAMILIES = ("abmil", "abmil+mspn", "concat")


@dataclass
class BenchRow:
    family: str
    dim: int
    n: int
    median_ms: float
    iqr_ms: float
    params: int
    flops_est: int

    def as_tuple(self) -> tuple:
        return (self.family, self.dim, self.n, self.median_ms, self.iqr_ms, self.params, self.flops_est)


def bench_geometry(max_n: int) -> SlideGeometry:
    """Square slide whose 256 px lattice holds at least ``max_n`` patches."""
    side = max(1, math.ceil(math.sqrt(max_n))) * PATCH
    return SlideGeometry(side, side)


def bench_bag(n: int, dim: int, geom: SlideGeometry, seed: int = 0) -> FeatureBag:
    """Random bag of ``n`` patches.  For a fixed geometry and seed, smaller bags
    are prefixes of larger ones, so only N changes between sizes."""
    gw, gh = geom.width // PATCH, geom.height // PATCH
    if n > gw * gh:
        raise ValueError(f"{n} patches do not fit a {gw}x{gh} lattice")
    cells = np.random.default_rng(seed).permutation(gw * gh)[:n]
    coords = np.stack([cells % gw, cells // gw], axis=1) * PATCH
    feats = np.random.default_rng([seed, dim, n]).standard_normal((n, dim))
    return FeatureBag(f"bench_{n}", geom, coords.astype(np.int64), feats)


def time_call(fn: Callable[[], object], repeats: int, warmup: int = 3) -> tuple[float, float]:
    """(median, IQR) in milliseconds over ``repeats`` timed calls."""
    for _ in range(warmup):
        fn()
    ts = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        ts.append((time.perf_counter() - t0) * 1000.0)
    q75, q50, q25 = np.percentile(ts, [75, 50, 25])
    return float(q50), float(q75 - q25)


def bench_runtime(families: Sequence[str] = DEFAULT_FAMILIES, dims: Sequence[int] = (512,),
                  patches: Sequence[int] = (1000, 2000), repeats: int = 5, warmup: int = 3,
                  seed: int = 0, fovs: Sequence[int] = (3072, 2048, 1536),
                  geom: SlideGeometry | None = None) -> list[BenchRow]:
    """Median / IQR forward time per (family, D, N) on synthetic bags.

    All bags share one geometry (sized for the largest N) so grid sizes stay
    fixed and only N and D vary.
    """
    geom = geom or bench_geometry(max(patches))
    rows = []
    for dim in dims:
        bags = {n: bench_bag(n, dim, geom, seed) for n in patches}
        for fam in families:
            cfg = ModelConfig(family=fam, dim=dim, n_classes=2, fovs=list(fovs))
            model = MilModel(cfg, np.random.default_rng(seed))
            for n in patches:
                bag = bags[n]

                def run():
                    with no_grad():
                        return model.forward(bag)

                model.clear_cache()
                med, iqr = time_call(run, repeats, warmup)
                sizes = [g.n_cells for g in run().grids]
                rows.append(BenchRow(fam, dim, n, med, iqr, model.count_params(), model.flops(n, sizes)))
    return rows


def time_mspn_forward(n: int, dim: int = 512, fovs: Sequence[int] = (3072, 2048, 1536),
                      geom: SlideGeometry | None = None, repeats: int = 7, warmup: int = 3,
                      seed: int = 0) -> tuple[float, float]:
    """(median, IQR) ms of the MSPN stack alone, grid bucketing and the
    materialised ``(N, D)`` output included."""
    geom = geom or bench_geometry(n)
    bag = bench_bag(n, dim, geom, seed)
    spec = MspnSpec(dim=dim, fovs=list(fovs))
    params = ModelParams()
    spec.init_params(params, np.random.default_rng(seed))
    h = Tensor(bag.features)

    def run():
        with no_grad():
            return mspn_forward(h, bag.coords, geom, spec, params).features

    return time_call(run, repeats, warmup)


def write_bench_csv(path: str | Path, rows: Sequence[BenchRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_FIELDS)
        for r in rows:
            w.writerow(r.as_tuple())
