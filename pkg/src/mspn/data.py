"""Synthetic slide bags, the binary bag format, survival binning and CV splits.

Bag file layout (little-endian)::

    magic   8 bytes  b"MSPNBAG1"
    version u32      1
    N       u64      patch count
    D       u32      feature dimension
    W, H    u32 u32  slide width / height in pixels
    coords  N x (u32 x, u32 y)
    feats   N x D float32, row-major
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .objectives import N_TIME_BINS, SurvLabel
from .params import FormatError
from .remap import SlideGeometry
from .tensor import ConfigError

BAG_MAGIC = b"MSPNBAG1"
BAG_VERSION = 1
PATCH = 256
_HEADER = struct.Struct("<8sIQIII")
MANIFEST_NAME = "manifest.json"

Label = Union[int, SurvLabel]


class ValidationError(ValueError):
    """Input data violates a documented precondition."""


@dataclass
class FeatureBag:
    slide_id: str
    geom: SlideGeometry
    coords: np.ndarray          # (N, 2) int64, patch top-left corners
    features: np.ndarray        # (N, D) float64 (float32-representable)
    label: Label | None = None
    time: float | None = None   # survival time, when known

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def validate(self) -> None:
        if self.n < 1:
            raise ValidationError(f"{self.slide_id}: empty bag")
        if self.features.shape[0] != self.n:
            raise ValidationError(f"{self.slide_id}: {self.features.shape[0]} feature rows for {self.n} coords")
        x, y = self.coords[:, 0], self.coords[:, 1]
        if (x < 0).any() or (y < 0).any() or (x >= self.geom.width).any() or (y >= self.geom.height).any():
            raise ValidationError(f"{self.slide_id}: coordinates outside slide geometry")
        if np.unique(self.coords, axis=0).shape[0] != self.n:
            raise ValidationError(f"{self.slide_id}: duplicate coordinates")


# ---------------------------------------------------------------- bag IO


def write_bag(path: str | Path, bag: FeatureBag) -> None:
    n, d = bag.features.shape
    header = _HEADER.pack(BAG_MAGIC, BAG_VERSION, n, d, bag.geom.width, bag.geom.height)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(bag.coords, dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(bag.features, dtype="<f4").tobytes())


def read_bag(path: str | Path, slide_id: str | None = None, expect_n: int | None = None,
             expect_dim: int | None = None) -> FeatureBag:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:8] != BAG_MAGIC:
        raise FormatError(f"{path}: bad magic", 0)
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header", len(raw))
    _, version, n, d, w, h = _HEADER.unpack_from(raw, 0)
    if version != BAG_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", 8)
    if n == 0 or d == 0 or n * d > (1 << 40):
        raise FormatError(f"{path}: implausible N={n}, D={d}", 12)
    coord_end = _HEADER.size + 8 * n
    feat_end = coord_end + 4 * n * d
    if len(raw) < feat_end:
        raise FormatError(f"{path}: truncated body, expected {feat_end} bytes", len(raw))
    if len(raw) > feat_end:
        raise FormatError(f"{path}: {len(raw) - feat_end} trailing bytes", feat_end)
    if expect_n is not None and n != expect_n:
        raise FormatError(f"{path}: N={n}, manifest declares {expect_n}", 12)
    if expect_dim is not None and d != expect_dim:
        raise FormatError(f"{path}: D={d}, manifest declares {expect_dim}", 20)
    coords = np.frombuffer(raw, dtype="<u4", count=2 * n, offset=_HEADER.size).reshape(n, 2).astype(np.int64)
    feats = np.frombuffer(raw, dtype="<f4", count=n * d, offset=coord_end).reshape(n, d).astype(np.float64)
    return FeatureBag(slide_id or Path(path).stem, SlideGeometry(int(w), int(h)), coords, feats)


# ---------------------------------------------------------------- manifest


@dataclass
class SlideRecord:
    slide_id: str
    path: str
    n: int
    label: dict


@dataclass
class DatasetManifest:
    name: str
    dim: int
    task: str                     # binary | multiclass | survival
    n_classes: int
    slides: list[SlideRecord] = field(default_factory=list)
    generator: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        raw = json.loads(text)
        raw["slides"] = [SlideRecord(**s) for s in raw["slides"]]
        return cls(**raw)

    def save(self, directory: str | Path) -> Path:
        path = Path(directory) / MANIFEST_NAME
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, directory: str | Path) -> "DatasetManifest":
        return cls.from_json((Path(directory) / MANIFEST_NAME).read_text(encoding="utf-8"))

    def ids(self) -> list[str]:
        return [s.slide_id for s in self.slides]

    def record(self, slide_id: str) -> SlideRecord:
        for s in self.slides:
            if s.slide_id == slide_id:
                return s
        raise KeyError(f"slide {slide_id!r} not in manifest")

    def strata(self) -> dict[str, int]:
        """Stratification key per slide: class id, or time bin for survival."""
        key = "bin" if self.task == "survival" else "class"
        return {s.slide_id: int(s.label[key]) for s in self.slides}


def label_from_record(task: str, rec: dict) -> Label:
    if task == "survival":
        return SurvLabel(int(rec["bin"]), bool(rec["censored"]))
    return int(rec["class"])


def load_bags(directory: str | Path, manifest: DatasetManifest | None = None) -> dict[str, FeatureBag]:
    directory = Path(directory)
    manifest = manifest or DatasetManifest.load(directory)
    bags = {}
    for rec in manifest.slides:
        bag = read_bag(directory / rec.path, rec.slide_id, expect_n=rec.n, expect_dim=manifest.dim)
        bag.label = label_from_record(manifest.task, rec.label)
        bag.time = rec.label.get("time")
        bags[rec.slide_id] = bag
    return bags


# ---------------------------------------------------------------- synthetic generator


@dataclass
class GeneratorConfig:
    """Knobs of the synthetic slide generator.

    Every slide holds three latent patch types.  Types A and B are rare; in
    positive (or high-risk) slides they are packed together into motif blocks
    about ``motif_scale`` pixels wide, in negative slides they are scattered.
    Type counts per slide do not depend on the label.  ``context`` adds a
    weak per-patch shift proportional to how many A/B patches surround a
    patch, so single patches carry a faint trace of the arrangement.
    """

    n_slides: int = 200
    dim: int = 32
    task: str = "binary"
    width_range: tuple[int, int] = (4096, 8192)
    height_range: tuple[int, int] = (4096, 8192)
    dropout_range: tuple[float, float] = (0.15, 0.60)
    type_freqs: tuple[float, float, float] = (0.1, 0.1, 0.8)
    sigma: float = 0.4
    context: float = 0.5
    context_radius: int = 1
    motif_scale: int = 1536
    positive_fraction: float = 0.5
    censor_rate: float = 0.3
    base_hazard: float = 0.05
    risk_gain: float = 2.0
    name: str = "synthetic"

    def validate(self) -> None:
        if self.n_slides < 1:
            raise ConfigError(f"n_slides must be >= 1, got {self.n_slides}")
        if self.dim < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")
        if self.task not in ("binary", "survival"):
            raise ConfigError(f"unknown task {self.task!r}")
        lo, hi = self.dropout_range
        if not 0.0 <= lo <= hi < 1.0:
            raise ConfigError(f"bad dropout range {self.dropout_range}")
        for lo, hi in (self.width_range, self.height_range):
            if lo < PATCH or hi < lo:
                raise ConfigError(f"bad slide extent range ({lo}, {hi})")
        if abs(sum(self.type_freqs) - 1.0) > 1e-9 or min(self.type_freqs) < 0:
            raise ConfigError(f"type frequencies must sum to 1, got {self.type_freqs}")


@dataclass
class SyntheticSlide:
    bag: FeatureBag
    types: np.ndarray          # (N,) 0=A, 1=B, 2=C
    clustered: float           # fraction of A/B patches placed in motifs


def _type_means(rng: np.random.Generator, dim: int) -> np.ndarray:
    means = rng.standard_normal((4, dim))
    return means / np.linalg.norm(means, axis=1, keepdims=True)


def _sample_lattice(rng: np.random.Generator, cfg: GeneratorConfig):
    def extent(lo, hi):
        return int(rng.integers(lo // PATCH, hi // PATCH + 1)) * PATCH

    w, h = extent(*cfg.width_range), extent(*cfg.height_range)
    gw, gh = w // PATCH, h // PATCH
    drop = rng.uniform(*cfg.dropout_range)
    keep = rng.random(gw * gh) >= drop
    if not keep.any():
        keep[int(rng.integers(gw * gh))] = True
    cells = np.flatnonzero(keep)
    rows, cols = np.divmod(cells, gw)
    return SlideGeometry(w, h), rows, cols, gw, gh


def _place_types(rng: np.random.Generator, rows, cols, n_ab: int, n_a: int,
                 clustered: float, block: int) -> np.ndarray:
    """Type per patch.  A ``clustered`` share of the A/B patches sits in motifs."""
    n = rows.size
    types = np.full(n, 2, dtype=np.int64)
    n_motif = int(round(clustered * n_ab))
    chosen: list[int] = []
    if n_motif:
        free = np.ones(n, dtype=bool)
        half = block // 2
        while len(chosen) < n_motif and free.any():
            centre = rng.choice(np.flatnonzero(free))
            r0, c0 = rows[centre], cols[centre]
            near = np.flatnonzero(free & (np.abs(rows - r0) <= half) & (np.abs(cols - c0) <= half))
            near = rng.permutation(near)[: n_motif - len(chosen)]
            chosen.extend(int(i) for i in near)
            free[near] = False
    rest = np.setdiff1d(np.arange(n), np.asarray(chosen, dtype=np.int64))
    scattered = rng.choice(rest, size=n_ab - len(chosen), replace=False)
    ab = np.concatenate([np.asarray(chosen, dtype=np.int64), scattered.astype(np.int64)])
    ab = rng.permutation(ab)
    types[ab[:n_a]] = 0
    types[ab[n_a:]] = 1
    return types


def _neighbour_density(rows, cols, is_ab: np.ndarray, gw: int, gh: int, radius: int) -> np.ndarray:
    """Fraction of occupied neighbours (Chebyshev radius) that are A/B."""
    occ = np.zeros((gh + 2 * radius, gw + 2 * radius))
    ab = np.zeros_like(occ)
    occ[rows + radius, cols + radius] = 1.0
    ab[rows + radius, cols + radius] = is_ab
    occ_sum = np.zeros((gh, gw))
    ab_sum = np.zeros((gh, gw))
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            if dy == radius and dx == radius:
                continue
            occ_sum += occ[dy:dy + gh, dx:dx + gw]
            ab_sum += ab[dy:dy + gh, dx:dx + gw]
    o, a = occ_sum[rows, cols], ab_sum[rows, cols]
    return np.divide(a, o, out=np.zeros_like(a), where=o > 0)


def synth_slide(rng: np.random.Generator, cfg: GeneratorConfig, means: np.ndarray,
                clustered: float, slide_id: str) -> SyntheticSlide:
    """Draw one slide.  Everything but the type placement is drawn first, so
    two calls from equal generator states differ only in arrangement."""
    geom, rows, cols, gw, gh = _sample_lattice(rng, cfg)
    n = rows.size
    f_a, f_b, _ = cfg.type_freqs
    n_a = int(round(f_a * n))
    n_ab = min(n, n_a + int(round(f_b * n)))
    noise = rng.standard_normal((n, cfg.dim)) * cfg.sigma
    place_rng = np.random.default_rng(rng.integers(1 << 63))
    types = _place_types(place_rng, rows, cols, n_ab, n_a, clustered, cfg.motif_scale // PATCH)
    is_ab = types < 2
    density = _neighbour_density(rows, cols, is_ab.astype(float), gw, gh, cfg.context_radius)
    baseline = n_ab / n
    feats = means[types] + noise + cfg.context * (density - baseline)[:, None] * means[3]
    feats = feats.astype(np.float32).astype(np.float64)
    coords = np.stack([cols * PATCH, rows * PATCH], axis=1).astype(np.int64)
    return SyntheticSlide(FeatureBag(slide_id, geom, coords, feats), types, clustered)


def generate_synthetic(cfg: GeneratorConfig, seed: int,
                       out_dir: str | Path | None = None) -> tuple[DatasetManifest, list[SyntheticSlide]]:
    """Generate a dataset; when ``out_dir`` is given, write bags and manifest there."""
    cfg.validate()
    root = np.random.default_rng(seed)
    means = _type_means(root, cfg.dim)
    slides: list[SyntheticSlide] = []
    for i in range(cfg.n_slides):
        rng = np.random.default_rng([seed, i])
        sid = f"slide_{i:04d}"
        if cfg.task == "binary":
            positive = rng.random() < cfg.positive_fraction
            s = synth_slide(rng, cfg, means, 1.0 if positive else 0.0, sid)
            s.bag.label = int(positive)
        else:
            s = synth_slide(rng, cfg, means, float(rng.random()), sid)
            rate = cfg.base_hazard * np.exp(cfg.risk_gain * s.clustered)
            t_event = float(rng.exponential(1.0 / rate))
            censored = bool(rng.random() < cfg.censor_rate)
            s.bag.time = t_event * float(rng.uniform(0.3, 1.0)) if censored else t_event
            s.bag.label = censored      # binned below, once all times are known
        slides.append(s)

    records = []
    if cfg.task == "survival":
        times = np.array([s.bag.time for s in slides])
        _, bins = qcut_bins(times, N_TIME_BINS)
        for s, b in zip(slides, bins):
            censored = bool(s.bag.label)
            s.bag.label = SurvLabel(int(b), censored)
            records.append({"bin": int(b), "censored": censored, "time": float(s.bag.time)})
        n_classes = N_TIME_BINS
    else:
        records = [{"class": int(s.bag.label)} for s in slides]
        n_classes = 2

    gen = asdict(cfg)
    gen["seed"] = int(seed)
    manifest = DatasetManifest(
        name=cfg.name, dim=cfg.dim, task=cfg.task, n_classes=n_classes,
        slides=[SlideRecord(s.bag.slide_id, f"bags/{s.bag.slide_id}.bag", s.bag.n, rec)
                for s, rec in zip(slides, records)],
        generator=gen)
    if out_dir is not None:
        out = Path(out_dir)
        (out / "bags").mkdir(parents=True, exist_ok=True)
        for s in slides:
            write_bag(out / "bags" / f"{s.bag.slide_id}.bag", s.bag)
        manifest.save(out)
    return manifest, slides


# ---------------------------------------------------------------- binning & splits


def qcut_bins(times, n_bins: int = N_TIME_BINS) -> tuple[np.ndarray, np.ndarray]:
    """Equal-population time bins.

    Returns ``(edges, bins)``: the interior quantile edges and each sample's
    bin.  Samples are ranked (stably) and the rank range split evenly, so bin
    sizes differ by at most one even with tied times.
    """
    t = np.asarray(times, dtype=np.float64).reshape(-1)
    k = t.size
    if k < n_bins:
        raise ValidationError(f"need at least {n_bins} samples to form {n_bins} bins, got {k}")
    if np.all(t == t[0]):
        raise ValidationError("all times are equal; quantile bins are degenerate")
    order = np.argsort(t, kind="stable")
    bins = np.empty(k, dtype=np.int64)
    bins[order] = (np.arange(k) * n_bins) // k
    edges = np.quantile(t, np.arange(1, n_bins) / n_bins)
    return edges, bins


@dataclass(frozen=True)
class FoldSplit:
    fold: int
    train: list[str]
    val: list[str]
    test: list[str]


def kfold_splits(strata: dict[str, int], folds: int = 5, seed: int = 0) -> list[FoldSplit]:
    """Stratified shards; fold ``f`` tests shard ``f``, validates on ``f+1``.

    ``strata`` maps slide id to its stratum (class or time bin).
    """
    if folds < 3:
        raise ValidationError("need at least 3 folds for train/val/test shards")
    by_class: dict[int, list[str]] = {}
    for sid in sorted(strata):
        by_class.setdefault(strata[sid], []).append(sid)
    for c, ids in by_class.items():
        if len(ids) < folds:
            raise ValidationError(f"class {c} has {len(ids)} slides, fewer than {folds} folds")
    rng = np.random.default_rng(seed)
    shards: list[list[str]] = [[] for _ in range(folds)]
    offset = 0
    for c in sorted(by_class):
        ids = [by_class[c][i] for i in rng.permutation(len(by_class[c]))]
        for j, sid in enumerate(ids):
            shards[(offset + j) % folds].append(sid)
        offset += len(ids)
    out = []
    for f in range(folds):
        val_shard = (f + 1) % folds
        train = [sid for s in range(folds) if s not in (f, val_shard) for sid in shards[s]]
        out.append(FoldSplit(f, train, list(shards[val_shard]), list(shards[f])))
    return out
