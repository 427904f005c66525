"""Export coarse guidance maps and attention weights for one slide."""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import FeatureBag
from .models import MilModel
from .params import FormatError
from .tensor import no_grad


_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


@dataclass
class HeatmapFiles:
    pgms: dict[int, Path] = field(default_factory=dict)
    attention: Path | None = None
    guidance: Path | None = None


def quantize(p: np.ndarray) -> np.ndarray:
    """``round(255 * p)`` as uint8, for values in [0, 1]."""
    return np.rint(np.clip(p, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    """Binary greyscale PGM (P5, maxval 255); ``pixels`` is (rows, cols) uint8."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    # exactly one whitespace byte ends the header; pixel bytes may look like whitespace
    m = _PGM_HEADER.match(raw)
    if m is None:
        raise FormatError(f"{path}: not a binary PGM", 0)
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported", 0)
    body = raw[m.end():]
    if len(body) != w * h:
        raise FormatError(f"{path}: expected {w * h} pixel bytes, found {len(body)}", len(raw) - len(body))
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def export_heatmaps(model: MilModel, bag: FeatureBag, out_dir: str | Path) -> HeatmapFiles:
    """Write ``guidance_fov{S}.pgm`` per CGN, ``guidance.csv`` and ``attention.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with no_grad():
        res = model.forward(bag)
    files = HeatmapFiles()
    if res.guidances:
        files.guidance = out / "guidance.csv"
        with open(files.guidance, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("fov", "v", "u", "value"))
            for p, grid in zip(res.guidances, res.grids):
                g = p.data.reshape(grid.grid_h, grid.grid_w)
                path = out / f"guidance_fov{grid.fov}.pgm"
                write_pgm(path, quantize(g))
                files.pgms[grid.fov] = path
                for v in range(grid.grid_h):
                    for u in range(grid.grid_w):
                        w.writerow((grid.fov, v, u, repr(float(g[v, u]))))
    if res.attention is not None:
        files.attention = out / "attention.csv"
        weights = res.attention.data.reshape(-1)
        with open(files.attention, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("x", "y", "weight"))
            for (x, y), a in zip(bag.coords.tolist(), weights):
                w.writerow((x, y, repr(float(a))))
    return files
