"""Named, flattenable parameter collections and the checkpoint format."""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import Tensor

CHECKPOINT_MAGIC = b"MSPNCKP1"


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ModelParams:
    """Ordered mapping of parameter name to leaf :class:`Tensor`.

    The flat view concatenates all tensors in insertion order, which is what
    checkpoints store and what gradient checking perturbs slot by slot.
    """

    def __init__(self):
        self._tensors: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def count(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def to_vector(self) -> np.ndarray:
        if not self._tensors:
            return np.zeros(0)
        return np.concatenate([t.data.reshape(-1) for t in self._tensors.values()])

    def grad_vector(self) -> np.ndarray:
        parts = [np.zeros(t.size) if t.grad is None else t.grad.reshape(-1)
                 for t in self._tensors.values()]
        return np.concatenate(parts) if parts else np.zeros(0)

    def load_vector(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.count():
            raise ValueError(f"vector has {vec.size} values, model has {self.count()}")
        pos = 0
        for t in self._tensors.values():
            t.data = vec[pos:pos + t.size].reshape(t.shape).copy()
            pos += t.size

    def slots(self) -> Iterator[tuple[str, int]]:
        """Every scalar slot as ``(tensor name, flat index)``."""
        for name, t in self._tensors.items():
            for i in range(t.size):
                yield name, i

    def copy(self) -> "ModelParams":
        out = ModelParams()
        for name, t in self._tensors.items():
            out.add(name, t.data.copy())
        return out


def uniform_fan_in(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    vec = params.to_vector()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", vec.size))
        fh.write(vec.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> np.ndarray:
    """Read a checkpoint into a flat float64 vector."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    if len(raw) < 16:
        raise FormatError("truncated checkpoint header", len(raw))
    (n,) = struct.unpack_from("<Q", raw, 8)
    if len(raw) != 16 + 8 * n:
        raise FormatError(f"checkpoint declares {n} values but holds {(len(raw) - 16) // 8}", 16)
    return np.frombuffer(raw, dtype="<f8", offset=16, count=n).astype(np.float64)
