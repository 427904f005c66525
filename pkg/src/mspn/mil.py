"""Bag aggregators and classifier heads.

All aggregators take an ``(N, D)`` instance tensor, which may come straight
from the feature extractor or from an MSPN stack.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .params import ModelParams, uniform_fan_in
from .tensor import DimensionError, Tensor

DEFAULT_ATTN_HIDDEN = 256


class EmptyBagError(ValueError):
    """A bag with no instances was passed to an aggregator."""


@dataclass
class BagLogits:
    logits: Tensor                  # (1, C)
    attention: Tensor | None = None  # (1, N)
    bag: Tensor | None = None        # (1, D) pooled representation


def _check_bag(h: Tensor) -> None:
    if h.data.ndim != 2:
        raise DimensionError(f"bag must be (N, D), got {h.shape}")
    if h.shape[0] < 1:
        raise EmptyBagError("bag has no instances")


def meanpool(h: Tensor) -> Tensor:
    _check_bag(h)
    return T.mean_rows(h)


def maxpool(h: Tensor) -> Tensor:
    _check_bag(h)
    return T.max_rows(h)


def add_linear_params(params: ModelParams, prefix: str, n_in: int, n_out: int,
                      rng: np.random.Generator | None) -> None:
    w = np.zeros((n_out, n_in)) if rng is None else uniform_fan_in(rng, (n_out, n_in), n_in)
    params.add(f"{prefix}.weight", w)
    params.add(f"{prefix}.bias", np.zeros(n_out))


def linear(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    """``x @ W.T + b`` for a ``(1, n_in)`` or ``(N, n_in)`` input."""
    w, b = params[f"{prefix}.weight"], params[f"{prefix}.bias"]
    return T.add(T.matmul(x, T.transpose(w)), T.reshape(b, (1, b.size)))


def add_attention_params(params: ModelParams, prefix: str, dim: int, hidden: int,
                         rng: np.random.Generator | None) -> None:
    """Gated attention weights: V, U (hidden x D) and w (1 x hidden)."""
    for name, shape, fan_in in (("V", (hidden, dim), dim), ("U", (hidden, dim), dim), ("w", (1, hidden), hidden)):
        params.add(f"{prefix}.{name}", np.zeros(shape) if rng is None else uniform_fan_in(rng, shape, fan_in))


def attention_count(dim: int, hidden: int) -> int:
    return 2 * hidden * dim + hidden


def gated_attention(h: Tensor, params: ModelParams, prefix: str,
                    row_weights: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Return ``(attention (1, N), pooled bag (1, D))``.

    Instance score ``w . (tanh(V h) * sigmoid(U h))``, softmax over instances.
    ``row_weights`` (``(N, 1)``) attends over the rows of ``h * row_weights``
    without forming that product: scaling a row commutes with both
    projections and with pooling.
    """
    _check_bag(h)
    hv = T.matmul(h, T.transpose(params[f"{prefix}.V"]))
    hu = T.matmul(h, T.transpose(params[f"{prefix}.U"]))
    if row_weights is not None:
        hv, hu = T.mul(hv, row_weights), T.mul(hu, row_weights)
    a, g = T.tanh(hv), T.sigmoid(hu)
    scores = T.matmul(T.mul(a, g), T.transpose(params[f"{prefix}.w"]))   # (N, 1)
    attn = T.softmax_rows(T.transpose(scores))                              # (1, N)
    pool = attn if row_weights is None else T.mul(attn, T.transpose(row_weights))
    return attn, T.matmul(pool, h)


def abmil(h: Tensor, params: ModelParams, prefix: str = "abmil",
          row_weights: Tensor | None = None) -> BagLogits:
    attn, bag = gated_attention(h, params, f"{prefix}.attn", row_weights)
    return BagLogits(logits=linear(bag, params, f"{prefix}.head"), attention=attn, bag=bag)


def init_abmil(params: ModelParams, dim: int, n_classes: int, hidden: int = DEFAULT_ATTN_HIDDEN,
               rng: np.random.Generator | None = None, prefix: str = "abmil") -> None:
    add_attention_params(params, f"{prefix}.attn", dim, hidden, rng)
    add_linear_params(params, f"{prefix}.head", dim, n_classes, rng)


def abmil_count(dim: int, n_classes: int, hidden: int = DEFAULT_ATTN_HIDDEN) -> int:
    return attention_count(dim, hidden) + n_classes * dim + n_classes


def init_concat(params: ModelParams, dim: int, n_scales: int, n_classes: int,
                hidden: int = DEFAULT_ATTN_HIDDEN, rng: np.random.Generator | None = None,
                prefix: str = "concat") -> None:
    for i in range(n_scales):
        add_attention_params(params, f"{prefix}.attn{i}", dim, hidden, rng)
    add_linear_params(params, f"{prefix}.head", n_scales * dim, n_classes, rng)


def concat_count(dim: int, n_scales: int, n_classes: int, hidden: int = DEFAULT_ATTN_HIDDEN) -> int:
    return n_scales * attention_count(dim, hidden) + n_classes * n_scales * dim + n_classes


def concat_baseline(h_per_scale: Sequence[Tensor], params: ModelParams, prefix: str = "concat") -> BagLogits:
    """One gated-attention branch per scale; bag vectors concatenated into one head.

    The returned attention is the first (finest) scale's.
    """
    if not h_per_scale:
        raise DimensionError("concat baseline needs at least one scale")
    attns, bags = [], []
    for i, h in enumerate(h_per_scale):
        a, b = gated_attention(h, params, f"{prefix}.attn{i}")
        attns.append(a)
        bags.append(b)
    joined = bags[0] if len(bags) == 1 else T.concat_cols(bags)
    return BagLogits(logits=linear(joined, params, f"{prefix}.head"), attention=attns[0], bag=joined)
