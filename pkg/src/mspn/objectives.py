"""Training losses and evaluation metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ConfigError, DimensionError, Tensor, _make

N_TIME_BINS = 4
HAZARD_CLAMP = 1e-7


class UndefinedMetricError(ValueError):
    """The metric has no defined value for this input (e.g. one class only)."""


@dataclass(frozen=True)
class SurvLabel:
    """Discrete survival target: time bin and censoring flag (True = alive)."""

    bin: int
    censored: bool

    def __post_init__(self):
        if not 0 <= self.bin < N_TIME_BINS:
            raise ValueError(f"time bin {self.bin} outside [0, {N_TIME_BINS})")


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """``-log softmax(logits)[label]`` for a ``(1, C)`` or ``(C,)`` logit tensor."""
    z = logits.data.reshape(-1)
    c = z.size
    if not 0 <= int(label) < c:
        raise ValueError(f"label {label} outside [0, {c})")
    top = int(np.argmax(z))
    m = z[top]
    e = np.exp(z - m)
    # log1p of the non-max terms keeps tiny losses accurate
    rest = np.delete(e, top).sum()
    lse = m + np.log1p(rest)
    loss = (m - z[label]) + np.log1p(rest)
    probs = np.exp(z - lse)
    shape = logits.shape

    def fn(g):
        grad = probs.copy()
        grad[label] -= 1.0
        return ((g[0] * grad).reshape(shape),)

    return _make(np.array([loss]), (logits,), fn, "cross_entropy")


def hazards(logits: Tensor) -> Tensor:
    return T.sigmoid(logits)


def nll_surv(h: Tensor, y: SurvLabel, beta: float = 0.5) -> Tensor:
    """Censoring-weighted discrete-time survival negative log-likelihood.

    With ``S(t) = prod_{i<=t} (1 - h_i)``:

    * censored: ``(1 - beta) * -log S(t)``
    * event:    ``beta * (-log S(t-1) - log h_t)``, ``S(-1) = 1``
    """
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")
    t = int(y.bin)
    if t >= h.size:
        raise DimensionError(f"time bin {t} outside hazard vector of length {h.size}")
    hc = T.clamp(h, HAZARD_CLAMP, 1.0 - HAZARD_CLAMP)
    log_keep = T.log(T.affine(hc, -1.0, 1.0))
    if y.censored:
        return T.affine(T.sum_all(T.take(log_keep, np.arange(t + 1))), -(1.0 - beta))
    event = T.log(T.take(hc, [t]))
    if t == 0:
        return T.affine(event, -beta)
    before = T.sum_all(T.take(log_keep, np.arange(t)))
    return T.affine(T.add(before, event), -beta)


def nll_surv_mean(hs: list[Tensor], ys: list[SurvLabel], beta: float = 0.5) -> Tensor:
    losses = [nll_surv(h, y, beta) for h, y in zip(hs, ys)]
    total = losses[0]
    for loss in losses[1:]:
        total = T.add(total, loss)
    return T.affine(total, 1.0 / len(losses))


def survival_curve(h) -> np.ndarray:
    """``S(j) = prod_{i<=j} (1 - h_i)`` for each bin."""
    h = np.clip(np.asarray(h, dtype=np.float64).reshape(-1), HAZARD_CLAMP, 1 - HAZARD_CLAMP)
    return np.cumprod(1.0 - h)


def risk_score(h) -> float:
    """Scalar risk for ranking: sum of per-bin hazards."""
    return float(np.sum(h))


def auc(scores, labels) -> float:
    """ROC AUC as the Mann-Whitney statistic; ties between classes count 1/2."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.size != y.size:
        raise DimensionError(f"{s.size} scores vs {y.size} labels")
    pos, negs = s[y], np.sort(s[~y])
    if pos.size == 0 or negs.size == 0:
        raise UndefinedMetricError("AUC needs both positive and negative samples")
    below = np.searchsorted(negs, pos, side="left")
    tied = np.searchsorted(negs, pos, side="right") - below
    return float((below.sum() + 0.5 * tied.sum()) / (pos.size * negs.size))


def c_index(risks, times, events) -> float:
    """Harrell's concordance: over pairs with ``t_i < t_j`` and an event at ``i``,
    the fraction where ``risk_i > risk_j`` (risk ties count 1/2)."""
    r = np.asarray(risks, dtype=np.float64).reshape(-1)
    t = np.asarray(times, dtype=np.float64).reshape(-1)
    e = np.asarray(events).reshape(-1).astype(bool)
    if not r.size == t.size == e.size:
        raise DimensionError("risks, times and events must have equal length")
    comparable = (t[:, None] < t[None, :]) & e[:, None]
    n = comparable.sum()
    if n == 0:
        raise UndefinedMetricError("no comparable pairs")
    diff = r[:, None] - r[None, :]
    score = (comparable & (diff > 0)).sum() + 0.5 * (comparable & (diff == 0)).sum()
    return float(score / n)
