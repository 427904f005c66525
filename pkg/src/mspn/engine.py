"""Optimisation, early stopping, cross-validated training and evaluation."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import DatasetManifest, FeatureBag, FoldSplit, kfold_splits, load_bags
from .models import FAMILIES, MilModel, ModelConfig
from .objectives import SurvLabel, UndefinedMetricError, auc, c_index, risk_score
from .params import ModelParams, save_checkpoint
from .tensor import ConfigError, backward, no_grad

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


@dataclass
class RunConfig:
    model: str = "abmil+mspn"
    lr: float = 2e-4
    max_epochs: int = 150
    patience: int = 10
    monitor: str = "loss"           # loss | auc
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-5
    fovs: list[int] = field(default_factory=lambda: [3072, 2048, 1536])
    cgn_hidden: int = 64
    attn_hidden: int = 256
    concat_fovs: list[int] = field(default_factory=lambda: [512, 1024])
    min_fov: int | None = 1024
    surv_beta: float = 0.5
    batch_size: int = 1
    folds: int = 5
    seed: int = 0
    bootstrap_trials: int = 2000

    def validate(self) -> None:
        if self.model not in FAMILIES:
            raise ConfigError(f"unknown model {self.model!r}; choose from {FAMILIES}")
        if self.monitor not in ("loss", "auc"):
            raise ConfigError(f"monitor must be 'loss' or 'auc', got {self.monitor!r}")
        if not 0.0 <= self.surv_beta <= 1.0:
            raise ConfigError(f"surv_beta must lie in [0, 1], got {self.surv_beta}")
        if self.batch_size != 1:
            raise ConfigError("only one bag per step is supported")
        if self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("max_epochs and patience must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls(**json.loads(text))

    def model_config(self, dim: int, n_classes: int) -> ModelConfig:
        return ModelConfig(family=self.model, dim=dim, n_classes=n_classes, fovs=list(self.fovs),
                           cgn_hidden=self.cgn_hidden, attn_hidden=self.attn_hidden,
                           concat_fovs=tuple(self.concat_fovs), min_fov=self.min_fov)


# ---------------------------------------------------------------- optimisation


def cosine_lr(base_lr: float, epoch: int, max_epochs: int) -> float:
    """Cosine decay from ``base_lr`` at epoch 0 to exactly 0 at ``max_epochs``."""
    epoch = min(max(epoch, 0), max_epochs)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / max_epochs))


class AdamW:
    """Adam with decoupled weight decay (decay applied to every parameter)."""

    def __init__(self, params: ModelParams, lr: float = 2e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-5):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        shrink = 1.0 - self.lr * self.weight_decay
        for name, p in self.params.items():
            p.data *= shrink
            if p.grad is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        self.params.zero_grad()


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without improvement."""

    def __init__(self, patience: int = 10, mode: str = "min"):
        self.patience = patience
        self.mode = mode
        self.best: float | None = None
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, value: float, epoch: int) -> bool:
        """Record an epoch's monitored value; return True if it is a new best."""
        better = (self.best is None or (value < self.best if self.mode == "min" else value > self.best))
        if better:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
        else:
            self.bad_epochs += 1
        return better

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


# ---------------------------------------------------------------- metrics


def task_metric(task: str, preds: np.ndarray, bags: Sequence[FeatureBag]) -> float:
    """AUC for classification (macro one-vs-rest if multiclass), C-index for survival."""
    if task == "survival":
        times, events = survival_targets(bags)
        return c_index(preds, times, events)
    labels = np.array([int(b.label) for b in bags])
    return auc(preds, labels) if preds.ndim == 1 else macro_auc(preds, labels)


def macro_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean one-vs-rest AUC over classes."""
    return float(np.mean([auc(scores[:, c], labels == c) for c in range(scores.shape[1])]))


def survival_targets(bags: Sequence[FeatureBag]) -> tuple[np.ndarray, np.ndarray]:
    times = np.array([b.time if b.time is not None else b.label.bin for b in bags], dtype=np.float64)
    events = np.array([not b.label.censored for b in bags])
    return times, events


def predict_scores(logits: np.ndarray, task: str, n_classes: int):
    """Scalar (or per-class) score used for ranking metrics."""
    z = logits.reshape(-1)
    if task == "survival":
        return risk_score(0.5 * np.tanh(0.5 * z) + 0.5)
    e = np.exp(z - z.max())
    p = e / e.sum()
    return p[1] if n_classes == 2 else p


def bootstrap_std(metric: Callable, predictions, labels, trials: int = 2000, seed: int = 0,
                  resamples=None) -> float:
    """Sample standard deviation of ``metric`` under resampling with replacement.

    ``labels`` may be one array or a tuple of arrays resampled together (e.g.
    times and events).  Trials where the metric is undefined are skipped.
    ``resamples`` overrides the random index draws.
    """
    preds = np.asarray(predictions)
    label_parts = labels if isinstance(labels, tuple) else (labels,)
    label_parts = tuple(np.asarray(a) for a in label_parts)
    k = preds.shape[0]
    if k < 2:
        raise ValueError("bootstrap needs at least 2 samples")
    if resamples is None:
        rng = np.random.default_rng(seed)
        resamples = (rng.integers(0, k, size=k) for _ in range(trials))
    values = []
    for idx in resamples:
        idx = np.asarray(idx)
        try:
            lab = tuple(a[idx] for a in label_parts)
            values.append(metric(preds[idx], *lab))
        except UndefinedMetricError:
            continue
    if not values:
        raise UndefinedMetricError("every bootstrap trial was degenerate")
    if len(values) == 1:
        return 0.0
    return float(np.std(values, ddof=1))


# ---------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_metric: float | None


@dataclass
class FoldResult:
    fold: int
    history: list[EpochRecord]
    best_epoch: int
    test_ids: list[str]
    test_scores: list
    test_metric: float
    test_bootstrap_std: float
    n_params: int
    flops_est: int
    ms_per_slide: dict
    params: ModelParams | None = None


def evaluate(model: MilModel, bags: Sequence[FeatureBag], task: str, beta: float):
    """Mean loss and per-bag scores, without building a graph."""
    losses, scores = [], []
    with no_grad():
        for bag in bags:
            out = model.forward(bag)
            losses.append(model.loss(out, bag.label, beta).item())
            scores.append(predict_scores(out.logits.data, task, model.cfg.n_classes))
    return float(np.mean(losses)), np.array(scores)


def _safe_metric(task, scores, bags):
    try:
        return task_metric(task, scores, bags)
    except UndefinedMetricError:
        return None


def train_fold(cfg: RunConfig, bags: dict[str, FeatureBag], split: FoldSplit, task: str,
               n_classes: int, out_dir: str | Path | None = None) -> FoldResult:
    """Train one fold with early stopping and report test metrics at the best epoch."""
    cfg.validate()
    dim = next(iter(bags.values())).dim
    if task == "survival" and not isinstance(bags[split.train[0]].label, SurvLabel):
        raise ConfigError("survival task needs survival labels")
    rng = np.random.default_rng([cfg.seed, split.fold])
    model = MilModel(cfg.model_config(dim, n_classes), rng)
    opt = AdamW(model.params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps,
                weight_decay=cfg.weight_decay)
    stopper = EarlyStopping(cfg.patience, "min" if cfg.monitor == "loss" else "max")
    train = [bags[i] for i in split.train]
    val = [bags[i] for i in split.val]
    test = [bags[i] for i in split.test]
    best = model.params.to_vector()
    history: list[EpochRecord] = []
    step_times: list[float] = []

    for epoch in range(cfg.max_epochs):
        opt.lr = cosine_lr(cfg.lr, epoch, cfg.max_epochs)
        order = rng.permutation(len(train))
        total = 0.0
        for step, i in enumerate(order):
            bag = train[i]
            t0 = time.perf_counter()
            out = model.forward(bag)
            loss = model.loss(out, bag.label, cfg.surv_beta)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step} (slide {bag.slide_id})")
            opt.zero_grad()
            backward(loss)
            opt.step()
            step_times.append(time.perf_counter() - t0)
            total += value
        val_loss, val_scores = evaluate(model, val, task, cfg.surv_beta)
        val_metric = _safe_metric(task, val_scores, val)
        history.append(EpochRecord(epoch, opt.lr, total / len(train), val_loss, val_metric))
        monitored = val_loss if cfg.monitor == "loss" else (val_metric if val_metric is not None else -math.inf)
        if stopper.update(monitored, epoch):
            best = model.params.to_vector()
        log.debug("fold %d epoch %d train %.4f val %.4f", split.fold, epoch, total / len(train), val_loss)
        if stopper.should_stop:
            break

    model.params.load_vector(best)
    _, test_scores = evaluate(model, test, task, cfg.surv_beta)
    test_metric = _safe_metric(task, test_scores, test)
    boot = math.nan
    if test_metric is not None:
        if task == "survival":
            labels = survival_targets(test)
            fn = c_index
        else:
            labels = np.array([int(b.label) for b in test])
            fn = auc if n_classes == 2 else macro_auc
        try:
            boot = bootstrap_std(fn, test_scores, labels, cfg.bootstrap_trials, seed=cfg.seed + split.fold)
        except UndefinedMetricError:
            pass
    st = np.array(step_times) * 1000.0
    grid_sizes = []
    if model.mspn is not None and train:
        grid_sizes = [g.n_cells for g in
                      (model.grid(train[0], s, model.mspn.min_fov) for s in model.mspn.fovs)]
    n_mean = int(np.mean([b.n for b in train])) if train else 0
    result = FoldResult(
        fold=split.fold, history=history, best_epoch=stopper.best_epoch,
        test_ids=list(split.test), test_scores=np.asarray(test_scores).tolist(),
        test_metric=math.nan if test_metric is None else test_metric, test_bootstrap_std=boot,
        n_params=model.count_params(), flops_est=model.flops(n_mean, grid_sizes),
        ms_per_slide={"median": float(np.median(st)) if st.size else 0.0,
                      "iqr": float(np.subtract(*np.percentile(st, [75, 25]))) if st.size else 0.0},
        params=model.params)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")
        save_checkpoint(model.params, out / "checkpoint.bin")
        write_metrics_csv(out / "metrics.csv", fold_rows(result, task))
    return result


# ---------------------------------------------------------------- reporting


METRIC_FIELDS = ("fold", "epoch", "split", "metric", "value")


def metric_name(task: str) -> str:
    return "c_index" if task == "survival" else "auc"


def fold_rows(result: FoldResult, task: str) -> list[tuple]:
    rows = []
    for h in result.history:
        rows.append((result.fold, h.epoch, "train", "loss", h.train_loss))
        rows.append((result.fold, h.epoch, "val", "loss", h.val_loss))
        if h.val_metric is not None:
            rows.append((result.fold, h.epoch, "val", metric_name(task), h.val_metric))
    name = metric_name(task)
    rows.append((result.fold, result.best_epoch, "test", name, result.test_metric))
    rows.append((result.fold, result.best_epoch, "test", f"{name}_bootstrap_std", result.test_bootstrap_std))
    return rows


def aggregate_rows(results: Sequence[FoldResult], task: str) -> list[tuple]:
    name = metric_name(task)
    vals = np.array([r.test_metric for r in results])
    boots = np.array([r.test_bootstrap_std for r in results])
    return [
        ("all", "", "test", f"{name}_mean", float(np.mean(vals))),
        ("all", "", "test", f"{name}_fold_std", float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0),
        ("all", "", "test", f"{name}_bootstrap_std", float(np.mean(boots))),
        ("all", "", "model", "params", results[0].n_params),
    ]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(path: str | Path, rows: Sequence[tuple]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


@dataclass
class RunReport:
    config: RunConfig
    folds: list[FoldResult]
    task: str

    @property
    def mean_metric(self) -> float:
        return float(np.mean([f.test_metric for f in self.folds]))

    def summary(self) -> dict:
        return {
            "model": self.config.model,
            "metric": metric_name(self.task),
            "mean": self.mean_metric,
            "fold_std": float(np.std([f.test_metric for f in self.folds], ddof=1)) if len(self.folds) > 1 else 0.0,
            "bootstrap_std": float(np.mean([f.test_bootstrap_std for f in self.folds])),
            "params": self.folds[0].n_params,
            "flops_est": self.folds[0].flops_est,
            "ms_per_slide": [f.ms_per_slide for f in self.folds],
            "best_epochs": [f.best_epoch for f in self.folds],
            "epochs_run": [len(f.history) for f in self.folds],
        }


def run_cv(cfg: RunConfig, data_dir: str | Path, out_dir: str | Path | None = None,
           bags: dict[str, FeatureBag] | None = None, manifest: DatasetManifest | None = None) -> RunReport:
    """Cross-validate one model family; writes ``fold_<f>/`` run directories and
    an aggregate ``metrics.csv`` when ``out_dir`` is given."""
    cfg.validate()
    manifest = manifest or DatasetManifest.load(data_dir)
    bags = bags or load_bags(data_dir, manifest)
    splits = kfold_splits(manifest.strata(), cfg.folds, cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")
        (out / "data.json").write_text(json.dumps({"data": str(data_dir)}) + "\n", encoding="utf-8")
    results = []
    for split in splits:
        fold_dir = out / f"fold_{split.fold}" if out is not None else None
        results.append(train_fold(cfg, bags, split, manifest.task, manifest.n_classes, fold_dir))
        log.info("fold %d: test %s = %.4f", split.fold, metric_name(manifest.task), results[-1].test_metric)
    report = RunReport(cfg, results, manifest.task)
    if out is not None:
        rows = [row for r in results for row in fold_rows(r, manifest.task)]
        write_metrics_csv(out / "metrics.csv", rows + aggregate_rows(results, manifest.task))
        (out / "report.json").write_text(json.dumps(report.summary(), indent=2) + "\n", encoding="utf-8")
    return report
