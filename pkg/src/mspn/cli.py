"""Command-line entry point: ``mspn {gen,train,eval,gradcheck,bench,heatmap}``.

Exit codes: 0 success, 1 check failure, 2 usage or config error, 3 IO or
format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import shutil
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import mil
from .bench import DEFAULT_FAMILIES, bench_runtime, write_bench_csv
from .data import (PATCH, DatasetManifest, GeneratorConfig, ValidationError, generate_synthetic,
                   kfold_splits, load_bags)
from .engine import (RunConfig, TrainingError, evaluate, metric_name, run_cv, task_metric,
                     write_metrics_csv)
from .gradcheck import gradcheck
from .heatmap import export_heatmaps
from .models import FAMILIES, MilModel
from .objectives import SurvLabel, UndefinedMetricError, cross_entropy, hazards, nll_surv
from .params import FormatError, ModelParams, load_checkpoint
from .pyramid import MspnSpec, mspn_forward
from .remap import CoordinateError, SlideGeometry
from .tensor import ConfigError, Tensor, _make

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
# retried steps for slots that miss at the primary step (see gradcheck)
FALLBACK_EPS = (1e-6, 1e-4)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _str_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _optional_int(text: str) -> int | None:
    return None if text.lower() == "none" else int(text)


def _echo(title: str, cfg: dict) -> None:
    print(f"# {title}")
    print(json.dumps(cfg, indent=2, sort_keys=True), flush=True)


def _prepare_out(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigError(f"output directory {path} is not empty (use --force to overwrite)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


# ---------------------------------------------------------------- gen


def cmd_gen(args) -> int:
    cfg = GeneratorConfig(n_slides=args.slides, dim=args.dim, task=args.task, sigma=args.sigma,
                          context=args.context, motif_scale=args.motif_scale,
                          width_range=(args.min_size, args.max_size),
                          height_range=(args.min_size, args.max_size))
    cfg.validate()
    resolved = asdict(cfg)
    resolved["seed"] = args.seed
    _echo("generator config", resolved)
    out = Path(args.out)
    _prepare_out(out, args.force)
    manifest, _ = generate_synthetic(cfg, args.seed, out)
    print(f"wrote {len(manifest.slides)} bags and manifest to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- train / eval


def _run_config(args) -> RunConfig:
    cfg = RunConfig(model=args.model, lr=args.lr, max_epochs=args.max_epochs, patience=args.patience,
                    monitor=args.monitor, weight_decay=args.weight_decay, fovs=list(args.fovs),
                    cgn_hidden=args.cgn_hidden, attn_hidden=args.attn_hidden,
                    concat_fovs=list(args.concat_fovs), min_fov=args.min_fov, surv_beta=args.surv_beta,
                    folds=args.folds, seed=args.seed, bootstrap_trials=args.bootstrap_trials)
    if cfg.model == "abmil+mspn":
        # canonical order (warns when the given order differs)
        cfg.fovs = MspnSpec(dim=1, fovs=cfg.fovs, min_fov=cfg.min_fov).fovs
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    cfg = _run_config(args)
    data = Path(args.data)
    manifest = DatasetManifest.load(data)
    if args.task is not None and args.task != manifest.task:
        raise ConfigError(f"--task {args.task} does not match dataset task {manifest.task}")
    _echo("run config", json.loads(cfg.to_json()))
    out = Path(args.out)
    _prepare_out(out, args.force)
    (out / "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")
    bags = load_bags(data, manifest)
    report = run_cv(cfg, data.resolve(), out, bags=bags, manifest=manifest)
    s = report.summary()
    print(f"{cfg.model}: test {s['metric']} {s['mean']:.4f} (fold std {s['fold_std']:.4f}, "
          f"bootstrap std {s['bootstrap_std']:.4f}); params {s['params']}")
    return EXIT_OK


def _run_root(run: Path) -> Path:
    """Accept either a run root or one of its fold directories."""
    if (run / "data.json").exists():
        return run
    if (run.parent / "data.json").exists():
        return run.parent
    raise FormatError(f"{run}: not a run directory (data.json missing)", 0)


def _load_fold_model(fold_dir: Path, manifest: DatasetManifest) -> tuple[RunConfig, MilModel]:
    cfg = RunConfig.from_json((fold_dir / "config.json").read_text(encoding="utf-8"))
    model = MilModel(cfg.model_config(manifest.dim, manifest.n_classes), None)
    vec = load_checkpoint(fold_dir / "checkpoint.bin")
    if vec.size != model.count_params():
        raise FormatError(f"{fold_dir / 'checkpoint.bin'}: {vec.size} values, model needs "
                          f"{model.count_params()}", 8)
    model.params.load_vector(vec)
    return cfg, model


def cmd_eval(args) -> int:
    root = _run_root(Path(args.run))
    data = Path(args.data or json.loads((root / "data.json").read_text())["data"])
    manifest = DatasetManifest.load(data)
    bags = load_bags(data, manifest)
    cfg = RunConfig.from_json((root / "config.json").read_text(encoding="utf-8"))
    _echo("run config", json.loads(cfg.to_json()))
    splits = kfold_splits(manifest.strata(), cfg.folds, cfg.seed)
    rows, values = [], []
    name = metric_name(manifest.task)
    for split in splits:
        fold_dir = root / f"fold_{split.fold}"
        fcfg, model = _load_fold_model(fold_dir, manifest)
        test = [bags[i] for i in split.test]
        loss, scores = evaluate(model, test, manifest.task, fcfg.surv_beta)
        try:
            value = task_metric(manifest.task, scores, test)
        except UndefinedMetricError:
            value = math.nan
        values.append(value)
        rows += [(split.fold, "", "test", "loss", loss), (split.fold, "", "test", name, value)]
        print(f"fold {split.fold}: test loss {loss:.4f}, {name} {value:.4f}")
    rows.append(("all", "", "test", f"{name}_mean", float(np.mean(values))))
    write_metrics_csv(root / "eval.csv", rows)
    print(f"mean {name} {np.mean(values):.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck


def corrupt_backward(t: Tensor) -> Tensor:
    """Identity in the forward pass, doubled gradient in the backward pass.
    Used as a negative control for the gradient checker."""
    return _make(t.data.copy(), (t,), lambda g: (2.0 * g,), "corrupt")


def gradcheck_problem(dim: int, patches: int, fovs: list[int], seed: int, task: str,
                      corrupt: bool = False, cgn_hidden: int = 64, attn_hidden: int = 32):
    """Random abmil+mspn problem; returns ``(loss_fn, params)``."""
    rng = np.random.default_rng(seed)
    side = max(int(math.ceil(math.sqrt(patches))), 1)
    # room for a few cells per grid even at the largest field of view
    extent = max(side * PATCH, 2 * max(fovs))
    geom = SlideGeometry(extent, extent)
    lattice = (extent // PATCH) ** 2
    cells = rng.choice(lattice, size=patches, replace=False)
    coords = np.stack([cells % (extent // PATCH), cells // (extent // PATCH)], 1) * PATCH
    spec = MspnSpec(dim=dim, fovs=list(fovs), hidden=cgn_hidden)
    params = ModelParams()
    spec.init_params(params, rng)
    n_out = 4 if task == "survival" else 2
    mil.init_abmil(params, dim, n_out, hidden=attn_hidden, rng=rng)
    for name in params:
        if name.endswith("bias"):
            params[name].data[:] = rng.uniform(-0.1, 0.1, params[name].shape)
    x = Tensor(rng.standard_normal((patches, dim)))
    grids = spec.grids(coords, geom)
    label = SurvLabel(int(rng.integers(4)), False) if task == "survival" else int(rng.integers(2))

    def loss():
        h = mspn_forward(x, coords, geom, spec, params, grids=grids).features
        if corrupt:
            h = corrupt_backward(h)
        logits = mil.abmil(h, params).logits
        if task == "survival":
            return nll_surv(hazards(logits), label, 0.5)
        return cross_entropy(logits, label)

    return loss, params


def cmd_gradcheck(args) -> int:
    cfg = {"dim": args.dim, "patches": args.patches, "fovs": args.fovs, "seed": args.seed,
           "task": args.task, "max_slots": args.max_slots, "tol": args.tol, "eps": args.eps,
           "fallback_eps": [] if args.strict else list(FALLBACK_EPS), "cgn_hidden": args.cgn_hidden,
           "attn_hidden": args.attn_hidden}
    _echo("gradcheck config", cfg)
    if args.patches < 1 or args.patches > 64:
        raise ConfigError(f"--patches must lie in [1, 64], got {args.patches}")
    loss, params = gradcheck_problem(args.dim, args.patches, args.fovs, args.seed, args.task,
                                     corrupt=args.corrupt_backward, cgn_hidden=args.cgn_hidden,
                                     attn_hidden=args.attn_hidden)
    report = gradcheck(loss, params, eps=args.eps, tol=args.tol, max_slots_per_tensor=args.max_slots or None,
                       seed=args.seed, fallback_eps=cfg["fallback_eps"])
    for name, err in report.per_tensor().items():
        print(f"{name:32s} max rel err {err:.3e}")
    w = report.worst
    print(f"worst slot {w.name}[{w.index}]: analytic {w.analytic:.6e} numeric {w.numeric:.6e} "
          f"rel err {w.rel_err:.3e}")
    print(f"{len(report.results)} slots; max rel err at eps {args.eps:g} alone: "
          f"{report.strict_max_rel_err:.3e}; {len(report.fallback_slots)} slot(s) settled by a fallback step")
    print("PASS" if report.passed else "FAIL")
    return EXIT_OK if report.passed else EXIT_CHECK


# ---------------------------------------------------------------- bench / heatmap


def cmd_bench(args) -> int:
    for fam in args.families:
        if fam not in FAMILIES:
            raise ConfigError(f"unknown model family {fam!r}; choose from {FAMILIES}")
    cfg = {"families": args.families, "dims": args.dims, "patches": args.patches, "repeats": args.repeats,
           "warmup": args.warmup, "seed": args.seed, "fovs": args.fovs}
    _echo("bench config", cfg)
    rows = bench_runtime(args.families, args.dims, args.patches, args.repeats, args.warmup, args.seed,
                         args.fovs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_bench_csv(out, rows)
    for r in rows:
        print(f"{r.family:12s} D={r.dim:5d} N={r.n:6d} {r.median_ms:9.2f} ms (IQR {r.iqr_ms:.2f})")
    return EXIT_OK


def cmd_heatmap(args) -> int:
    root = _run_root(Path(args.run))
    data = Path(args.data or json.loads((root / "data.json").read_text())["data"])
    fold_dir = root / f"fold_{args.fold}" if (root / f"fold_{args.fold}").exists() else Path(args.run)
    manifest = DatasetManifest.load(data)
    rec = manifest.record(args.slide)
    cfg, model = _load_fold_model(fold_dir, manifest)
    _echo("run config", json.loads(cfg.to_json()))
    bag = load_bags(data, DatasetManifest(manifest.name, manifest.dim, manifest.task, manifest.n_classes,
                                          [rec], manifest.generator))[args.slide]
    files = export_heatmaps(model, bag, args.out)
    for fov, path in files.pgms.items():
        print(f"guidance fov {fov}: {path}")
    if files.attention is not None:
        print(f"attention: {files.attention}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mspn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--slides", type=int, default=200)
    g.add_argument("--dim", type=int, default=GeneratorConfig.dim)
    g.add_argument("--task", choices=("binary", "survival"), default="binary")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--sigma", type=float, default=GeneratorConfig.sigma)
    g.add_argument("--context", type=float, default=GeneratorConfig.context)
    g.add_argument("--motif-scale", type=int, default=GeneratorConfig.motif_scale)
    g.add_argument("--min-size", type=int, default=GeneratorConfig.width_range[0])
    g.add_argument("--max-size", type=int, default=GeneratorConfig.width_range[1])
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen)

    defaults = RunConfig()
    t = sub.add_parser("train", help="cross-validate one model family")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--model", choices=FAMILIES, default=defaults.model)
    t.add_argument("--task", choices=("binary", "multiclass", "survival"), default=None,
                   help="expected dataset task (checked against the manifest)")
    t.add_argument("--fovs", type=_int_list, default=defaults.fovs)
    t.add_argument("--concat-fovs", type=_int_list, default=defaults.concat_fovs)
    t.add_argument("--min-fov", type=_optional_int, default=defaults.min_fov)
    t.add_argument("--folds", type=int, default=defaults.folds)
    t.add_argument("--seed", type=int, default=defaults.seed)
    t.add_argument("--lr", type=float, default=defaults.lr)
    t.add_argument("--max-epochs", type=int, default=defaults.max_epochs)
    t.add_argument("--patience", type=int, default=defaults.patience)
    t.add_argument("--monitor", choices=("loss", "auc"), default=defaults.monitor)
    t.add_argument("--weight-decay", type=float, default=defaults.weight_decay)
    t.add_argument("--cgn-hidden", type=int, default=defaults.cgn_hidden)
    t.add_argument("--attn-hidden", type=int, default=defaults.attn_hidden)
    t.add_argument("--surv-beta", type=float, default=defaults.surv_beta)
    t.add_argument("--bootstrap-trials", type=int, default=defaults.bootstrap_trials)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="re-evaluate a trained run on its test shards")
    e.add_argument("--run", required=True)
    e.add_argument("--data", default=None, help="dataset directory (default: the one used for training)")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of the abmil+mspn loss")
    c.add_argument("--dim", type=int, default=16)
    c.add_argument("--patches", type=int, default=20)
    c.add_argument("--fovs", type=_int_list, default=[3072, 2048, 1536])
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--task", choices=("binary", "survival"), default="binary")
    c.add_argument("--max-slots", type=int, default=100, help="sample this many slots per tensor (0: all)")
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--eps", type=float, default=1e-5)
    c.add_argument("--strict", action="store_true", help="no fallback steps for kinks / rounding")
    c.add_argument("--cgn-hidden", type=int, default=64)
    c.add_argument("--attn-hidden", type=int, default=32)
    c.add_argument("--corrupt-backward", action="store_true", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="per-slide forward runtime")
    b.add_argument("--families", type=_str_list, default=list(DEFAULT_FAMILIES))
    b.add_argument("--dims", type=_int_list, default=[512, 768, 1024, 1280, 1536, 2048])
    b.add_argument("--patches", type=_int_list, default=[1000, 2000, 4000])
    b.add_argument("--fovs", type=_int_list, default=[3072, 2048, 1536])
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--warmup", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)

    h = sub.add_parser("heatmap", help="export guidance maps and attention for one slide")
    h.add_argument("--run", required=True)
    h.add_argument("--slide", required=True)
    h.add_argument("--out", required=True)
    h.add_argument("--fold", type=int, default=0)
    h.add_argument("--data", default=None)
    h.set_defaults(func=cmd_heatmap)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValidationError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, CoordinateError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except TrainingError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
