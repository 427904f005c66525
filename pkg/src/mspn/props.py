"""Cross-module property suite.  ``python -m mspn.props`` prints TAP lines and
exits nonzero when any property fails.

Each case draws its own randomized instances from a seed and checks them
against a slow oracle or an algebraic identity.
"""
from __future__ import annotations

import argparse
import math
import sys
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import mil
from . import oracles
from . import tensor as T
from .data import (FeatureBag, GeneratorConfig, generate_synthetic, kfold_splits, qcut_bins, read_bag,
                   write_bag)
from .gradcheck import gradcheck
from .models import MilModel, ModelConfig
from .objectives import SurvLabel, auc, c_index, cross_entropy, hazards, nll_surv, survival_curve
from .params import ModelParams
from .pyramid import MspnSpec, mspn_forward
from .remap import SlideGeometry, aggregate, build_grid_index, compose_check
from .tensor import Tensor


@dataclass
class PropertyCase:
    name: str
    check: Callable[[np.random.Generator], None]   # raises AssertionError on failure
    instances: int
    tolerance: float
    oracle: str


@dataclass
class CaseResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _random_bag(rng, max_side=24, dim=None):
    gw, gh = int(rng.integers(1, max_side + 1)), int(rng.integers(1, max_side + 1))
    n = int(rng.integers(1, gw * gh + 1))
    cells = rng.choice(gw * gh, size=n, replace=False)
    coords = np.stack([cells % gw, cells // gw], 1) * 256
    d = dim or int(rng.integers(1, 6))
    return SlideGeometry(gw * 256, gh * 256), coords, rng.standard_normal((n, d))


def _fovs(rng, k):
    pool = [1024, 1536, 2048, 2560, 3072]
    return sorted(rng.choice(pool, size=k, replace=False).tolist(), reverse=True)


# ---------------------------------------------------------------- cases


def remap_partition(rng):
    geom, coords, h = _random_bag(rng)
    fov = int(rng.choice([1024, 1536, 2048, 3072, 5000]))
    gi = build_grid_index(coords, geom, fov, min_fov=None)
    gh, gw, idx, counts = oracles.grid_cells_brute(coords, geom.width, geom.height, fov)
    assert (gi.grid_h, gi.grid_w) == (gh, gw), "grid shape"
    assert np.array_equal(gi.idx, idx) and np.array_equal(gi.counts, counts), "bucketing"
    assert gi.counts.sum() == coords.shape[0], "partition"
    fmap = aggregate(Tensor(h), gi).map.data.reshape(h.shape[1], -1).T
    brute = oracles.cell_means_brute(h, gi.idx, gi.n_cells)
    assert np.max(np.abs(fmap - brute)) <= 1e-12, "cell means"


def remap_composition(rng):
    geom, coords, h = _random_bag(rng)
    gi = build_grid_index(coords, geom, int(rng.choice([1024, 2048, 3072])))
    r = compose_check(h, gi)
    assert r <= 1e-12, f"residual {r:.3e}"


def mspn_zero_law(rng):
    geom, coords, h = _random_bag(rng, dim=3)
    k = int(rng.choice([1, 2, 3, 5]))
    spec = MspnSpec(dim=3, fovs=_fovs(rng, k), hidden=4)
    params = ModelParams()
    spec.init_params(params, None)
    out = mspn_forward(Tensor(h), coords, geom, spec, params).features.data
    assert np.max(np.abs(out - 1.5 ** k * h)) <= 1e-12


def mspn_guidance(rng):
    geom, coords, h = _random_bag(rng, dim=3)
    spec = MspnSpec(dim=3, fovs=_fovs(rng, 3), hidden=4)
    params = ModelParams()
    spec.init_params(params, rng)
    out = mspn_forward(Tensor(h), coords, geom, spec, params)
    for p, g in zip(out.guidances, out.grids):
        assert p.shape == (1, 1, g.grid_h, g.grid_w), "guidance shape"
        assert np.all((p.data > 0) & (p.data < 1)), "guidance range"
    # gather consistency: the stage-1 residual is h * P[idx]
    first = out.guidances[0].data.reshape(-1)[out.grids[0].idx]
    single = MspnSpec(dim=3, fovs=spec.fovs[:1], hidden=4)
    one = mspn_forward(Tensor(h), coords, geom, single, params).features.data
    assert np.max(np.abs(one - h * (1 + first[:, None]))) <= 1e-12, "gather"


def mspn_equivariance(rng):
    geom, coords, h = _random_bag(rng, dim=3)
    spec = MspnSpec(dim=3, fovs=_fovs(rng, 2), hidden=4)
    params = ModelParams()
    spec.init_params(params, rng)
    perm = rng.permutation(h.shape[0])
    a = mspn_forward(Tensor(h), coords, geom, spec, params).features.data
    b = mspn_forward(Tensor(h[perm]), coords[perm], geom, spec, params).features.data
    assert np.max(np.abs(b - a[perm])) <= 1e-12


def mil_invariance(rng):
    geom, coords, h = _random_bag(rng, dim=4)
    fam = str(rng.choice(["meanpool", "maxpool", "abmil", "abmil+mspn", "concat"]))
    model = MilModel(ModelConfig(family=fam, dim=4, n_classes=2, attn_hidden=5, cgn_hidden=3,
                                 fovs=_fovs(rng, 2)), rng)
    perm = rng.permutation(h.shape[0])
    a = model.forward(FeatureBag("a", geom, coords, h))
    b = model.forward(FeatureBag("b", geom, coords[perm], h[perm]))
    assert np.max(np.abs(a.logits.data - b.logits.data)) <= 1e-12, fam
    if a.attention is not None:
        assert abs(a.attention.data.sum() - 1) <= 1e-12 and np.all(a.attention.data >= 0), "attention simplex"


def abmil_oracle(rng):
    n, d, hid = int(rng.integers(1, 7)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
    params = ModelParams()
    mil.init_abmil(params, d, 2, hidden=hid, rng=rng)
    params["abmil.head.bias"].data[:] = rng.standard_normal(2)
    h = rng.standard_normal((n, d))
    out = mil.abmil(Tensor(h), params)
    p = {k: params[k].data for k in params}
    logits, attn = oracles.abmil_reference(h, p["abmil.attn.V"], p["abmil.attn.U"], p["abmil.attn.w"],
                                           p["abmil.head.weight"], p["abmil.head.bias"])
    assert np.max(np.abs(out.logits.data[0] - logits)) <= 1e-12
    assert np.max(np.abs(out.attention.data[0] - attn)) <= 1e-12


def end_to_end_gradcheck(rng):
    geom, coords, h = _random_bag(rng, max_side=12, dim=3)
    if h.shape[0] > 12:
        keep = rng.choice(h.shape[0], 12, replace=False)
        coords, h = coords[keep], h[keep]
    spec = MspnSpec(dim=3, fovs=_fovs(rng, 2), hidden=3, min_fov=None)
    params = ModelParams()
    spec.init_params(params, rng)
    survival = bool(rng.integers(2))
    mil.init_abmil(params, 3, 4 if survival else 2, hidden=3, rng=rng)
    x = Tensor(h)
    label = SurvLabel(int(rng.integers(4)), bool(rng.integers(2))) if survival else int(rng.integers(2))

    def loss():
        logits = mil.abmil(mspn_forward(x, coords, geom, spec, params).features, params).logits
        return nll_surv(hazards(logits), label) if survival else cross_entropy(logits, label)

    rep = gradcheck(loss, params, max_slots_per_tensor=12, seed=int(rng.integers(1 << 31)))
    assert rep.passed, f"worst {rep.worst}"


def op_gradcheck(rng):
    params = ModelParams()
    x = params.add("x", rng.standard_normal((1, 2, 3, 3)))
    w = params.add("w", rng.standard_normal((2, 2, 3, 3)))
    b = params.add("b", rng.standard_normal(2))
    weights = Tensor(rng.standard_normal((2, 9)))

    def f():
        z = T.reshape(T.conv2d(x, w, b, 3, 1), (2, 9))
        return T.sum_all(T.mul(T.softmax_rows(T.tanh(z)), weights))

    assert gradcheck(f, params).passed


def metric_oracles(rng):
    k = int(rng.integers(2, 65))
    s = rng.integers(0, int(rng.integers(2, 10)), k).astype(float)
    y = rng.integers(0, 2, k)
    y[0], y[-1] = 0, 1
    assert auc(s, y) == oracles.auc_pairs(s, y), "auc"
    t = rng.integers(0, 8, k).astype(float)
    e = rng.integers(0, 2, k).astype(bool)
    e[int(np.argmin(t))] = True
    if t.min() < t.max():
        assert c_index(s, t, e) == oracles.c_index_pairs(s, t, e), "c-index"


def survival_loss(rng):
    h = rng.uniform(0, 1, 4)
    y = SurvLabel(int(rng.integers(4)), bool(rng.integers(2)))
    beta = float(rng.uniform())
    got = nll_surv(Tensor(h), y, beta).item()
    assert abs(got - oracles.nll_surv_direct(h, y.bin, y.censored, beta)) <= 1e-12, "nll"
    assert got >= 0, "nonneg"
    assert np.all(np.diff(survival_curve(h)) <= 0), "monotone"
    assert abs(nll_surv(Tensor([0.5, 0.5, 0.1, 0.1]), SurvLabel(1, False), 1.0).item()
               - 2 * math.log(2)) <= 1e-12, "hand case"


def qcut_balance(rng):
    k = int(rng.integers(4, 200))
    t = rng.integers(0, int(rng.integers(2, 50)), k).astype(float)
    if t.min() == t.max():
        return
    _, bins = qcut_bins(t, 4)
    c = np.bincount(bins, minlength=4)
    assert c.max() - c.min() <= 1


def split_laws(rng):
    folds = int(rng.integers(3, 7))
    n = int(rng.integers(2 * folds, 60))
    strata = {f"s{i}": int(rng.integers(2)) for i in range(n)}
    counts = np.bincount(list(strata.values()), minlength=2)
    if counts.min() < folds:
        return
    splits = kfold_splits(strata, folds, int(rng.integers(100)))
    tests = [i for s in splits for i in s.test]
    assert sorted(tests) == sorted(strata), "test shards partition"
    for s in splits:
        assert not (set(s.train) & set(s.val) or set(s.train) & set(s.test) or set(s.val) & set(s.test))
        assert len(s.train) + len(s.val) + len(s.test) == n


def bag_round_trip(rng):
    geom, coords, h = _random_bag(rng)
    bag = FeatureBag("x", geom, coords, h.astype(np.float32).astype(np.float64))
    with tempfile.TemporaryDirectory() as d:
        write_bag(Path(d) / "x.bag", bag)
        back = read_bag(Path(d) / "x.bag")
    assert back.features.tobytes() == bag.features.tobytes()
    assert np.array_equal(back.coords, bag.coords) and back.geom == bag.geom


def generator_replay(rng):
    cfg = GeneratorConfig(n_slides=3, dim=4, width_range=(1024, 2048), height_range=(1024, 2048))
    seed = int(rng.integers(1 << 31))
    _, a = generate_synthetic(cfg, seed)
    _, b = generate_synthetic(cfg, seed)
    for x, y in zip(a, b):
        assert x.bag.features.tobytes() == y.bag.features.tobytes()
        assert np.array_equal(x.bag.coords, y.bag.coords) and x.bag.label == y.bag.label


CASES = [
    PropertyCase("remap partition, row-major and cell means", remap_partition, 100, 1e-12,
                 "per-patch bucketing and per-cell loops"),
    PropertyCase("remap composition identity", remap_composition, 100, 1e-12, "global mean"),
    PropertyCase("mspn zero-weight 1.5^k law", mspn_zero_law, 20, 1e-12, "closed form"),
    PropertyCase("mspn guidance range and gather", mspn_guidance, 20, 1e-12, "direct recomputation"),
    PropertyCase("mspn permutation equivariance", mspn_equivariance, 20, 1e-12, "row permutation"),
    PropertyCase("mil permutation invariance", mil_invariance, 30, 1e-12, "row permutation"),
    PropertyCase("abmil loop oracle", abmil_oracle, 30, 1e-12, "unrolled loops"),
    PropertyCase("op gradcheck", op_gradcheck, 3, 1e-4, "central differences"),
    PropertyCase("abmil+mspn gradcheck", end_to_end_gradcheck, 4, 1e-4, "central differences"),
    PropertyCase("auc / c-index pair oracle", metric_oracles, 300, 0.0, "pair enumeration"),
    PropertyCase("survival loss", survival_loss, 300, 1e-12, "direct product formula"),
    PropertyCase("qcut balance", qcut_balance, 100, 0.0, "counting"),
    PropertyCase("k-fold partition laws", split_laws, 100, 0.0, "set algebra"),
    PropertyCase("bag file round trip", bag_round_trip, 30, 0.0, "byte equality"),
    PropertyCase("generator determinism", generator_replay, 3, 0.0, "replay"),
]


def run_case(case: PropertyCase, seed: int) -> CaseResult:
    t0 = time.perf_counter()
    try:
        for i in range(case.instances):
            case.check(np.random.default_rng([seed, i]))
        ok, detail = True, f"{case.instances} instances"
    except AssertionError as e:
        ok, detail = False, f"instance {i}: {e}"
    except Exception as e:      # an unexpected error is a failure too
        ok, detail = False, f"instance {i}: {type(e).__name__}: {e}"
    return CaseResult(case.name, ok, detail, time.perf_counter() - t0)


def run_all(seeds=range(1), out=sys.stdout) -> list[CaseResult]:
    """Run every case for every seed and print TAP lines."""
    results = []
    total = len(CASES) * len(seeds)
    print(f"1..{total}", file=out)
    n = 0
    for seed in seeds:
        for case in CASES:
            n += 1
            r = run_case(case, seed)
            results.append(r)
            status = "ok" if r.passed else "not ok"
            print(f"{status} {n} - {case.name} [seed {seed}] # {r.detail}, {r.seconds:.2f}s", file=out,
                  flush=True)
    return results


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m mspn.props", description="run the property suite")
    p.add_argument("--seeds", type=int, default=1, help="number of seeds (0..n-1)")
    args = p.parse_args(argv)
    results = run_all(range(args.seeds))
    return 0 if all(r.passed for r in results) else 1


if __name__ == "__main__":
    sys.exit(main())
