import numpy as np
import pytest

from mspn import mil
from mspn import tensor as T
from mspn.data import FeatureBag
from mspn.gradcheck import gradcheck
from mspn.models import FAMILIES, MilModel, ModelConfig, coarse_bag, expected_param_count
from mspn.objectives import cross_entropy
from mspn.oracles import abmil_reference
from mspn.params import ModelParams
from mspn.remap import SlideGeometry, build_grid_index, compose_check
from mspn.tensor import DimensionError, Tensor


def test_pool_examples():
    assert mil.meanpool(Tensor([[1.0, 2.0]])).data.tolist() == [[1.0, 2.0]]
    assert mil.meanpool(Tensor([[0.0, 2.0], [4.0, 6.0]])).data.tolist() == [[2.0, 4.0]]
    assert mil.maxpool(Tensor([[0.0, 9.0], [5.0, 1.0]])).data.tolist() == [[5.0, 9.0]]


def test_maxpool_tie_routes_to_first_index():
    h = Tensor([[3.0, 1.0], [3.0, 2.0]], requires_grad=True)
    T.sum_all(mil.maxpool(h)).backward()
    assert h.grad.tolist() == [[1.0, 0.0], [0.0, 1.0]]


def test_empty_bag_rejected():
    # an empty instance matrix cannot even be wrapped as a tensor
    with pytest.raises(DimensionError):
        mil.meanpool(Tensor(np.zeros((0, 3))))
    with pytest.raises(DimensionError):
        mil.maxpool(Tensor(np.zeros((3,))))


def test_meanpool_agrees_with_remap_global_mean():
    rng = np.random.default_rng(1)
    coords = np.array([[x, y] for x in range(0, 4096, 256) for y in range(0, 2048, 256)])[::3]
    h = rng.standard_normal((coords.shape[0], 4))
    gi = build_grid_index(coords, SlideGeometry(4096, 2048), 1024)
    assert compose_check(h, gi) <= 1e-12
    np.testing.assert_allclose(mil.meanpool(Tensor(h)).data[0], h.mean(axis=0), rtol=0, atol=1e-15)


def _abmil(dim, hidden, classes, seed):
    params = ModelParams()
    mil.init_abmil(params, dim, classes, hidden=hidden, rng=np.random.default_rng(seed))
    return params


def test_abmil_trivial_cases():
    params = _abmil(3, 5, 2, 2)
    h = np.array([[0.3, -1.0, 2.0]])
    out = mil.abmil(Tensor(h), params)
    assert out.attention.data.tolist() == [[1.0]]
    np.testing.assert_array_equal(out.bag.data, h)
    out = mil.abmil(Tensor(np.tile(h, (4, 1))), params)
    np.testing.assert_allclose(out.attention.data, 0.25, rtol=0, atol=1e-15)


def test_abmil_matches_unrolled_oracle():
    rng = np.random.default_rng(3)
    params = _abmil(3, 5, 2, 3)
    params["abmil.head.bias"].data[:] = rng.standard_normal(2)
    h = rng.standard_normal((4, 3))
    out = mil.abmil(Tensor(h), params)
    p = {k: params[k].data for k in params}
    logits, attn = abmil_reference(h, p["abmil.attn.V"], p["abmil.attn.U"], p["abmil.attn.w"],
                                   p["abmil.head.weight"], p["abmil.head.bias"])
    assert np.max(np.abs(out.logits.data[0] - logits)) <= 1e-12
    assert np.max(np.abs(out.attention.data[0] - attn)) <= 1e-12


def test_row_weights_equal_explicit_row_scaling():
    rng = np.random.default_rng(5)
    params = _abmil(3, 5, 2, 3)
    h = params.add("h", rng.standard_normal((6, 3)))
    w = params.add("w", rng.uniform(0.5, 2.0, (6, 1)))
    lazy = mil.abmil(h, params, row_weights=w)
    eager = mil.abmil(Tensor(h.data * w.data), params)
    np.testing.assert_allclose(lazy.logits.data, eager.logits.data, rtol=0, atol=1e-12)
    np.testing.assert_allclose(lazy.attention.data, eager.attention.data, rtol=0, atol=1e-12)
    report = gradcheck(lambda: cross_entropy(mil.abmil(h, params, row_weights=w).logits, 1), params)
    assert report.passed, report.worst


@pytest.mark.parametrize("family", ["meanpool", "maxpool", "abmil", "concat"])
def test_permutation_invariance_and_attention_simplex(family):
    rng = np.random.default_rng(4)
    cfg = ModelConfig(family=family, dim=5, n_classes=3, attn_hidden=6)
    model = MilModel(cfg, np.random.default_rng(5))
    coords = np.array([[x, y] for x in range(0, 3072, 256) for y in range(0, 3072, 256)])
    pick = rng.choice(len(coords), 40, replace=False)
    bag = FeatureBag("s", SlideGeometry(3072, 3072), coords[pick], rng.standard_normal((40, 5)))
    perm = rng.permutation(40)
    shuffled = FeatureBag("t", bag.geom, bag.coords[perm], bag.features[perm])
    a, b = model.forward(bag), model.forward(shuffled)
    np.testing.assert_allclose(a.logits.data, b.logits.data, rtol=0, atol=1e-12)
    if a.attention is not None:
        w = a.attention.data
        assert np.all(w >= 0) and abs(w.sum() - 1) <= 1e-12


@pytest.mark.parametrize("agg", ["meanpool", "maxpool", "abmil"])
def test_aggregator_gradcheck(agg):
    rng = np.random.default_rng(6)
    params = ModelParams()
    h = params.add("h", rng.standard_normal((5, 3)))
    if agg == "abmil":
        mil.init_abmil(params, 3, 2, hidden=4, rng=rng)
        f = lambda: cross_entropy(mil.abmil(h, params).logits, 1)
    else:
        mil.add_linear_params(params, "head", 3, 2, rng)
        pool = getattr(mil, agg)
        f = lambda: cross_entropy(mil.linear(pool(h), params, "head"), 0)
    report = gradcheck(f, params)
    assert report.passed, report.worst


def test_concat_single_scale_and_duplicate_scales():
    rng = np.random.default_rng(7)
    h = Tensor(rng.standard_normal((6, 3)))
    params = ModelParams()
    mil.init_concat(params, 3, 2, 2, hidden=4, rng=rng)
    params["concat.attn1.V"].data[:] = params["concat.attn0.V"].data
    params["concat.attn1.U"].data[:] = params["concat.attn0.U"].data
    params["concat.attn1.w"].data[:] = params["concat.attn0.w"].data
    out = mil.concat_baseline([h, h], params)
    np.testing.assert_array_equal(out.bag.data[0, :3], out.bag.data[0, 3:])
    one = ModelParams()
    mil.init_concat(one, 3, 1, 2, hidden=4, rng=np.random.default_rng(8))
    ref = ModelParams()
    ref.add("abmil.attn.V", one["concat.attn0.V"].data)
    ref.add("abmil.attn.U", one["concat.attn0.U"].data)
    ref.add("abmil.attn.w", one["concat.attn0.w"].data)
    ref.add("abmil.head.weight", one["concat.head.weight"].data)
    ref.add("abmil.head.bias", one["concat.head.bias"].data)
    np.testing.assert_array_equal(mil.concat_baseline([h], one).logits.data, mil.abmil(h, ref).logits.data)


def test_param_counts_closed_form():
    assert mil.abmil_count(512, 2, 256) == 2 * 256 * 512 + 256 + 2 * 512 + 2
    assert mil.concat_count(512, 3, 2, 256) == 3 * (2 * 256 * 512 + 256) + 2 * 3 * 512 + 2
    for fam in FAMILIES:
        cfg = ModelConfig(family=fam, dim=16, n_classes=2, attn_hidden=8, cgn_hidden=4)
        assert MilModel(cfg, None).count_params() == expected_param_count(cfg)


def test_coarse_bag_is_cell_means():
    coords = np.array([[0, 0], [256, 0], [1024, 0]])
    gi = build_grid_index(coords, SlideGeometry(2048, 1024), 512, min_fov=None)
    cb = coarse_bag(np.array([[1.0], [3.0], [7.0]]), gi)
    assert cb.tolist() == [[2.0], [7.0]]
