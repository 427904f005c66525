import csv
import hashlib
import io
import json

import numpy as np
import pytest

from mspn import cli, props
from mspn.bench import BENCH_FIELDS, bench_bag, bench_geometry, time_call
from mspn.data import FeatureBag
from mspn.heatmap import export_heatmaps, quantize, read_pgm, write_pgm
from mspn.models import MilModel, ModelConfig
from mspn.params import FormatError
from mspn.remap import SlideGeometry

GEN = ["--slides", "15", "--dim", "8", "--min-size", "2048", "--max-size", "3072"]
TRAIN = ["--folds", "3", "--max-epochs", "2", "--patience", "1", "--cgn-hidden", "8",
         "--attn-hidden", "8", "--bootstrap-trials", "10"]


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert cli.main(["gen", "--out", str(out), *GEN]) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    with pytest.warns(UserWarning, match="reordered"):
        assert cli.main(["train", "--data", str(dataset), "--out", str(out), "--model", "abmil+mspn",
                         "--fovs", "1536,2048", *TRAIN]) == 0
    return out


def test_gen_is_byte_deterministic(dataset, tmp_path):
    assert cli.main(["gen", "--out", str(tmp_path / "again"), *GEN]) == 0
    assert tree_digest(tmp_path / "again") == tree_digest(dataset)


def test_gen_refuses_non_empty_dir_without_force(dataset, tmp_path):
    out = tmp_path / "d"
    assert cli.main(["gen", "--out", str(out), *GEN]) == 0
    assert cli.main(["gen", "--out", str(out), *GEN]) == 2
    (out / "stray.txt").write_text("x")
    assert cli.main(["gen", "--out", str(out), "--force", *GEN]) == 0
    assert not (out / "stray.txt").exists()


@pytest.mark.parametrize("argv", [
    ["gen", "--out", "x", "--slides", "0"],
    ["gen", "--out", "x", "--bogus"],
    ["train"],
    ["nosuchcommand"],
    ["bench", "--out", "x.csv", "--families", "resnet"],
    ["gradcheck", "--patches", "65"],
])
def test_usage_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main(argv) == 2


def test_train_writes_fold_dirs_and_config(trained):
    for f in range(3):
        d = trained / f"fold_{f}"
        assert (d / "checkpoint.bin").exists() and (d / "config.json").exists()
    cfg = json.loads((trained / "config.json").read_text())
    # the canonical order is descending
    assert cfg["fovs"] == [2048, 1536]
    assert (trained / "metrics.csv").exists()


def test_train_task_mismatch_is_usage_error(dataset, tmp_path):
    assert cli.main(["train", "--data", str(dataset), "--out", str(tmp_path / "r"), "--task", "survival",
                     *TRAIN]) == 2


def test_train_missing_data_is_io_error(tmp_path):
    assert cli.main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "r"), *TRAIN]) == 3


def test_eval_reproduces_fold_metrics(trained):
    assert cli.main(["eval", "--run", str(trained)]) == 0
    with open(trained / "eval.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert any(r["metric"].endswith("_mean") for r in rows)


def test_heatmap_cli_and_missing_slide(trained, tmp_path):
    assert cli.main(["heatmap", "--run", str(trained), "--slide", "slide_0000", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "guidance_fov2048.pgm").exists() and (tmp_path / "attention.csv").exists()
    assert cli.main(["heatmap", "--run", str(trained), "--slide", "nope", "--out", str(tmp_path)]) == 2


def test_eval_on_non_run_dir_is_io_error(tmp_path):
    assert cli.main(["eval", "--run", str(tmp_path)]) == 3


def test_gradcheck_passes_and_negative_control_fails(capsys):
    small = ["--dim", "6", "--patches", "9", "--cgn-hidden", "6", "--attn-hidden", "6", "--max-slots", "40"]
    assert cli.main(["gradcheck", *small]) == 0
    assert "PASS" in capsys.readouterr().out
    assert cli.main(["gradcheck", *small, "--corrupt-backward"]) == 1
    assert cli.main(["gradcheck", "--patches", "1", "--fovs", "1024", "--dim", "4", "--cgn-hidden", "4",
                     "--attn-hidden", "4"]) == 0


def test_bench_writes_one_row_per_cell(tmp_path):
    out = tmp_path / "bench.csv"
    assert cli.main(["bench", "--out", str(out), "--families", "abmil,concat", "--dims", "16,32",
                     "--patches", "50,100", "--repeats", "2", "--warmup", "1"]) == 0
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == BENCH_FIELDS
    assert len(rows) == 1 + 2 * 2 * 2
    assert all(float(r[3]) > 0 for r in rows[1:])


def test_bench_bags_are_nested_prefixes():
    geom = bench_geometry(100)
    small, big = bench_bag(40, 8, geom), bench_bag(100, 8, geom)
    np.testing.assert_array_equal(small.coords, big.coords[:40])
    with pytest.raises(ValueError):
        bench_bag(geom.width // 256 * (geom.height // 256) + 1, 8, geom)


def test_time_call_counts_repeats():
    calls = []
    med, iqr = time_call(lambda: calls.append(1), repeats=5, warmup=2)
    assert len(calls) == 7 and med >= 0 and iqr >= 0


# ---------------------------------------------------------------- heatmap


def test_pgm_round_trip(tmp_path):
    # leading and trailing pixels that read as whitespace bytes
    px = np.array([[10, 32, 9, 13], [0, 255, 128, 7], [11, 12, 32, 10]], dtype=np.uint8)
    write_pgm(tmp_path / "a.pgm", px)
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), px)
    (tmp_path / "b.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "b.pgm")
    (tmp_path / "c.pgm").write_bytes(b"P5\n2 2\n255\n\x00")
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "c.pgm")


def test_quantize_rounds_to_nearest():
    np.testing.assert_array_equal(quantize(np.array([0.0, 0.5, 1.0, 1 / 255 * 0.49])), [0, 128, 255, 0])


def test_zero_weight_heatmap_is_uniform_grey(tmp_path):
    rng = np.random.default_rng(0)
    coords = np.stack(np.meshgrid(np.arange(10), np.arange(8)), -1).reshape(-1, 2) * 256
    bag = FeatureBag("s", SlideGeometry(2560, 2048), coords, rng.standard_normal((80, 4)))
    model = MilModel(ModelConfig("abmil+mspn", 4, 2, fovs=[1536, 1024], cgn_hidden=4, attn_hidden=4), None)
    files = export_heatmaps(model, bag, tmp_path)
    for fov, path in files.pgms.items():
        px = read_pgm(path)
        assert np.all(px == 128)
    assert read_pgm(files.pgms[1024]).shape == (2, 3)
    with open(files.attention) as fh:
        w = [float(r["weight"]) for r in csv.DictReader(fh)]
    np.testing.assert_allclose(w, 1 / 80, rtol=0, atol=1e-15)


# ---------------------------------------------------------------- props


def test_property_suite_passes():
    buf = io.StringIO()
    results = props.run_all(range(1), out=buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == f"1..{len(props.CASES)}"
    assert all(r.passed for r in results), buf.getvalue()
    assert all(l.startswith("ok ") for l in lines[1:])
