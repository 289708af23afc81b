import json

import numpy as np
import pytest

from hmcseg.cli import main, parse_grid
from hmcseg.io import PredictionDump, read_dump, write_dump


def run(capsys, *argv):
    rc = main(list(argv))
    out, err = capsys.readouterr()
    return rc, out, err


@pytest.fixture
def flat_dump(tmp_path, kitti):
    rng = np.random.default_rng(0)
    gt = rng.integers(0, 19, 400)
    z = rng.normal(size=(400, 19)) * 2
    z[np.arange(400), gt] += 2.5
    path = tmp_path / "flat.hseg"
    write_dump(path, PredictionDump(gt=gt, logits=z))
    return path


def test_parse_grid():
    g = parse_grid("0:1:0.1")
    assert len(g) == 11 and g[0] == 0.0 and g[-1] == 1.0
    assert g[3] == 0.3
    assert parse_grid("0,0.5,1") == [0.0, 0.5, 1.0]
    assert parse_grid("0:1:0.3") == [0.0, 0.3, 0.6, 0.9]


def test_validate_builtin(capsys):
    rc, out, _ = run(capsys, "hierarchy", "validate")
    assert rc == 0
    assert "h=4" in out and "|λ|=28" in out and "n=19" in out


def test_validate_bad_file(capsys, tmp_path):
    p = tmp_path / "bad.hier"
    p.write_text("any\nroad > any\nroad > any\n")
    rc, _, err = run(capsys, "hierarchy", "validate", str(p))
    assert rc == 2
    assert "line 3" in err


def test_hierarchy_env(capsys, tmp_path, monkeypatch):
    p = tmp_path / "small.hier"
    p.write_text("any\nstatic > any\nroad > static\nsidewalk > static\n")
    monkeypatch.setenv("HMCSEG_HIERARCHY", str(p))
    rc, out, _ = run(capsys, "hierarchy", "validate")
    assert rc == 0 and "n=2" in out


def test_show_formats(capsys):
    rc, out, _ = run(capsys, "hierarchy", "show", "--format", "json")
    assert rc == 0 and len(json.loads(out)["nodes"]) == 28
    rc, out, _ = run(capsys, "hierarchy", "show", "--format", "csv")
    assert out.splitlines()[1] == "0,car,vehicle,0"


def test_usage_errors(capsys):
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys)[0] == 1
    assert run(capsys, "eval")[0] == 1
    assert run(capsys, "eval", "x", "--alpha-grid", "1:0:0.1")[0] == 1


def test_data_errors(capsys, tmp_path, flat_dump):
    assert run(capsys, "eval", str(tmp_path / "missing.hseg"))[0] == 2
    bad = tmp_path / "bad.hseg"
    bad.write_bytes(b"garbage-garbage-garbage")
    rc, _, err = run(capsys, "eval", str(bad))
    assert rc == 2 and "magic" in err
    assert run(capsys, "lift", str(flat_dump), "--out", str(tmp_path / "o"), "--height", "3")[0] == 2


def test_eval_leaf_only_hiou_equals_miou(capsys, tmp_path, flat_dump):
    # flat logits would be lifted; a pred block pins the predictions to leaves
    d = read_dump(flat_dump)
    leaf = tmp_path / "leaf.hseg"
    write_dump(leaf, PredictionDump(gt=d.gt, logits=d.logits, pred=d.logits.argmax(1)))
    rc, out, _ = run(capsys, "eval", str(leaf), "--alpha-grid", "0:1:0.1", "--format", "json")
    assert rc == 0
    s = json.loads(out)["scalars"]
    hious = [s[f"hIoU@{a:g}"] for a in parse_grid("0:1:0.1")]
    assert all(v == s["mIoU"] for v in hious)


def test_eval_hier_dump_leaf_only(capsys, tmp_path, kitti):
    rng = np.random.default_rng(1)
    gt = rng.integers(0, 19, 200)
    z = rng.normal(size=(200, 28))
    z[:, 19:] = -30.0  # superclasses never win the argmax
    path = tmp_path / "hier.hseg"
    write_dump(path, PredictionDump(gt=gt, logits=z))
    rc, out, _ = run(capsys, "eval", str(path), "--format", "json")
    s = json.loads(out)["scalars"]
    assert rc == 0
    assert {s[f"hIoU@{a:g}"] for a in parse_grid("0:1:0.1")} == {s["mIoU"]}


def test_eval_artifacts_byte_identical(capsys, tmp_path, flat_dump):
    for tag in ("a", "b"):
        assert run(capsys, "eval", str(flat_dump), "--seed", "3", "--out", str(tmp_path / tag))[0] == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "report.json" in files and "reliability.csv" in files
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_eval_with_label_file(capsys, tmp_path, flat_dump):
    d = read_dump(flat_dump)
    raw = np.where(d.gt == 0, 10, 40).astype("<u4") | np.uint32(0x00030000)
    (tmp_path / "x.label").write_bytes(raw.tobytes())
    (tmp_path / "map.txt").write_text("10 car\n40 road\n")
    rc, out, _ = run(
        capsys, "eval", str(flat_dump), "--labels", str(tmp_path / "x.label"),
        "--learning-map", str(tmp_path / "map.txt"), "--format", "csv",
    )
    assert rc == 0 and out.startswith("metric,value")
    rc, _, err = run(capsys, "eval", str(flat_dump), "--labels", str(tmp_path / "x.label"))
    assert rc == 2 and "learning-map" in err


def test_lift_writes_predictions(capsys, tmp_path, flat_dump, kitti):
    out = tmp_path / "lifted.hseg"
    rc, text, _ = run(capsys, "lift", str(flat_dump), "--out", str(out))
    assert rc == 0 and "level" in text
    d = read_dump(out)
    assert d.pred is not None and d.confidence is not None
    leaf = d.logits.argmax(1)
    for l, p in zip(leaf[:50], d.pred[:50]):
        assert p in [l, *kitti.superclasses(int(l))]


def test_encode(capsys, tmp_path):
    p = tmp_path / "labels.txt"
    p.write_text("car\n0\n-1\n")
    rc, out, _ = run(capsys, "encode", str(p), "--eta-mode", "formula")
    lines = out.splitlines()
    assert rc == 0 and len(lines) == 4
    row = [float(v) for v in lines[1].split(",")]
    assert sorted(v for v in row if v) == [0.25, 0.5, 0.75, 1.0]
    p.write_text("vehicle\n")
    assert run(capsys, "encode", str(p))[0] == 2


def test_gen_and_train(capsys, tmp_path):
    common = ["--points-per-class", "2", "--seed", "1"]
    assert run(capsys, "gen-scenes", "--count", "12", "--out", str(tmp_path / "tr"), *common)[0] == 0
    assert run(capsys, "gen-scenes", "--count", "2", "--out", str(tmp_path / "te"), "--points-per-class", "2",
               "--seed", "2")[0] == 0
    assert len(list((tmp_path / "tr").glob("*.hseg"))) == 12
    rc, out, _ = run(capsys, "train-toy", "--scenes", str(tmp_path / "tr"), "--test-scenes", str(tmp_path / "te"),
                     "--epochs", "3", "--out", str(tmp_path / "m"))
    assert rc == 0 and "mIoU" in out
    for name in ("train_log.csv", "model.npz", "predictions.hseg", "report.json"):
        assert (tmp_path / "m" / name).exists()
    assert (tmp_path / "m" / "train_log.csv").read_text().startswith("epoch,lr,train_loss,val_loss,val_miou\n")


@pytest.mark.slow
def test_experiment_crossover(capsys, tmp_path):
    rc, out, _ = run(capsys, "experiment", "crossover", "--seed", "7", "--out", str(tmp_path / "x"))
    assert rc == 0
    assert "hmc" in out and "vanilla" in out
    for name in ("hmc_report.json", "vanilla_report.json", "extras.json"):
        assert (tmp_path / "x" / name).exists()
    assert json.loads((tmp_path / "x" / "hmc_report.json").read_text())["scalars"]["hIoU@1"] is not None
