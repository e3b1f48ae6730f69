import csv
import json
import struct

import numpy as np
import pytest

from pcgnn.cli import main
from pcgnn.geometry import PointCloud
from pcgnn.io import (ConfigError, WeightFileError, decode_weights, encode_weights, load_into, load_run_config,
                      load_weights, parse_run_config, read_point_cloud, round_to_f32, save_weights,
                      write_point_cloud)
from pcgnn.models import build_model, preset

TINY = {
    "experiment": "all-simple",
    "dataset": {"classes": 3, "train_per_class": 6, "test_per_class": 4, "points": 24},
    "hyper": {"epochs": 2, "batch_size": 6},
    "robustness": {"fractions": [0.0, 0.5]},
    "seed": 3,
}


def _model(exp="linmem-extractor", seed=0):
    return build_model(preset(exp, 8), seed)


# -- weights -----------------------------------------------------------------


@pytest.mark.parametrize("exp", ["baseline", "full-extractor", "linmem-extractor"])
def test_weight_round_trip_is_exact_at_32_bit(tmp_path, exp):
    model = _model(exp)
    path = tmp_path / "w.pcgw"
    save_weights(model, path)
    loaded = load_weights(path)
    state = model.state_dict()
    assert sorted(loaded) == sorted(state)
    assert all(np.array_equal(loaded[k], state[k].astype(np.float32)) for k in state)
    other = _model(exp, seed=9)
    load_into(other, path)
    round_to_f32(model)
    assert all(np.array_equal(other.state_dict()[k], model.state_dict()[k]) for k in state)


def test_weight_layout():
    blob = encode_weights({"b": np.ones((2,)), "a": np.zeros((1, 3))})
    assert blob[:4] == b"PCGW" and struct.unpack("<II", blob[4:12]) == (1, 2)
    assert blob[12:20] == struct.pack("<I", 1) + b"a" + struct.pack("<I", 2)[:3]


def test_weight_errors(tmp_path):
    blob = encode_weights(_model().state_dict())
    with pytest.raises(WeightFileError, match="corrupt magic"):
        decode_weights(b"XXXX" + blob[4:])
    with pytest.raises(WeightFileError, match="truncated payload"):
        decode_weights(blob[:-3])
    with pytest.raises(WeightFileError, match="unknown version"):
        decode_weights(blob[:4] + struct.pack("<I", 2) + blob[8:])
    with pytest.raises(WeightFileError, match="trailing"):
        decode_weights(blob + b"\0")
    path = tmp_path / "w.pcgw"
    save_weights(_model("linmem-extractor"), path)
    with pytest.raises(KeyError, match="missing/extra tensor"):
        load_into(_model("all-simple"), path)
    with pytest.raises(FileNotFoundError):
        load_weights(tmp_path / "absent.pcgw")


# -- point clouds ------------------------------------------------------------


def test_point_cloud_files(tmp_path):
    p = tmp_path / "axes.csv"
    p.write_text("x,y,z\n1,0,0\n0,1,0\n0,0,1\n")
    c = read_point_cloud(p)
    assert len(c) == 3 and c.features is None
    p.write_text("x,y,z,r,g,b\n1,0,0,0.5,0.5,0.5\n")
    assert read_point_cloud(p).features.shape == (1, 3)
    p.write_text("x,y,z\n1,0,0\n1,2\n")
    with pytest.raises(ValueError, match=":3:"):
        read_point_cloud(p)
    p.write_text("x,y,z\n1,0,nan\n")
    with pytest.raises(ValueError, match="non-finite"):
        read_point_cloud(p)
    p.write_text("a,b,c\n1,0,0\n")
    with pytest.raises(ValueError, match=":1:"):
        read_point_cloud(p)
    rng = np.random.default_rng(0)
    cloud = PointCloud(rng.normal(size=(5, 3)), rng.uniform(size=(5, 3)))
    write_point_cloud(cloud, p)
    back = read_point_cloud(p)
    assert np.array_equal(back.positions, cloud.positions) and np.array_equal(back.features, cloud.features)


# -- configs -----------------------------------------------------------------


def test_config_parsing(tmp_path):
    cfg = parse_run_config(TINY)
    assert cfg.dataset.points == 24 and cfg.hyper.seed == 3 and cfg.fractions == (0.0, 0.5)
    assert [b.kind for b in cfg.model_config().blocks] == ["simple-conv"] * 4
    explicit = parse_run_config({"model": {"blocks": [
        {"kind": "geo-extractor", "width": 8, "features": ["rel-pos", "distance"], "aggregators": ["max", "mean"]},
        {"kind": "simple-conv", "width": 16}], "k": 8}})
    mc = explicit.model_config()
    assert mc.k == 8 and mc.blocks[1].in_features == 16
    path = tmp_path / "c.json"
    path.write_text(json.dumps(TINY))
    assert load_run_config(path).seed == 3


@pytest.mark.parametrize("doc, where", [
    ({"experiment": "huge"}, "experiment"),
    ({"hyper": {"epochs": 0}}, "hyper/epochs"),
    ({"dataset": {"colour": 1}}, "dataset"),
    ({"experiment": "baseline", "model": {"blocks": [{"kind": "edgeconv", "width": 4}]}}, "<root>"),
    ({"model": {"blocks": [{"kind": "geo-extractor", "width": 4}]}}, "invalid config"),
])
def test_config_errors_name_the_path(doc, where):
    with pytest.raises(ConfigError, match=where):
        parse_run_config(doc)


def test_bad_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{")
    with pytest.raises(ConfigError):
        load_run_config(path)


# -- commands ----------------------------------------------------------------


def _write_config(tmp_path, **over):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({**TINY, **over}))
    return str(path)


def test_train_eval_reproducible(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", cfg, "--out", str(a)]) == 0
    assert main(["train", "--config", cfg, "--out", str(b)]) == 0
    for name in ("metrics.csv", "history.csv", "weights.pcgw"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert main(["eval", "--config", cfg, "--out", str(a)]) == 0
    train_row = list(csv.reader((a / "metrics.csv").open()))[1]
    eval_row = list(csv.reader((a / "eval_metrics.csv").open()))[1]
    assert train_row == eval_row
    hist = list(csv.reader((a / "history.csv").open()))
    assert hist[0] == ["epoch", "loss", "train_oa", "test_oa"] and len(hist) == 3


def test_cli_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"hyper": {"lr": -1}}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "hyper/lr" in capsys.readouterr().err
    cfg = _write_config(tmp_path)
    assert main(["eval", "--config", cfg, "--out", str(tmp_path / "nothing")]) == 2
    assert "missing weight file" in capsys.readouterr().err


def test_ablate_rows(tmp_path):
    cfg = _write_config(tmp_path, hyper={"epochs": 1, "batch_size": 6})
    out = tmp_path / "abl"
    assert main(["ablate", "--config", cfg, "--out", str(out), "--seeds", "2",
                 "--experiments", "all-simple", "linmem-extractor"]) == 0
    rows = list(csv.reader((out / "ablation.csv").open()))
    assert rows[0] == ["experiment", "seed", "oa", "macc"]
    assert [r[:2] for r in rows[1:]] == [["all-simple", "3"], ["all-simple", "4"], ["linmem-extractor", "3"],
                                          ["linmem-extractor", "4"], ["all-simple", "mean"],
                                          ["linmem-extractor", "mean"]]
    assert (out / "ablation.md").read_text().startswith("| rank |")


def test_bench_and_report(tmp_path):
    out = tmp_path / "bench"
    assert main(["bench", "--preset", "memory-ratio", "--no-timing", "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "memory-ratio.csv").open()))
    ref = {r["kind"]: r for r in rows}
    assert ref["edgeconv"]["V"] == "1024" and ref["edgeconv"]["k"] == "20" and ref["edgeconv"]["d_in"] == "128"
    assert float(ref["simple-conv"]["mem_ratio_vs_baseline"]) >= 15
    md = (out / "memory-ratio.md").read_text()
    assert main(["report", str(out / "memory-ratio_raw.json"), "--out", str(tmp_path / "again.md")]) == 0
    assert (tmp_path / "again.md").read_text() == md


def test_robustness_command(tmp_path):
    cfg = _write_config(tmp_path)
    out = tmp_path / "rob"
    assert main(["robustness", "--config", cfg, "--out", str(out)]) == 0
    rows = list(csv.reader((out / "robustness.csv").open()))
    assert rows[0] == ["fraction", "oa"] and [r[0] for r in rows[1:]] == ["0.0000", "0.5000"]
    first = (out / "robustness.csv").read_bytes()
    assert main(["robustness", "--config", cfg, "--out", str(out)]) == 0
    assert (out / "robustness.csv").read_bytes() == first
