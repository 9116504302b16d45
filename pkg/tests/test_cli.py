import csv
import json
import subprocess
import sys

import pytest

from d2rec.cli import load_config, main

FAST = {
    "seed": 1,
    "embed": {"walks_per_node": 3, "walk_length": 8, "window": 2, "sgns_epochs": 1, "dim": 8},
    "train": {"batch_size": 256, "lr": 0.01, "max_epochs": 2, "patience": 1},
    "eval": {"candidates_per_positive": 20},
}


def write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = write_cfg(root, FAST)
    out = root / "run"
    codes = [main([cmd, "--config", cfg, "--out", str(out)])
             for cmd in ("synth", "split", "embed", "train", "eval")]
    return out, codes, cfg


def test_pipeline_emits_four_subset_rows(pipeline):
    out, codes, _ = pipeline
    assert codes == [0] * 5
    with open(out / "eval" / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["subset_popularity"] for r in rows] == ["2", "3", "5", "10"]
    for r in rows:
        assert 0.0 <= float(r["hr@10"]) <= 1.0 and float(r["mse"]) >= 0.0


def test_every_stage_records_resolved_config(pipeline):
    out, _, _ = pipeline
    for stage in ("synth", "split", "embed", "train", "eval"):
        cfg = json.loads((out / stage / "config.json").read_text())
        assert cfg["seed"] == 1 and cfg["train"]["seed"] == 1 and cfg["train"]["d_emb"] == 8


def test_ablate_table_schema(pipeline, tmp_path):
    out, _, cfg = pipeline
    assert main(["ablate", "--config", cfg, "--out", str(out)]) == 0
    with open(out / "ablate" / "ablation.csv") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    assert header[0] == "variant" and len(body) == 3
    assert {r[0] for r in body} == {"full", "no_network_embeddings", "no_disentanglement"}
    for n in (2, 3, 5, 10):
        assert f"mae@{n}" in header and f"mse@{n}" in header
    assert "mse@oracle" in header


def test_gradcheck_passes(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    line = capsys.readouterr().out
    err = float(line.split("max relative error ")[1].split()[0])
    assert err < 1e-4
    assert json.loads((tmp_path / "gradcheck" / "result.json").read_text())["passed"]


def test_gradcheck_failure_exit_code(tmp_path):
    cfg = write_cfg(tmp_path, {"gradcheck": {"tolerance": 1e-30}})
    assert main(["gradcheck", "--config", cfg, "--out", str(tmp_path)]) == 3


def test_missing_artifact_names_producer(tmp_path, capsys):
    assert main(["embed", "--out", str(tmp_path / "empty")]) == 1
    assert "d2rec split" in capsys.readouterr().err
    assert main(["eval", "--out", str(tmp_path / "empty")]) == 1


@pytest.mark.parametrize("cfg, where", [
    ({"train": {"lrr": 0.1}}, "config.train.lrr"),
    ({"train": {"lr": "fast"}}, "config.train.lr"),
    ({"train": {"seed": 3}}, "config.train.seed"),
    ({"train": {"patience": 50, "max_epochs": 10}}, "config.train"),
    ({"train": {"variant": "nope"}}, "config.train"),
    ({"split": {"popularities": [2, 0]}}, "config.split"),
    ({"embed": {"dim": 16}, "train": {"d_emb": 8}}, "config.train.d_emb"),
    ({"bogus": {}}, "config.bogus"),
])
def test_config_errors_report_field_path(tmp_path, capsys, cfg, where):
    assert main(["synth", "--config", write_cfg(tmp_path, cfg), "--out", str(tmp_path)]) == 1
    assert where in capsys.readouterr().err


def test_seed_flag_overrides_config(tmp_path):
    cfg = load_config(write_cfg(tmp_path, {"seed": 4}), seed=9)
    assert cfg.seed == 9 and cfg.synth.seed == 9 and cfg.eval.seed == 9
    assert load_config(write_cfg(tmp_path, {"seed": 4})).train.seed == 4


def test_runtime_failure_exit_code(tmp_path):
    bad = tmp_path / "r.csv"
    bad.write_text("u1,i1,9\n")
    cfg = write_cfg(tmp_path, {"paths": {"ratings": str(bad)}})
    assert main(["split", "--config", cfg, "--out", str(tmp_path)]) == 2


def test_usage_error_exit_code():
    proc = subprocess.run([sys.executable, "-m", "d2rec", "frobnicate"], capture_output=True)
    assert proc.returncode == 1


def test_missing_user_data_file_is_config_error(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"paths": {"ratings": str(tmp_path / "nope.csv")}})
    assert main(["split", "--config", cfg, "--out", str(tmp_path)]) == 1
    assert "config.paths.ratings" in capsys.readouterr().err
