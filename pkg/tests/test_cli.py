import json
import subprocess
import sys
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from tatkit.cli import load_config, main
from tatkit.simworld import Scenario

TINY = {
    "encoder": {"strides": [4, 4, 2], "channels": [4, 8, 16]},
    "decoder": {"d_model": 16, "n_layers": 1, "n_heads": 2},
    "gru": {"hidden": 16},
    "train": {"epochs": 2, "learning_rate": 0.001, "milestones": [1], "batch_size": 16,
              "max_steps": 6},
    "data": {"selftest_routes": 1},
}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_json(root / "tiny.json", TINY)
    assert main(["generate", "--routes", "2", "--seed", "40", "--out", str(root / "data"),
                 "--config", cfg]) == 0
    assert main(["generate", "--routes", "2", "--seed", "900", "--routes-only",
                 "--out", str(root / "heldout"), "--config", cfg]) == 0
    assert main(["train", "--config", cfg, "--data", str(root / "data"),
                 "--out", str(root / "run")]) == 0
    return root, cfg


def test_generate_zero_routes(tmp_path):
    assert main(["generate", "--routes", "0", "--out", str(tmp_path)]) == 0
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["n_samples"] == 0 and m["n_routes"] == 0
    assert (tmp_path / "config.json").exists()


def test_generate_deterministic(tmp_path, workspace):
    root, cfg = workspace
    assert main(["generate", "--routes", "2", "--seed", "40", "--out", str(tmp_path),
                 "--config", cfg]) == 0
    for name in ("manifest.json", "shard-0000.tatd", "config.json"):
        assert (tmp_path / name).read_bytes() == (root / "data" / name).read_bytes()


def test_generate_short_lengths(workspace):
    root, _ = workspace
    files = sorted((root / "data" / "routes").glob("*.json"))
    assert len(files) == 2
    for f in files:
        assert 100.0 <= Scenario.load(f).route.length <= 500.0


def test_generate_prints_count(tmp_path, capsys):
    assert main(["generate", "--routes", "1", "--seed", "7", "--out", str(tmp_path)]) == 0
    assert "samples:" in capsys.readouterr().out


def test_missing_data_is_usage_error():
    assert main(["train", "--out", "x"]) == 2


def test_missing_dataset_dir_is_usage_error(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2


def test_unknown_config_key(tmp_path, capsys):
    bad = write_json(tmp_path / "bad.json", {"train": {"epoch": 3}})
    assert main(["train", "--config", bad, "--data", str(tmp_path), "--out", str(tmp_path)]) == 2
    assert "unknown key(s) epoch" in capsys.readouterr().err


def test_nested_unknown_key_rejected(tmp_path):
    bad = write_json(tmp_path / "bad.json", {"pilot": {"lateral": {"kp": 1, "kq": 2}}})
    with pytest.raises(Exception, match="kq"):
        load_config(bad)


def test_seed_env_override(tmp_path):
    cfg = load_config(None, env={"TATKIT_SEED": "17"})
    assert cfg.seed == 17
    assert load_config(None, env={}).seed == 0


def test_seed_env_written_to_outputs(tmp_path, monkeypatch):
    monkeypatch.setenv("TATKIT_SEED", "5")
    assert main(["generate", "--routes", "1", "--routes-only", "--out", str(tmp_path)]) == 0
    resolved = json.loads((tmp_path / "config.json").read_text())
    assert resolved["seed"] == 5 and resolved["invocation"]["seed"] == 5
    assert (tmp_path / "routes" / "short-5.json").exists()


def test_train_outputs(workspace, capsys):
    root, _ = workspace
    run = root / "run"
    lines = (run / "loss.jsonl").read_text().splitlines()
    assert len(lines) == TINY["train"]["epochs"]
    assert (run / "model.tatc").read_bytes()[:5] == b"TATC1"
    assert json.loads((run / "config.json").read_text())["train"]["epochs"] == 2


def test_train_prints_final_error(tmp_path, workspace, capsys):
    root, _ = workspace
    cfg = write_json(tmp_path / "c.json", {**TINY, "train": {**TINY["train"], "sample_limit": 8}})
    assert main(["train", "--config", cfg, "--data", str(root / "data"), "--out", str(tmp_path)]) == 0
    assert "final mean error (train):" in capsys.readouterr().out


def test_train_is_deterministic(tmp_path, workspace):
    root, cfg = workspace
    assert main(["train", "--config", cfg, "--data", str(root / "data"), "--out", str(tmp_path)]) == 0
    for name in ("model.tatc", "loss.jsonl", "summary.json"):
        assert (tmp_path / name).read_bytes() == (root / "run" / name).read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_training_exits_one(tmp_path, workspace, capsys):
    root, _ = workspace
    cfg = write_json(tmp_path / "c.json",
                     {**TINY, "train": {**TINY["train"], "learning_rate": 1e200}})
    assert main(["train", "--config", cfg, "--data", str(root / "data"), "--out", str(tmp_path)]) == 1
    assert "first non-finite gradient" in capsys.readouterr().err


def test_eval_oracle(tmp_path, workspace):
    root, _ = workspace
    report = tmp_path / "oracle.json"
    assert main(["eval", "--oracle", "--routes", str(root / "heldout"), "--report", str(report)]) == 0
    d = json.loads(report.read_text())
    assert (d["RC"], d["IS"], d["DS"]) == (100.0, 1.0, 100.0)
    assert (tmp_path / "oracle.txt").exists() and (tmp_path / "config.json").exists()


def test_eval_checkpoint_report(tmp_path, workspace):
    root, _ = workspace
    args = ["eval", "--checkpoint", str(root / "run" / "model.tatc"), "--routes",
            str(root / "heldout")]
    assert main(args + ["--report", str(tmp_path / "a.json")]) == 0
    assert main(args + ["--report", str(tmp_path / "b.json"), "--jobs", "2"]) == 0
    a = (tmp_path / "a.json").read_bytes()
    assert a == (tmp_path / "b.json").read_bytes()
    d = json.loads(a)
    ds = [r["RC"] * r["IS"] for r in d["routes"]]
    assert abs(d["DS"] - float(np.mean(ds))) <= 1e-9
    assert set(d["rates_per_km"]) == {"collision_vehicle", "collision_layout", "off_road", "blocked"}
    traces = sorted((tmp_path / "a-traces").glob("trace-*.jsonl"))
    assert len(traces) == 2
    json.loads(traces[0].read_text().splitlines()[0])


def test_eval_needs_checkpoint_or_oracle(tmp_path, workspace):
    root, _ = workspace
    assert main(["eval", "--routes", str(root / "heldout"), "--report", str(tmp_path / "r.json")]) == 2


def test_eval_corrupt_checkpoint_is_runtime_failure(tmp_path, workspace):
    root, _ = workspace
    (tmp_path / "bad.tatc").write_bytes(b"garbage")
    assert main(["eval", "--checkpoint", str(tmp_path / "bad.tatc"), "--routes",
                 str(root / "heldout"), "--report", str(tmp_path / "r.json")]) == 1


@pytest.mark.parametrize("variant,columns", [("tat_ct", 5), ("tet", 4)])
def test_trace_outputs(tmp_path, workspace, variant, columns):
    root, cfg = workspace
    ckpt = root / "run" / "model.tatc"
    if variant != "tat_ct":
        assert main(["train", "--config", cfg, "--data", str(root / "data"),
                     "--out", str(tmp_path / "m"), "--variant", variant]) == 0
        ckpt = tmp_path / "m" / "model.tatc"
    out = tmp_path / "trace"
    assert main(["trace", "--checkpoint", str(ckpt), "--data", str(root / "data"),
                 "--sample", "3", "--out", str(out)]) == 0
    doc = json.loads((out / "attention.json").read_text())
    assert len(doc["columns"]) == columns
    assert (doc["columns"][-1] == "target") == (variant == "tat_ct")
    for layer in doc["self"]:
        w = np.array(layer)
        assert w.shape[-1] == columns
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-9)
    for layer in doc["cross"]:
        w = np.array(layer)
        assert w.shape[-2:] == (8, 8)
        np.testing.assert_allclose(w.sum(axis=(-1, -2)), 1.0, atol=1e-9)
    svg = ET.parse(out / "attention.svg").getroot()
    fills = [c.get("fill") for c in svg.iter("{http://www.w3.org/2000/svg}circle")]
    assert fills.count("blue") == 4 and fills.count("red") == 1
    assert (out / "config.json").exists()


def test_trace_sample_out_of_range(tmp_path, workspace):
    root, _ = workspace
    assert main(["trace", "--checkpoint", str(root / "run" / "model.tatc"), "--data",
                 str(root / "data"), "--sample", "99999", "--out", str(tmp_path)]) == 2


def test_console_exit_codes(tmp_path):
    run = lambda *a: subprocess.run([sys.executable, "-m", "tatkit.cli", *a],
                                    capture_output=True, text=True)
    assert run("--help").returncode == 0
    assert run("train", "--out", str(tmp_path)).returncode == 2
    assert run("generate", "--routes", "0", "--out", str(tmp_path)).returncode == 0
