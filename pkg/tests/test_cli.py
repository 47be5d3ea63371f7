import json
import os

import pytest

from scmoelab import cli

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "configs")


def _config(name):
    return os.path.join(CONFIG_DIR, name)


def test_schedule_inline_json(capsys):
    rc = cli.main(["schedule",
                   '{"comp": [2, 3, 4], "t_disp": 2, "t_comb": 7, "t_expert": 1}'])
    assert rc == 0
    out = json.loads(capsys.readouterr().out)
    assert out == {"slot": 1, "objective": 0.0, "makespan": 10.0}


def test_schedule_from_file(tmp_path, capsys):
    p = tmp_path / "costs.json"
    p.write_text('{"comp": [1], "t_disp": 10, "t_comb": 10, "t_expert": 0}')
    assert cli.main(["schedule", str(p)]) == 0
    assert json.loads(capsys.readouterr().out)["slot"] == 0


def test_invalid_input_reports_machine_readable_error(capsys):
    rc = cli.main(["schedule", '{"comp": [], "t_disp": 0, "t_comb": 0, "t_expert": 0}'])
    assert rc == 1
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ValueError"


def test_unknown_config_key_rejected(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{"modell": {}}')
    rc = cli.main(["simulate", "--config", str(p), "--out", str(tmp_path)])
    assert rc == 1
    assert "unknown config keys" in json.loads(capsys.readouterr().err)["message"]


def test_simulate_writes_reports_and_is_byte_stable(tmp_path):
    cfg = _config("simulate_five_strategies.json")
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert cli.main(["simulate", "--config", cfg, "--out", str(out1),
                     "--format", "csv"]) == 0
    assert cli.main(["simulate", "--config", cfg, "--out", str(out2),
                     "--format", "csv"]) == 0
    names = sorted(os.listdir(out1))
    assert "strategies.json" in names and "strategies.csv" in names
    assert any(n.startswith("timeline_") for n in names)
    for n in names:
        assert (out1 / n).read_bytes() == (out2 / n).read_bytes()
    report = json.loads((out1 / "strategies.json").read_text())
    assert len(report["strategies"]) == 6


def test_simulate_single_strategy_filter(tmp_path):
    cfg = _config("simulate_five_strategies.json")
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path),
                     "--strategy", "scmoe_overlap-pos2"]) == 0
    report = json.loads((tmp_path / "strategies.json").read_text())
    assert [s["label"] for s in report["strategies"]] == ["scmoe_overlap-pos2"]


def test_train_then_analyze_round_trip(tmp_path):
    train_cfg = {
        "model": {"n_blocks": 2, "d_model": 8, "d_hidden": 16, "n_experts": 4,
                  "k_routed": 1, "variant": "scmoe", "shortcut_pos": "pos2"},
        "train": {"steps": 20, "learning_rate": 0.01, "batch_size": 6,
                  "task": "copy"},
        "seed": 3,
    }
    cfgp = tmp_path / "cfg.json"
    cfgp.write_text(json.dumps(train_cfg))
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfgp), "--out", str(out)]) == 0
    loss_lines = (out / "loss.csv").read_text().splitlines()
    assert loss_lines[0] == "step,loss"
    assert len(loss_lines) == 21
    meta = json.loads((out / "train.json").read_text())
    assert meta["final_loss"] < meta["initial_loss"]

    aout = tmp_path / "analysis"
    assert cli.main(["analyze", str(out / "final_trace.bin"),
                     "--out", str(aout)]) == 0
    sim = (aout / "similarity.csv").read_text().splitlines()
    assert sim[0].split(",")[1:] == ["In", "1A", "1M", "2A", "2M"]
    assert (aout / "gating.csv").exists()


def test_train_reruns_are_byte_identical(tmp_path):
    cfg = _config("train_scmoe_pos2.json")
    doc = json.loads(open(cfg).read())
    doc["train"]["steps"] = 25
    p = tmp_path / "short.json"
    p.write_text(json.dumps(doc))
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["train", "--config", str(p), "--out", str(a)]) == 0
    assert cli.main(["train", "--config", str(p), "--out", str(b)]) == 0
    assert (a / "loss.csv").read_bytes() == (b / "loss.csv").read_bytes()
    assert (a / "final_trace.bin").read_bytes() == (b / "final_trace.bin").read_bytes()


def test_gradcheck_command(tmp_path, capsys):
    assert cli.main(["gradcheck", "--config",
                     _config("gradcheck_scmoe_pos2.json"),
                     "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "gradcheck.json").read_text())
    assert rep["max_rel_error"] <= 1e-6


def test_offload_command(tmp_path):
    assert cli.main(["offload", "--config",
                     _config("offload_gpt2_medium_like.json"),
                     "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "offload.json").read_text())
    assert 0.4 <= rep["memory_reduction"] <= 0.6
    modes = [r["mode"] for r in rep["reports"]]
    assert modes == ["GpuOnly", "OffloadBlocking", "OffloadAsync"]


def test_seed_override_changes_outputs(tmp_path):
    cfg = _config("gradcheck_scmoe_pos2.json")
    assert cli.main(["gradcheck", "--config", cfg, "--out", str(tmp_path / "a"),
                     "--seed", "123"]) == 0
    assert cli.main(["gradcheck", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    ra = json.loads((tmp_path / "a" / "gradcheck.json").read_text())
    rb = json.loads((tmp_path / "b" / "gradcheck.json").read_text())
    assert ra["per_param"] != rb["per_param"]


def test_no_stale_temp_files(tmp_path):
    assert cli.main(["offload", "--config",
                     _config("offload_gpt2_medium_like.json"),
                     "--out", str(tmp_path)]) == 0
    assert not [n for n in os.listdir(tmp_path) if n.endswith(".tmp")]
