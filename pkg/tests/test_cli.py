import json
import os
import struct
import zlib

import numpy as np
import pytest

from mmtl.checkpoint import encode_checkpoint, load_checkpoint, save_checkpoint
from mmtl.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC, build_parser, main
from mmtl.config import ConfigError, RunConfig, config_from_dict, load_config

TINY_RUN = {
    "world": {"n_entities": 10, "n_relations": 2, "n_years": 2},
    "model": {"n_layers": 3, "n_heads": 2, "d_model": 16, "d_mlp": 32, "d_vision": 8},
    "train": {"epochs": 2, "batch_size": 8, "lr": 2e-3, "eval_every": 1},
    "trace": {"n_facts": 2},
    "detect": {"sigma_levels": [0.05, 1.0]},
    "edit": {"n_fix": 2, "n_unrelated": 3, "max_steps": 5, "sweep_layers": [0, 2], "sweep_requests": 1},
}


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY_RUN))
    return str(path)


def run(cmd, cfg, out, *extra):
    return main([cmd, "--config", cfg, "--out", str(out), *extra])


def test_help_lists_commands_and_flags(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["trace", "--help"])
    text = capsys.readouterr().out
    for flag in ("--config", "--seed", "--out", "--site", "--window", "--corruption", "--layer", "--lambda"):
        assert flag in text


def test_config_round_trip_and_strictness(tmp_path):
    cfg = config_from_dict(TINY_RUN)
    assert config_from_dict(json.loads(cfg.to_json())) == cfg
    assert load_config(None) == RunConfig()
    for bad in ({"world": {"bogus": 1}}, {"trace": {"site": "resid"}}, {"model": {"n_layers": "8"}},
                {"extra": 1}, {"edit": {"sweep_layers": [1.5]}}):
        with pytest.raises(ConfigError):
            config_from_dict(bad)


def test_malformed_config_exits_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    bad.write_text(json.dumps({"train": {"lr": "fast"}}))
    assert main(["gen", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["gen", "--out", str(tmp_path), "--window", "0"]) == EXIT_CONFIG


def test_thread_env_is_validated(tmp_path, monkeypatch, tiny_config):
    monkeypatch.setenv("MMTL_NUM_THREADS", "zero")
    assert run("gen", tiny_config, tmp_path) == EXIT_CONFIG


def test_missing_artifacts_exit_3(tmp_path, tiny_config):
    assert run("train", tiny_config, tmp_path) == EXIT_MISSING
    assert run("gen", tiny_config, tmp_path) == 0
    assert run("trace", tiny_config, tmp_path) == EXIT_MISSING
    (tmp_path / "model.mmtl").write_bytes(b"MMTL" + b"\0" * 40)
    assert run("edit", tiny_config, tmp_path) == EXIT_MISSING


def test_non_finite_checkpoint_exits_4(tmp_path, tiny_config, tiny_model):
    assert run("gen", tiny_config, tmp_path) == 0
    body = bytearray(encode_checkpoint(tiny_model)[:-4])
    body[-4:] = struct.pack("<f", float("nan"))
    (tmp_path / "model.mmtl").write_bytes(bytes(body) + struct.pack("<I", zlib.crc32(body)))
    assert run("attn", tiny_config, tmp_path) == EXIT_NUMERIC


def test_full_pipeline_writes_all_artifacts(tmp_path, tiny_config):
    out = tmp_path / "run"
    for cmd in ("gen", "train", "trace", "attn", "edit", "sweep"):
        assert run(cmd, tiny_config, out) == 0, cmd
    assert run("trace", tiny_config, out, "--site", "attn", "--window", "1", "--corruption", "gaussian") == 0
    names = set(os.listdir(out))
    for expected in ("world.json", "model.mmtl", "curves.csv", "trace_mlp_w3_replace_summary.json",
                     "trace_attn_w1_gaussian_summary.csv", "attn_visual_constraint.svg", "attn_summary.json",
                     "edit_layer1_report.json",
                     "edited_layer1.mmtl", "sweep.csv", "config.trace.json"):
        assert expected in names, expected
    assert json.loads((out / "config.trace.json").read_text())["trace"]["site"] == "attn"
    assert (out / "curves.csv").read_text().splitlines()[0].startswith("epoch")
    sweep = (out / "sweep.csv").read_text().splitlines()
    assert sweep[0] == "layer,efficacy" and [r.split(",")[0] for r in sweep[1:]] == ["0", "2"]
    report = json.loads((out / "edit_layer1_report.json").read_text())
    assert report["fix"]["n"] == 2
    grid_dir = out / "trace_mlp_w3_replace"
    assert len([n for n in os.listdir(grid_dir) if n.endswith(".csv")]) == 2
    model, _ = load_checkpoint(out / "model.mmtl")
    assert model.config.n_layers == 3


def test_edit_flags_override(tmp_path, tiny_config):
    out = tmp_path / "run"
    for cmd in ("gen", "train"):
        assert run(cmd, tiny_config, out) == 0
    assert run("edit", tiny_config, out, "--layer", "2", "--lambda", "0.5") == 0
    report = json.loads((out / "edit_layer2_report.json").read_text())
    req = report["fix"]["edits"][0]["request"]
    assert req["layer"] == 2 and req["lambda"] == 0.5
    assert run("edit", tiny_config, out, "--layer", "7") == 1


def test_detect_on_trained_model(tmp_path, tiny_config, small_world, trained_small, capsys):
    (tmp_path / "world.json").write_text(small_world.to_json())
    save_checkpoint(tmp_path / "model.mmtl", trained_small.model)
    assert run("detect", tiny_config, tmp_path) == 0
    det = json.loads((tmp_path / "detect_report.json").read_text())
    assert {"detector_auroc", "confidence_auroc", "layers"} <= set(det)
    rows = (tmp_path / "detect_profiles.csv").read_text().splitlines()
    assert rows[0].startswith("index,split,correct,confidence,layer0") and len(rows) > 10


def test_detect_needs_both_outcomes(tmp_path, tiny_config, capsys):
    for cmd in ("gen", "train"):
        assert run(cmd, tiny_config, tmp_path) == 0
    code = run("detect", tiny_config, tmp_path)
    assert code in (0, 1)
    if code == 1:
        assert "both classes" in capsys.readouterr().err
