import json

import yaml

from driftguard.cli import main

from .conftest import TINY


def write_config(tmp_path, **overrides):
    d = {**TINY, **overrides}
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(d), encoding="utf-8")
    return str(path)


def test_show_config(tmp_path, capsys):
    assert main(["show-config", "--config", write_config(tmp_path), "--seed", "7"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["seed"] == 7 and d["synthetic"]["seed"] == 7 and d["scenario"]["seed"] == 7


def test_default_config(capsys):
    assert main(["show-config"]) == 0
    assert json.loads(capsys.readouterr().out)["detector"]["baseline_window"] == 112


def test_bad_config_exit_code(tmp_path, capsys):
    assert main(["run", "--config", write_config(tmp_path, bogus=1)]) == 2
    assert "config" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.yaml")]) == 2


def test_run_prints_report(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--config", write_config(tmp_path), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert text.startswith("detection") and "roi" in text
    assert (out / "report.json").exists()


def test_stage_by_stage(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = str(tmp_path / "staged")
    for stage in ("generate", "train", "inject", "detect", "diagnose", "plan", "retrain", "evaluate"):
        assert main([stage, "--config", cfg, "--out", out]) == 0, stage
    assert capsys.readouterr().out.rstrip().endswith(f"seed {TINY['seed']}")
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "full")]) == 0
    assert (tmp_path / "staged" / "report.json").read_bytes() == (tmp_path / "full" / "report.json").read_bytes()


def test_missing_stage_exit_code(tmp_path, capsys):
    assert main(["train", "--config", write_config(tmp_path), "--out", str(tmp_path / "empty")]) == 3
    assert "ingest" in capsys.readouterr().err


def test_batch(tmp_path, capsys):
    out = tmp_path / "batch"
    assert main(["batch", "--config", write_config(tmp_path), "--out", str(out), "--n-seeds", "1"]) == 0
    assert "severity" in capsys.readouterr().out
    assert (out / "seed_001" / "alpha_0.50" / "report.json").exists()
    assert (out / "seed_001" / "control" / "report.json").exists()
