import pytest

from partialcycle.cli import (EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_VERIFY, OUT_ENV, ConfigError, RunConfig,
                              main, parse_config_text)

TINY = ["--set", "n_scenes=1", "--set", "n_timesteps=4"]


def test_parse_config_text():
    text = "# comment\nepochs = 3\n\nfov_width = 0.5  # trailing\nvariants = v1,v2\n"
    assert parse_config_text(text) == {"epochs": "3", "fov_width": "0.5", "variants": "v1,v2"}
    with pytest.raises(ConfigError):
        parse_config_text("epochz = 3")
    with pytest.raises(ConfigError):
        parse_config_text("just words")


def test_run_config_builds_typed_configs():
    cfg = RunConfig({"seed": "7", "epochs": "2", "variants": "v0,v3", "masking": "off", "fov_width": "0.5"})
    t, s = cfg.train(), cfg.scene()
    assert t.seed == 7 and t.epochs == 2 and t.variants == ("v0", "v3") and t.masking is False
    assert s.seed == 7 and s.fov_width == 0.5
    rendered = cfg.render()
    assert "epochs = 2\n" in rendered and "masking = off\n" in rendered and "turnover = " in rendered
    with pytest.raises(ConfigError):
        RunConfig({"epochs": "many"}).train()
    with pytest.raises(ConfigError):
        RunConfig({"fov_width": "2.0"}).scene()


def test_config_errors_exit_two(tmp_path):
    assert main(["train", "--cycles", "v1,v9", "--data", str(tmp_path)]) == EXIT_CONFIG
    assert main(["generate", "--set", "bogus=1", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["generate", "--config", str(tmp_path / "none.cfg")]) == EXIT_CONFIG
    assert main(["eval", "--data", str(tmp_path)]) == EXIT_CONFIG
    with pytest.raises(SystemExit) as exc:
        main(["train", "--sampler", "sideways"])
    assert exc.value.code == 2


def test_data_errors_exit_three(tmp_path):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert main(["eval", "--data", str(tmp_path), "--checkpoint", str(tmp_path / "none.txt"),
                 "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_verify_theory_and_injection(tmp_path, capsys):
    assert main(["verify-theory", "--instances", "50", "--out", str(tmp_path / "a")]) == EXIT_OK
    assert "50/50" in capsys.readouterr().out
    assert main(["verify-theory", "--instances", "5", "--inject", "on", "--out", str(tmp_path / "b")]) == EXIT_VERIFY
    assert "violation:" in capsys.readouterr().out


def test_grad_check_command(tmp_path):
    assert main(["grad-check", "--batches", "1", "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "resolved_config.txt").exists()


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path))
    assert main(["verify-theory", "--instances", "3"]) == EXIT_OK
    assert (tmp_path / "verify-theory" / "resolved_config.txt").exists()


def pipeline(root, seed="3"):
    data, model, ev = root / "data", root / "model", root / "eval"
    assert main(["generate", *TINY, "--seed", seed, "--out", str(data)]) == EXIT_OK
    assert main(["train", "--data", str(data), "--epochs", "2", "--seed", seed, "--out", str(model)]) == EXIT_OK
    assert main(["eval", "--data", str(data), "--checkpoint", str(model / "checkpoint.txt"),
                 "--out", str(ev)]) == EXIT_OK
    return data, model, ev


def test_pipeline_writes_outputs(tmp_path):
    data, model, ev = pipeline(tmp_path)
    for d in (data, model, ev):
        assert (d / "resolved_config.txt").exists()
    assert {p.name for p in data.glob("*.jsonl")} == {"train.jsonl", "val.jsonl", "test.jsonl"}
    assert "seed = 3\n" in (model / "resolved_config.txt").read_text()
    assert (ev / "summary.csv").read_text().splitlines()[-1].startswith("overall,")


def test_pipeline_is_byte_identical(tmp_path):
    a = pipeline(tmp_path / "a")
    b = pipeline(tmp_path / "b")
    for name in ("instances.csv", "summary.csv"):
        assert (a[2] / name).read_bytes() == (b[2] / name).read_bytes()
    assert (a[1] / "losses.csv").read_bytes() == (b[1] / "losses.csv").read_bytes()
    assert (a[1] / "checkpoint.txt").read_bytes() == (b[1] / "checkpoint.txt").read_bytes()


def test_checkpoint_dimension_mismatch(tmp_path):
    data, model, _ = pipeline(tmp_path)
    other = tmp_path / "other"
    assert main(["generate", *TINY, "--set", "obs_dim=16", "--set", "nuisance_dim=4", "--out", str(other)]) == 0
    assert main(["eval", "--data", str(other), "--checkpoint", str(model / "checkpoint.txt"),
                 "--out", str(tmp_path / "e2")]) == EXIT_DATA


def test_experiment_is_resumable(tmp_path, capsys):
    argv = ["experiment", *TINY, "--seeds", "0,1", "--epochs", "1", "--set", "grid_keep=1.0,0.6",
            "--set", "grid_cycles=v1", "--set", "grid_masking=on", "--out", str(tmp_path)]
    assert main(argv) == EXIT_OK
    cells = sorted(p.name for p in (tmp_path / "cells").glob("*.json"))
    assert len(cells) == 4
    table = (tmp_path / "table.txt").read_text()
    assert "full" in table and "60%" in table and "Jaccard" in table
    first = (tmp_path / "results.csv").read_text()
    stamps = {p: p.stat().st_mtime_ns for p in (tmp_path / "cells").glob("*.json")}
    capsys.readouterr()
    assert main(argv) == EXIT_OK
    assert {p: p.stat().st_mtime_ns for p in (tmp_path / "cells").glob("*.json")} == stamps
    assert (tmp_path / "results.csv").read_text() == first
