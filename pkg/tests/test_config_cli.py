import json
import subprocess
import sys

import pytest

from desknas.cli import apply_overrides, main, parse_override
from desknas.config import ConfigError, RunConfig


def test_default_hyperparameters():
    cfg = RunConfig().validate()
    assert (cfg.lr0, cfg.momentum, cfg.gaea_lr, cfg.weight_decay) == (0.01, 0.9, 0.1, 1e-3)
    assert cfg.alpha_start_epoch == 15 and cfg.class_weights == (1.0, 5.0)
    assert cfg.resolved_space == "base" and cfg.resolved_edge_norm


def test_round_trip(tmp_path):
    cfg = RunConfig(topology="darts-unetpp", depth=3, seed=4)
    cfg.save(tmp_path / "c.json")
    assert RunConfig.load(tmp_path / "c.json") == cfg


@pytest.mark.parametrize("d", [{"learning_rate": 0.1}, {"dataset": {"colour": 1}}, {"evolve": {"pop": 3}}])
def test_unknown_keys_are_rejected(d):
    with pytest.raises(ConfigError, match="unknown config keys"):
        RunConfig.from_dict(d)


@pytest.mark.parametrize("d", [
    {"topology": "resnext-unet", "space": "base"},
    {"topology": "resnext-unet", "edge_norm": True},
    {"topology": "vgg"},
    {"batch": 0},
    {"optimizer": "adam"},
    {"decode_cell": "best"},
    {"class_weights": [1, 0]},
    {"dataset": {"height": 36}},
    {"evolve": {"pop_size": 1}},
    {"schema_version": 2},
])
def test_invalid_configs_fail_fast(d):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(d)


def test_resnext_defaults_validate():
    cfg = RunConfig(topology="resnext-unet").validate()
    assert cfg.resolved_space == "large" and not cfg.resolved_edge_norm


def test_invalid_json_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{nope")
    with pytest.raises(ConfigError):
        RunConfig.load(p)


def test_overrides_parse_json_and_dotted_keys():
    assert parse_override("lr0=0.05") == ("lr0", 0.05)
    assert parse_override("topology=chain") == ("topology", "chain")
    cfg = apply_overrides({}, ["dataset.height=32", "dataset.width=32", "evolve.workers=3"])
    assert cfg.dataset.height == 32 and cfg.evolve.workers == 3
    with pytest.raises(ConfigError):
        parse_override("lr0")


def test_cli_defaults_prints_config(capsys):
    assert main(["defaults"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out == RunConfig().to_dict()


@pytest.mark.parametrize("argv", [
    ["search", "--set", "bogus=1"],
    ["search", "--set", "dataset.height=30"],
    ["decode", "does/not/exist"],
    ["frobnicate"],
])
def test_cli_errors_are_one_json_line(argv, capsys, tmp_path):
    argv = [a.replace("does/not/exist", str(tmp_path / "missing")) for a in argv]
    assert main(argv) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    payload = json.loads(err[0])
    assert set(payload) == {"error", "message", "command"}


def test_console_entry_point_exit_code():
    proc = subprocess.run([sys.executable, "-m", "desknas.cli", "search", "--set", "batch=0"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert json.loads(proc.stderr.strip())["error"] == "ConfigError"
