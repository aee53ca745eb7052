from pathlib import Path

import pytest

from mgmoe.config import ConfigError, ExperimentConfig, format_config, load_config, parse_config

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_defaults_round_trip():
    cfg = ExperimentConfig()
    assert parse_config(format_config(cfg)) == cfg


def test_shipped_configs_parse():
    full = load_config(CONFIGS / "full.cfg")
    assert full == ExperimentConfig()
    joint = load_config(CONFIGS / "joint.cfg")
    assert joint.run.schedule == "joint"
    assert joint.stages["IV"] == full.stages["IV"]


def test_partial_config_keeps_defaults():
    cfg = parse_config("[moe]\ntop_k = 2  # both experts\n\n[stageIII]\nsteps = 5\n")
    assert cfg.moe.top_k == 2 and cfg.stages["III"].steps == 5
    assert cfg.stages["II"] == ExperimentConfig().stages["II"]
    assert cfg.stage("III", seed=3).seed == 3


def test_mix_parsing():
    cfg = parse_config("[stageIV]\nmix = grounding:1, complex-vqa:0.5\n")
    assert cfg.stages["IV"].mix == {"grounding": 1.0, "complex-vqa": 0.5}


@pytest.mark.parametrize("text,line", [
    ("[model]\nlayers = 2\n[modle]\n", 3),
    ("[model]\nlayerz = 2\n", 2),
    ("[model]\nlayers = two\n", 2),
    ("layers = 2\n", 1),
    ("[run]\nseed = 1\nseed = 2\n", 3),
    ("[run]\n\nseed\n", 3),
    ("[run\n", 1),
    ("[moe]\ntop_k = 3\n", 2),
    ("[stageI]\nmix = caption\n", 2),
    ("[stageII]\nsteps = 0\n", 2),
    ("[stageII]\nmix = captions:1\n", 2),
    ("[run]\ndtype = float16\n", 2),
    ("[run]\nschedule = staged\n", 2),
])
def test_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigError) as info:
        parse_config(text, source="x.cfg")
    assert info.value.line == line
    assert str(info.value).startswith(f"x.cfg:{line}:")


def test_with_seed_copies():
    cfg = ExperimentConfig()
    other = cfg.with_seed(11)
    assert other.run.seed == 11 and cfg.run.seed == 7
