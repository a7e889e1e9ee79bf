"""Tests for run-config parsing, validation, and strategy mapping."""

import json

import pytest

from clogcd.config import (
    CANONICAL_STRATEGIES,
    load_run_config,
    parse_run_config,
    strategy_curriculum,
)
from clogcd.errors import ConfigError


def _minimal_doc(**overrides):
    doc = {
        "dataset": {"kind": "synthetic",
                    "classes": [{"name": "a",
                                 "modes": [{"center": [0.5, 0.5], "count": 10}]}]},
    }
    doc.update(overrides)
    return doc


def test_minimal_config_gets_defaults():
    cfg = parse_run_config(_minimal_doc())
    assert cfg.k == 5
    assert cfg.image_size == (32, 32)
    assert cfg.strategies == list(CANONICAL_STRATEGIES)
    assert cfg.model == "cnn"
    assert cfg.train.lr0 == 0.001
    assert cfg.cae.filters == (16, 8)
    assert cfg.split.train == pytest.approx(0.7)
    assert not cfg.deterministic


def test_full_config_round_trip():
    doc = _minimal_doc(
        image_size=[16, 16],
        split={"train": 0.6, "val": 0.3, "test": 0.1},
        augment=["flip"],
        augment_copies=2,
        cae={"lr": 0.01, "epochs": 3, "batch_size": 10, "filters": [8, 4]},
        k=3,
        strategies=["baseline", "osc-d2"],
        curriculum={"iterations": 4, "beta": 0},
        train={"lr0": 0.05, "decay_factor": 0.9, "decay_period_epochs": 5,
               "batch_size": 25, "l2_lambda": 0.0, "head_l2": 0.0},
        epochs_per_stage=2,
        model="mlp",
        selection="test",
        seed=11,
        deterministic=True,
        output_dir="results/x",
    )
    cfg = parse_run_config(doc)
    assert cfg.image_size == (16, 16)
    assert cfg.augment == ["flip"] and cfg.augment_copies == 2
    assert cfg.cae.epochs == 3
    assert cfg.k == 3
    assert cfg.iterations == 4 and cfg.beta == 0
    assert cfg.train.decay_period_epochs == 5
    assert cfg.selection == "test"
    assert cfg.deterministic is True
    assert cfg.output_dir == "results/x"


def test_validation_collects_every_problem():
    doc = _minimal_doc(k=1, model="resnet", strategies=["osc-d0"],
                       epochs_per_stage=-2)
    with pytest.raises(ConfigError) as info:
        parse_run_config(doc)
    text = str(info.value)
    assert "k:" in text
    assert "model:" in text
    assert "strategies[0]" in text
    assert "epochs_per_stage:" in text
    assert len(info.value.problems) == 4


def test_nested_problems_carry_paths():
    doc = _minimal_doc(cae={"lr": -1.0}, train={"decay_factor": 2.0},
                       split={"train": 0.5, "val": 0.1, "test": 0.1})
    with pytest.raises(ConfigError) as info:
        parse_run_config(doc)
    text = str(info.value)
    assert "cae:" in text and "train:" in text and "split:" in text


def test_unknown_keys_are_flagged():
    with pytest.raises(ConfigError, match="learning_rate: unknown config key"):
        parse_run_config(_minimal_doc(learning_rate=0.1))


def test_dataset_required():
    with pytest.raises(ConfigError, match="dataset"):
        parse_run_config({})


def test_folder_dataset_requires_path():
    with pytest.raises(ConfigError, match="dataset.path"):
        parse_run_config({"dataset": {"kind": "folder"}})


def test_folder_path_resolved_relative_to_config(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"dataset": {"kind": "folder", "path": "imgs"}}))
    cfg = load_run_config(cfg_path)
    assert cfg.dataset.path == str(tmp_path / "imgs")


def test_load_missing_or_invalid_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_run_config(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_run_config(bad)


def test_run_id_ignores_output_dir_but_not_seed():
    a = parse_run_config(_minimal_doc(output_dir="x"))
    b = parse_run_config(_minimal_doc(output_dir="y"))
    c = parse_run_config(_minimal_doc(seed=99))
    assert a.run_id() == b.run_id()
    assert a.run_id() != c.run_id()
    assert len(a.run_id()) == 12


def test_strategy_curriculum_mapping():
    cfg = parse_run_config(_minimal_doc(k=5, curriculum={"iterations": 6}))
    base = strategy_curriculum("baseline", cfg)
    assert base.mode == "baseline"
    asg = strategy_curriculum("asg", cfg)
    assert (asg.mode, asg.iterations) == ("asg", 1)
    deg = strategy_curriculum("deg", cfg)
    assert (deg.mode, deg.beta) == ("deg", 0)
    osc = strategy_curriculum("osc-d2", cfg)
    assert (osc.mode, osc.delta, osc.iterations, osc.k) == ("oscillating", 2, 6, 5)


def test_custom_delta_strategy_accepted():
    cfg = parse_run_config(_minimal_doc(strategies=["osc-d3"]))
    assert strategy_curriculum("osc-d3", cfg).delta == 3


def test_unknown_strategy_rejected():
    cfg = parse_run_config(_minimal_doc())
    with pytest.raises(ConfigError, match="unknown strategy"):
        strategy_curriculum("zigzag", cfg)