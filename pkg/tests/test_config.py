import dataclasses

import pytest

from dnfode.config import ExperimentConfig, config_from_dict, load_config
from dnfode.errors import ConfigError

from conftest import GOLDEN


def test_defaults():
    cfg = config_from_dict({})
    assert cfg == ExperimentConfig()
    assert cfg.model.num_inducing == 16 and cfg.train.steps == 1000 and cfg.eval.coverage_level == 0.95


def test_golden_example_parses():
    cfg = load_config(GOLDEN / "example.toml")
    assert cfg.data.n_points == 20 and cfg.data.x0 == (-1.5, 2.5)
    assert cfg.model.prior_depth == 1 and cfg.train.steps == 5
    assert cfg.eval.forecast_points == 4
    # to_dict round trips
    assert config_from_dict(cfg.to_dict() | {"data": dict(cfg.to_dict()["data"], x0=list(cfg.data.x0))}) == cfg


@pytest.mark.parametrize("raw, fragment", [
    ({"extra": {}}, "unknown config table"),
    ({"model": {"depth": 1}}, "unknown key"),
    ({"model": {"num_inducing": 2.5}}, "expected int"),
    ({"train": {"steps": True}}, "expected int"),
    ({"data": {"noise_var": "0.1"}}, "expected float"),
    ({"data": {"x0": [1.0]}}, "two entries"),
    ({"data": {"system": "lorenz"}}, "unknown system"),
    ({"eval": {"coverage_level": 1.5}}, "coverage_level"),
    ({"eval": {"coverage_mode": "hdi"}}, "coverage_mode"),
    ({"data": {"source": "csv"}}, "path is required"),
    ({"data": {"source": "csv", "path": "/nonexistent/x.csv"}}, "does not exist"),
    ({"train": {"step_size": 0}}, "step_size"),
    ({"model": "x"}, "must be a table"),
])
def test_rejections(raw, fragment):
    with pytest.raises(ConfigError, match=fragment):
        config_from_dict(raw)


def test_relative_csv_path_resolves_next_to_config(tmp_path):
    (tmp_path / "d.csv").write_text("t,y1\n0,1\n")
    (tmp_path / "c.toml").write_text('[data]\nsource = "csv"\npath = "d.csv"\n')
    cfg = load_config(tmp_path / "c.toml")
    assert cfg.data.path == str(tmp_path / "d.csv")


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[data\nx = 1")
    with pytest.raises(ConfigError, match="not valid TOML"):
        load_config(bad)


def test_frozen():
    with pytest.raises(dataclasses.FrozenInstanceError):
        ExperimentConfig().model.num_inducing = 3
