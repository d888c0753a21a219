from pathlib import Path

import pytest

from portionmtl.config import (
    CONFIG_ENV, ConfigError, ExperimentConfig, dump_config, load_config, parse_config, save_config,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_defaults_round_trip(tmp_path):
    cfg = ExperimentConfig()
    assert parse_config(dump_config(cfg)) == cfg
    save_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg


def test_shipped_configs_load():
    assert load_config(CONFIGS / "default.yaml") == ExperimentConfig()
    desk = load_config(CONFIGS / "ablation_desk.yaml")
    assert desk.train.epochs == 15 and desk.model.detach_classifier_features


def test_partial_config_and_seed_propagation():
    cfg = parse_config("seed: 4\ntrain:\n  epochs: 3\n")
    assert cfg.train.epochs == 3 and cfg.train.seed == 4
    assert cfg.with_overrides(seed=9).train.seed == 9
    assert "seed" not in cfg.to_dict()["train"]


def test_model_spec_from_config():
    cfg = parse_config("mode: hps\ndata:\n  n_classes: 5\n  image_size: 16\n")
    spec = cfg.model_spec()
    assert spec.mode == "hps" and spec.n_classes == 5 and spec.backbone.input_size == 16
    assert cfg.model_spec("sps").mode == "sps"


@pytest.mark.parametrize("text", [
    "bogus: 1\n", "train:\n  epoch: 3\n", "mode: mtl\n", "train:\n  epochs: 0\n", "a: [1\n",
    "ablation_modes: [sps, nope]\n",
])
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_env_var_sets_path(tmp_path, monkeypatch):
    p = tmp_path / "e.yaml"
    p.write_text("seed: 11\n")
    monkeypatch.setenv(CONFIG_ENV, str(p))
    assert load_config().seed == 11
    assert load_config(CONFIGS / "default.yaml").seed == 0
    monkeypatch.setenv(CONFIG_ENV, str(tmp_path / "missing.yaml"))
    with pytest.raises(ConfigError):
        load_config()
