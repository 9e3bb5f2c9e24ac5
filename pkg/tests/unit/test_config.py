"""Unit tests for settings and experiment configs"""
import json

import pytest

from src.common.config import (
    ConfigError,
    ExperimentConfig,
    Settings,
    build_experiment_config,
    get_settings,
    load_experiment_config,
)


def test_defaults():
    """Defaults describe the desk-scale setup"""
    config = build_experiment_config()
    assert config.schedule.T == 6 and config.schedule.kind == "linear"
    assert config.model.encoder_channels == [32, 64, 128, 256]
    assert config.model.bins == 64
    assert config.model.restored_channels == 128 + 64
    assert config.data.train_size == 2000 and config.data.keep_rate == 0.15
    assert config.data.bf == 64.0
    assert config.avlfe.mode == "off" and config.avlfe.points == 9
    assert config.optim.lr_pretrain == 1e-3 and config.optim.lr_diffusion == 1e-4
    assert config.optim.batch_size == 8
    assert config.featopt.lr == 1e-2 and config.featopt.proxy_steps == 500


def test_unknown_key_reports_path():
    """Unknown keys are rejected with their dotted path"""
    with pytest.raises(ConfigError) as exc:
        build_experiment_config({"model": {"decoder": "inv", "heads": 4}})
    assert exc.value.key_path == "model.heads"


def test_invalid_value_reports_path():
    """Out-of-range values name the offending key"""
    with pytest.raises(ConfigError) as exc:
        build_experiment_config({"schedule": {"T": 0}})
    assert exc.value.key_path == "schedule.T"
    with pytest.raises(ConfigError):
        build_experiment_config({"model": {"decoder": "mlp"}})
    with pytest.raises(ConfigError):
        build_experiment_config({"data": {"image_size": 100}})


def test_overrides_win_over_file_keys():
    """Dotted overrides replace file values; None overrides are ignored"""
    config = build_experiment_config(
        {"seed": 1, "diffusion": {"steps": 2}},
        {"seed": 9, "diffusion.steps": 4, "model.decoder": None, "schedule.literal_eq9": True},
    )
    assert config.seed == 9
    assert config.diffusion.steps == 4
    assert config.model.decoder == "inv"
    assert config.schedule.literal_eq9 is True


def test_steps_cannot_exceed_T():
    """Inference steps are bounded by the schedule"""
    with pytest.raises(ConfigError):
        build_experiment_config({"schedule": {"T": 3}, "diffusion": {"steps": 4}})


def test_load_from_file(tmp_path):
    """JSON files load; malformed JSON and non-objects raise"""
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"seed": 3, "avlfe": {"mode": "compatible"}}))
    config = load_experiment_config(str(path))
    assert isinstance(config, ExperimentConfig)
    assert config.seed == 3 and config.avlfe.mode == "compatible"

    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_experiment_config(str(path))
    path.write_text("[1, 2]")
    with pytest.raises(ConfigError) as exc:
        load_experiment_config(str(path))
    assert exc.value.key_path == "<root>"


def test_config_round_trips_through_json(tiny_config):
    """The resolved config validates again from its JSON dump"""
    dumped = json.loads(json.dumps(tiny_config.model_dump(mode="json")))
    assert build_experiment_config(dumped) == tiny_config


def test_settings_from_environment(monkeypatch):
    """RDEPTH_ variables configure the process settings"""
    monkeypatch.setenv("RDEPTH_LOG_LEVEL", "DEBUG")
    monkeypatch.setenv("RDEPTH_ENVIRONMENT", "production")
    settings = Settings()
    assert settings.log_level == "DEBUG"
    assert settings.is_production and not settings.is_development
    assert get_settings() is get_settings()
