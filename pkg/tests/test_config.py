from __future__ import annotations

from pathlib import Path

import pytest

from condl.config import (
    DistortionConfig,
    EvaluationConfig,
    ModelConfig,
    Settings,
    TrainConfig,
    resolve_config_path,
)

ROOT = Path(__file__).resolve().parents[1]


def test_example_settings_load() -> None:
    settings = Settings.load(ROOT / "config" / "settings.example.yaml")
    assert settings.model.blocks == 6 and settings.model.channels == 64
    assert settings.training.grid_rows == settings.training.grid_cols == 16
    assert settings.synthesis.distortion.n_shadows == (0, 2)
    assert settings.evaluation.thresholds == (0.1, 1.0, 10.0)
    assert settings.evaluation.ransac.threshold_px == 3.0
    assert settings.logging.file == Path("logs/condl.log")


def test_partial_settings_fall_back_to_defaults(tmp_path: Path) -> None:
    path = tmp_path / "settings.yaml"
    path.write_text("training:\n  lr: 0\n  grid: [8, 4]\n", encoding="utf-8")
    settings = Settings.load(path)
    assert settings.training.lr == 0.0
    assert (settings.training.grid_rows, settings.training.grid_cols) == (8, 4)
    assert settings.model == ModelConfig()
    assert resolve_config_path(path) == path


def test_empty_settings_file(tmp_path: Path) -> None:
    path = tmp_path / "settings.yaml"
    path.write_text("", encoding="utf-8")
    assert Settings.load(path).matching.stride_px == 4


def test_invalid_values_are_rejected() -> None:
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ValueError):
        ModelConfig(kernel=4)
    with pytest.raises(ValueError):
        DistortionConfig(max_corner_shift=0.5)
    with pytest.raises(ValueError):
        DistortionConfig(n_shadows=(3, 1))
    with pytest.raises(ValueError):
        EvaluationConfig(thresholds=(1.0, 0.1))
    with pytest.raises(ValueError):
        Settings.from_dict({"matching": {"temperature": 0}})


def test_distortion_digest_ignores_the_seed() -> None:
    cfg = DistortionConfig(seed=1)
    assert cfg.digest() == cfg.with_seed(99).digest()
    assert cfg.digest() != DistortionConfig.mild().digest()
    assert DistortionConfig.disabled().max_corner_shift == 0.0
