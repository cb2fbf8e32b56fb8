from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Any, List

import pytest

import condl.cli
from condl.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, build_parser, cli_main
from condl.config import ModelConfig
from condl.services.checkpoint import capture_model, latest_checkpoint, load_checkpoint, save_checkpoint
from condl.services.model import init_model
from condl.services.synthgen import procedural_image


@pytest.fixture
def config_path(tmp_path: Path) -> Path:
    path = tmp_path / "settings.yaml"
    path.write_text(
        "logging:\n  level: WARNING\nmodel:\n  blocks: 1\n  channels: 4\n",
        encoding="utf-8",
    )
    return path


def test_usage_errors_exit_with_one(config_path: Path, tmp_path: Path) -> None:
    assert cli_main([]) == EXIT_USAGE
    assert cli_main(["train", "--config", str(config_path)]) == EXIT_USAGE
    assert cli_main(["eval", "--stride", "3"]) == EXIT_USAGE
    args = ["gen-data", "--config", str(config_path), "--procedural", "--out", str(tmp_path / "d")]
    assert cli_main(args + ["--size", "8"]) == EXIT_USAGE
    assert cli_main(args + ["--count", "0"]) == EXIT_USAGE


def test_missing_settings_file_fails(tmp_path: Path) -> None:
    args = ["selftest", "--config", str(tmp_path / "absent.yaml")]
    assert cli_main(args) == EXIT_FAILURE


def test_gen_data_writes_a_dataset(config_path: Path, tmp_path: Path) -> None:
    out = tmp_path / "data"
    code = cli_main(
        [
            "gen-data",
            "--config",
            str(config_path),
            "--procedural",
            "--count",
            "2",
            "--size",
            "16",
            "--seed",
            "1",
            "--out",
            str(out),
        ]
    )
    assert code == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["count"] == 2 and manifest["width"] == 16
    assert (out / "000001_h.json").exists()


def test_match_rejects_images_of_different_sizes(config_path: Path, tmp_path: Path) -> None:
    checkpoint = tmp_path / "model.cndl"
    save_checkpoint(capture_model(init_model(ModelConfig(blocks=1, channels=4))), checkpoint)
    image_a, image_b = tmp_path / "a.png", tmp_path / "b.png"
    procedural_image(32, seed=0).to_pil().save(image_a)
    procedural_image(48, seed=0).to_pil().save(image_b)

    base = ["match", "--config", str(config_path), "--checkpoint", str(checkpoint), "--image-a", str(image_a)]
    out = tmp_path / "matches.csv"
    assert cli_main(base + ["--image-b", str(image_b), "--out", str(out)]) == EXIT_FAILURE
    assert not out.exists()

    assert cli_main(base + ["--image-b", str(image_a), "--stride", "8", "--out", str(out)]) == EXIT_OK
    lines = out.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "xa,ya,xb,yb,score,mutual"
    assert len(lines) == 1 + 16


TRAINING_YAML = (
    "training:\n  lr: 0.01\n  batch_size: 2\n  grid: [4, 4]\n  epochs: 1\n"
    "  image_size: 16\n  min_correspondences: 4\n  seed: 3\n"
    "synthesis:\n  distortion:\n    max_corner_shift: 0.08\n    n_occluders: [0, 0]\n"
)


@pytest.fixture
def train_config_path(config_path: Path) -> Path:
    config_path.write_text(config_path.read_text(encoding="utf-8") + TRAINING_YAML, encoding="utf-8")
    return config_path


def _gen_data(config: Path, out: Path, count: int, size: int) -> None:
    args = ["gen-data", "--config", str(config), "--procedural", "--count", str(count), "--size", str(size)]
    assert cli_main(args + ["--seed", "2", "--out", str(out)]) == EXIT_OK


def _tiny_checkpoint(tmp_path: Path) -> Path:
    checkpoint = tmp_path / "model.cndl"
    save_checkpoint(capture_model(init_model(ModelConfig(blocks=1, channels=4))), checkpoint)
    return checkpoint


def test_train_and_overfit_commands(train_config_path: Path, tmp_path: Path) -> None:
    data, run = tmp_path / "data", tmp_path / "run"
    _gen_data(train_config_path, data, count=3, size=16)

    base = ["train", "--config", str(train_config_path), "--data", str(data), "--out", str(run)]
    assert cli_main(base + ["--epochs", "2"]) == EXIT_OK
    assert load_checkpoint(latest_checkpoint(run)).step == 4  # type: ignore[arg-type]
    assert cli_main(base + ["--epochs", "0"]) == EXIT_USAGE
    assert cli_main(base + ["--epochs", "3", "--resume"]) == EXIT_OK
    assert load_checkpoint(latest_checkpoint(run)).step == 6  # type: ignore[arg-type]

    overfit = ["overfit", "--config", str(train_config_path), "--data", str(data), "--max-steps", "2"]
    assert cli_main(overfit) == EXIT_OK
    assert cli_main(overfit + ["--pair-id", "9"]) == EXIT_USAGE
    absent = ["overfit", "--config", str(train_config_path), "--data", str(tmp_path / "none")]
    assert cli_main(absent) == EXIT_FAILURE


def test_train_fails_on_image_size_mismatch(train_config_path: Path, tmp_path: Path) -> None:
    data = tmp_path / "data"
    _gen_data(train_config_path, data, count=1, size=32)
    args = ["train", "--config", str(train_config_path), "--data", str(data), "--out", str(tmp_path / "run")]
    assert cli_main(args) == EXIT_FAILURE


def test_eval_writes_a_single_stride_report(config_path: Path, tmp_path: Path) -> None:
    data, out = tmp_path / "data", tmp_path / "eval"
    _gen_data(config_path, data, count=2, size=32)
    args = ["eval", "--config", str(config_path), "--checkpoint", str(_tiny_checkpoint(tmp_path))]
    assert cli_main(args + ["--data", str(data), "--stride", "8", "--no-mutual", "--out", str(out)]) == EXIT_OK
    summary = json.loads((out / "eval_summary.json").read_text(encoding="utf-8"))
    assert summary["stride_px"] == 8 and summary["mutual"] is False
    assert summary["pairs_total"] == 2

    missing = ["eval", "--config", str(config_path), "--checkpoint", str(tmp_path / "absent.cndl")]
    assert cli_main(missing + ["--data", str(data), "--out", str(out)]) == EXIT_FAILURE


def test_eval_stride_sweep_with_random_baseline(config_path: Path, tmp_path: Path) -> None:
    data, out = tmp_path / "data", tmp_path / "sweep"
    _gen_data(config_path, data, count=2, size=32)
    args = ["eval", "--config", str(config_path), "--checkpoint", str(_tiny_checkpoint(tmp_path))]
    args += ["--data", str(data)]
    code = cli_main(args + ["--strides", "2,4,8", "--baseline", "random", "--out", str(out)])
    assert code == EXIT_OK

    with (out / "stride_sweep.csv").open(encoding="utf-8", newline="") as handle:
        rows = list(csv.DictReader(handle))
    assert [row["stride_px"] for row in rows] == ["2", "4", "8"]
    assert [row["total_matches"] for row in rows] == ["512", "128", "32"]
    for stride in (2, 4, 8):
        run = out / f"stride_{stride}"
        assert json.loads((run / "eval_summary.json").read_text(encoding="utf-8"))["stride_px"] == stride
        baseline = json.loads((run / "baseline_random" / "eval_summary.json").read_text(encoding="utf-8"))
        assert baseline["matcher"] == "random"
        lines = (run / "baseline_comparison.csv").read_text(encoding="utf-8").splitlines()
        assert lines[0] == "threshold_px,model_mean_fraction,random_mean_fraction,ratio"
        assert len(lines) == 4


def test_eval_rejects_bad_stride_lists(config_path: Path, tmp_path: Path) -> None:
    args = ["eval", "--config", str(config_path), "--checkpoint", "c", "--data", "d", "--out", str(tmp_path)]
    assert cli_main(args + ["--strides", "2,3"]) == EXIT_USAGE
    assert cli_main(args + ["--strides", "two"]) == EXIT_USAGE
    assert cli_main(args + ["--strides", "2,4", "--stride", "8"]) == EXIT_USAGE
    assert cli_main(args + ["--baseline", "oracle"]) == EXIT_USAGE


def test_mutual_flag_overrides_the_settings(
    config_path: Path, tmp_path: Path, monkeypatch: pytest.MonkeyPatch
) -> None:
    parser = build_parser()
    base = ["match", "--checkpoint", "c", "--image-a", "a", "--image-b", "b", "--out", "o"]
    assert parser.parse_args(base).mutual is None
    assert parser.parse_args(base + ["--mutual"]).mutual is True
    assert parser.parse_args(base + ["--no-mutual"]).mutual is False

    config_path.write_text(
        config_path.read_text(encoding="utf-8") + "matching:\n  mutual_only: true\n", encoding="utf-8"
    )
    seen: List[bool] = []
    original = condl.cli.extract_matches

    def recording(*args: Any, **kwargs: Any) -> Any:
        seen.append(args[3])
        return original(*args, **kwargs)

    monkeypatch.setattr(condl.cli, "extract_matches", recording)
    image = tmp_path / "a.png"
    procedural_image(32, seed=0).to_pil().save(image)
    command = ["match", "--config", str(config_path), "--checkpoint", str(_tiny_checkpoint(tmp_path))]
    command += ["--image-a", str(image), "--image-b", str(image), "--out", str(tmp_path / "m.csv")]
    assert cli_main(command) == EXIT_OK
    assert cli_main(command + ["--no-mutual"]) == EXIT_OK
    assert seen == [True, False]


def test_selftest_command_passes(config_path: Path) -> None:
    assert cli_main(["selftest", "--config", str(config_path), "--seeds", "1"]) == EXIT_OK
    assert cli_main(["selftest", "--config", str(config_path), "--seeds", "0"]) == EXIT_USAGE
