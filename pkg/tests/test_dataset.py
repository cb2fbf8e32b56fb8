from __future__ import annotations

import asyncio
import json
from pathlib import Path

import pytest

from condl.config import DistortionConfig
from condl.services.dataset import (
    DatasetError,
    check_dataset,
    load_pair,
    open_dataset,
    pair_paths,
    read_dataset,
    write_dataset,
)
from condl.services.synthgen import SamplePair, generate_dataset, procedural_image


def _pairs(count: int, size: int = 32) -> list[SamplePair]:
    return list(generate_dataset(count, size, DistortionConfig.mild(), seed=3))


def test_write_then_read_round_trip(tmp_path: Path) -> None:
    pairs = _pairs(10)
    root = tmp_path / "data"

    async def runner() -> None:
        manifest = await write_dataset(pairs, root, seed=3)
        assert manifest.count == 10
        assert (manifest.width, manifest.height) == (32, 32)

    asyncio.run(runner())

    assert (root / "manifest.json").exists()
    loaded = list(read_dataset(root))
    assert [p.pair_id for p in loaded] == list(range(10))
    for original, restored in zip(pairs, loaded):
        assert restored.image_a == original.image_a
        assert restored.image_b == original.image_b
        assert restored.h_ab == original.h_ab
        assert restored.config_digest == original.config_digest
    assert check_dataset(root) == []


def test_empty_directory_yields_nothing(tmp_path: Path, caplog: pytest.LogCaptureFixture) -> None:
    root = tmp_path / "empty"
    root.mkdir()
    with caplog.at_level("WARNING"):
        assert list(read_dataset(root)) == []
    assert any(record.message == "dataset_empty" for record in caplog.records)
    assert check_dataset(root)


def test_missing_directory_is_an_error(tmp_path: Path) -> None:
    with pytest.raises(DatasetError):
        open_dataset(tmp_path / "nope")


def test_missing_files_are_listed(tmp_path: Path) -> None:
    root = tmp_path / "data"
    asyncio.run(write_dataset(_pairs(3), root))
    _, path_b, _ = pair_paths(root, 1)
    path_b.unlink()

    with pytest.raises(DatasetError) as info:
        open_dataset(root)
    assert "000001" in str(info.value)


def test_extra_files_beyond_manifest_are_rejected(tmp_path: Path) -> None:
    root = tmp_path / "data"
    asyncio.run(write_dataset(_pairs(2), root))
    (root / "000005_a.png").write_bytes(b"stray")

    with pytest.raises(DatasetError) as info:
        open_dataset(root)
    assert "000005" in str(info.value)


def test_manifest_missing_in_populated_directory(tmp_path: Path) -> None:
    root = tmp_path / "data"
    asyncio.run(write_dataset(_pairs(2), root))
    (root / "manifest.json").unlink()
    with pytest.raises(DatasetError):
        open_dataset(root)


def test_malformed_manifest(tmp_path: Path) -> None:
    root = tmp_path / "data"
    asyncio.run(write_dataset(_pairs(1), root))
    (root / "manifest.json").write_text(json.dumps({"count": "many"}), encoding="utf-8")
    with pytest.raises(DatasetError):
        open_dataset(root)


def test_load_pair_names_the_bad_entry(tmp_path: Path) -> None:
    root = tmp_path / "data"
    asyncio.run(write_dataset(_pairs(2), root))
    _, _, path_h = pair_paths(root, 1)
    path_h.write_text("{not json", encoding="utf-8")

    with pytest.raises(DatasetError) as info:
        load_pair(root, 1)
    assert "000001" in str(info.value)


def test_load_pair_rejects_dimension_mismatch(tmp_path: Path) -> None:
    root = tmp_path / "data"
    asyncio.run(write_dataset(_pairs(1, size=32), root))
    path_a, _, _ = pair_paths(root, 0)
    procedural_image(48, seed=1).to_pil().save(path_a, format="PNG")

    with pytest.raises(DatasetError) as info:
        load_pair(root, 0)
    assert "000000" in str(info.value)


def test_write_dataset_rejects_mixed_sizes(tmp_path: Path) -> None:
    mixed = _pairs(1, size=32) + _pairs(1, size=48)
    with pytest.raises(ValueError):
        asyncio.run(write_dataset(mixed, tmp_path / "data"))
    with pytest.raises(ValueError):
        asyncio.run(write_dataset([], tmp_path / "empty"))
