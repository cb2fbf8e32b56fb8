from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Callable, Dict

import numpy as np
import pytest

from condl.config import MatchingConfig, ModelConfig
from condl.engine import Tensor
from condl.services.checkpoint import (
    CheckpointCorruptError,
    CheckpointVersionError,
    capture_model,
    checkpoint_name,
    decode_checkpoint,
    encode_checkpoint,
    latest_checkpoint,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from condl.services.model import forward, init_model
from condl.services.trainer import OptimizerState


def _checkpoint():
    params = init_model(ModelConfig(blocks=1, channels=4, seed=3))
    state = OptimizerState.fresh(params)
    state.m["stem.bias"][:] = 0.25
    return params, capture_model(
        params,
        MatchingConfig(temperature=0.5, normalize_descriptors=True),
        adam_m=state.m,
        adam_v=state.v,
        step=12,
        adam_t=12,
        loss_tail=[1.5, 1.25],
    )


def test_save_load_save_is_byte_identical(tmp_path: Path) -> None:
    _, ckpt = _checkpoint()
    first = tmp_path / checkpoint_name(12)
    save_checkpoint(ckpt, first)
    restored = load_checkpoint(first)
    second = tmp_path / "again.cndl"
    save_checkpoint(restored, second)
    assert first.read_bytes() == second.read_bytes()

    assert restored.step == 12 and restored.adam_t == 12
    assert restored.temperature == 0.5 and restored.normalize_descriptors
    assert restored.loss_tail == [1.5, 1.25]
    np.testing.assert_array_equal(restored.adam_m["stem.bias"], np.full(4, 0.25, dtype=np.float32))
    assert latest_checkpoint(tmp_path) == first


def test_restored_model_gives_identical_inference() -> None:
    params, ckpt = _checkpoint()
    restored = model_from_checkpoint(decode_checkpoint(encode_checkpoint(ckpt)))
    image = Tensor(np.random.default_rng(0).uniform(size=(3, 16, 16)))
    np.testing.assert_array_equal(
        forward(params, image, training=False).data, forward(restored, image, training=False).data
    )


def test_unknown_version_is_rejected() -> None:
    _, ckpt = _checkpoint()
    raw = bytearray(encode_checkpoint(ckpt))
    struct.pack_into("<I", raw, 4, 2)
    with pytest.raises(CheckpointVersionError) as info:
        decode_checkpoint(bytes(raw))
    assert info.value.found == 2


def test_truncated_and_tampered_files_are_corrupt() -> None:
    _, ckpt = _checkpoint()
    raw = encode_checkpoint(ckpt)
    with pytest.raises(CheckpointCorruptError):
        decode_checkpoint(raw[:6])
    with pytest.raises(CheckpointCorruptError):
        decode_checkpoint(raw[:-20])

    flipped = bytearray(raw)
    flipped[len(raw) // 2] ^= 0xFF
    with pytest.raises(CheckpointCorruptError):
        decode_checkpoint(bytes(flipped))
    with pytest.raises(CheckpointCorruptError):
        decode_checkpoint(b"XXXX" + raw[4:])


def test_missing_parameters_are_reported() -> None:
    _, ckpt = _checkpoint()
    del ckpt.params["stem.weight"]
    with pytest.raises(CheckpointCorruptError):
        model_from_checkpoint(ckpt)


def _reseal(raw: bytes, edit: Callable[[Dict[str, Any]], None]) -> bytes:
    magic, version, meta_len = struct.unpack_from("<4sII", raw, 0)
    metadata = json.loads(raw[12 : 12 + meta_len])
    edit(metadata)
    meta_bytes = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = struct.pack("<4sII", magic, version, len(meta_bytes)) + meta_bytes + raw[12 + meta_len : -8]
    checksum = int.from_bytes(hashlib.blake2b(body, digest_size=8).digest(), "little")
    return body + struct.pack("<Q", checksum)


def test_negative_entry_shape_is_corrupt() -> None:
    _, ckpt = _checkpoint()

    def negate(metadata: Dict[str, Any]) -> None:
        shape = metadata["entries"][0]["shape"]
        metadata["entries"][0]["shape"] = [-shape[0], *shape[1:]]

    with pytest.raises(CheckpointCorruptError) as info:
        decode_checkpoint(_reseal(encode_checkpoint(ckpt), negate))
    assert "metadata" in str(info.value)


def test_latest_checkpoint_orders_by_step_number(tmp_path: Path) -> None:
    assert latest_checkpoint(tmp_path) is None
    for step in (999_999, 1_000_000, 12):
        (tmp_path / checkpoint_name(step)).write_bytes(b"")
    (tmp_path / "step_notes.cndl").write_bytes(b"")
    assert latest_checkpoint(tmp_path) == tmp_path / "step_1000000.cndl"
