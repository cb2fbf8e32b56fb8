"""Binary checkpoint format.

Layout, little-endian::

    b"CNDL" | u32 version | u32 metadata length | metadata (UTF-8 JSON)
    | float32 payloads in metadata entry order | u64 blake2b-8 checksum

The checksum covers every byte before it.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np
from pydantic import ValidationError

from condl.config import MatchingConfig, ModelConfig
from condl.engine import RunningStats, Tensor
from condl.schemas import CheckpointMetadata, TensorEntry

from .files import write_atomic_sync
from .model import BLOCK_LAYOUT, ModelParams, norm_layer_names, parameter_layout

LOGGER = logging.getLogger(__name__)

MAGIC = b"CNDL"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sII")
_TRAILER = struct.Struct("<Q")
_NAME_PATTERN = re.compile(r"step_(\d+)\.cndl")


class CheckpointVersionError(ValueError):
    def __init__(self, found: int) -> None:
        super().__init__(f"unsupported checkpoint version {found} (this build reads version {FORMAT_VERSION})")
        self.found = found


class CheckpointCorruptError(ValueError):
    """Truncated file, bad magic or checksum mismatch."""


@dataclass
class Checkpoint:
    model_config: ModelConfig
    temperature: float = 1.0
    normalize_descriptors: bool = False
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_m: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    adam_t: int = 0
    bn_updates: int = 0
    loss_tail: List[float] = field(default_factory=list)

    def matching_flags(self) -> Dict[str, object]:
        return {"temperature": self.temperature, "normalize_descriptors": self.normalize_descriptors}


def capture_model(
    model: ModelParams,
    matching: MatchingConfig | None = None,
    *,
    adam_m: Dict[str, np.ndarray] | None = None,
    adam_v: Dict[str, np.ndarray] | None = None,
    step: int = 0,
    adam_t: int = 0,
    loss_tail: List[float] | None = None,
) -> Checkpoint:
    matching = matching or MatchingConfig()
    buffers: Dict[str, np.ndarray] = {}
    updates = 0
    for name, stats in model.stats.items():
        buffers[f"{name}.running_mean"] = stats.mean.astype(np.float32).copy()
        buffers[f"{name}.running_var"] = stats.var.astype(np.float32).copy()
        updates = max(updates, stats.updates)
    return Checkpoint(
        model_config=model.config,
        temperature=matching.temperature,
        normalize_descriptors=matching.normalize_descriptors,
        params={name: tensor.data.astype(np.float32).copy() for name, tensor in model.named_parameters()},
        buffers=buffers,
        adam_m={k: v.astype(np.float32).copy() for k, v in (adam_m or {}).items()},
        adam_v={k: v.astype(np.float32).copy() for k, v in (adam_v or {}).items()},
        step=step,
        adam_t=adam_t,
        bn_updates=updates,
        loss_tail=[float(x) for x in (loss_tail or [])],
    )


def model_from_checkpoint(ckpt: Checkpoint) -> ModelParams:
    cfg = ckpt.model_config
    tensors: Dict[str, Tensor] = {}
    for name, shape in parameter_layout(cfg):
        data = ckpt.params.get(name)
        if data is None or tuple(data.shape) != shape:
            raise CheckpointCorruptError(f"parameter {name} missing or misshaped for the stored model config")
        tensors[name] = Tensor(data.copy(), requires_grad=True, name=name)
    stats: Dict[str, RunningStats] = {}
    for name in norm_layer_names(cfg):
        mean = ckpt.buffers.get(f"{name}.running_mean")
        var = ckpt.buffers.get(f"{name}.running_var")
        if mean is None or var is None:
            raise CheckpointCorruptError(f"running statistics for {name} are missing")
        stats[name] = RunningStats(
            mean=mean.copy(),
            var=var.copy(),
            momentum=cfg.bn_momentum,
            updates=ckpt.bn_updates,
        )
    return ModelParams(config=cfg, tensors=tensors, stats=stats)


def _entries(ckpt: Checkpoint) -> List[tuple[TensorEntry, np.ndarray]]:
    ordered: List[tuple[TensorEntry, np.ndarray]] = []
    for kind, group in (
        ("param", ckpt.params),
        ("buffer", ckpt.buffers),
        ("adam_m", ckpt.adam_m),
        ("adam_v", ckpt.adam_v),
    ):
        for name, array in group.items():
            ordered.append((TensorEntry(name=name, kind=kind, shape=list(array.shape)), array))
    return ordered


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    entries = _entries(ckpt)
    metadata = CheckpointMetadata(
        block_layout=BLOCK_LAYOUT,
        model=asdict(ckpt.model_config),
        matching=ckpt.matching_flags(),
        step=ckpt.step,
        adam_t=ckpt.adam_t,
        bn_updates=ckpt.bn_updates,
        loss_tail=ckpt.loss_tail,
        entries=[entry for entry, _ in entries],
    )
    meta_bytes = json.dumps(metadata.model_dump(mode="json"), sort_keys=True, separators=(",", ":")).encode(
        "utf-8"
    )
    body = bytearray(_HEADER.pack(MAGIC, FORMAT_VERSION, len(meta_bytes)))
    body += meta_bytes
    for _, array in entries:
        body += np.ascontiguousarray(array, dtype="<f4").tobytes()
    checksum = int.from_bytes(hashlib.blake2b(bytes(body), digest_size=8).digest(), "little")
    body += _TRAILER.pack(checksum)
    return bytes(body)


def decode_checkpoint(raw: bytes) -> Checkpoint:
    if len(raw) < _HEADER.size:
        raise CheckpointCorruptError(f"checkpoint truncated: {len(raw)} bytes, header needs {_HEADER.size}")
    magic, version, meta_len = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointCorruptError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(version)
    if len(raw) < _HEADER.size + meta_len + _TRAILER.size:
        raise CheckpointCorruptError("checkpoint truncated inside the metadata block")

    (stored,) = _TRAILER.unpack_from(raw, len(raw) - _TRAILER.size)
    body = raw[: len(raw) - _TRAILER.size]
    actual = int.from_bytes(hashlib.blake2b(body, digest_size=8).digest(), "little")
    if stored != actual:
        raise CheckpointCorruptError(f"checksum mismatch: stored {stored:016x}, computed {actual:016x}")

    meta_end = _HEADER.size + meta_len
    try:
        metadata = CheckpointMetadata.model_validate_json(body[_HEADER.size : meta_end])
        model_config = ModelConfig(**metadata.model)
    except (ValidationError, TypeError, ValueError) as exc:
        raise CheckpointCorruptError(f"malformed checkpoint metadata: {exc}") from exc

    groups: Dict[str, Dict[str, np.ndarray]] = {"param": {}, "buffer": {}, "adam_m": {}, "adam_v": {}}
    offset = meta_end
    for entry in metadata.entries:
        group = groups[entry.kind]
        if entry.name in group:
            raise CheckpointCorruptError(f"{entry.kind} {entry.name} appears twice")
        count = int(np.prod(entry.shape, dtype=np.int64))
        end = offset + 4 * count
        if end > len(body):
            raise CheckpointCorruptError(f"payload for {entry.name} runs past the end of the file")
        group[entry.name] = np.frombuffer(body[offset:end], dtype="<f4").astype(np.float32).reshape(entry.shape)
        offset = end
    if offset != len(body):
        raise CheckpointCorruptError(f"{len(body) - offset} unexpected bytes after the last payload")

    return Checkpoint(
        model_config=model_config,
        temperature=float(metadata.matching.get("temperature", 1.0)),
        normalize_descriptors=bool(metadata.matching.get("normalize_descriptors", False)),
        params=groups["param"],
        buffers=groups["buffer"],
        adam_m=groups["adam_m"],
        adam_v=groups["adam_v"],
        step=metadata.step,
        adam_t=metadata.adam_t,
        bn_updates=metadata.bn_updates,
        loss_tail=list(metadata.loss_tail),
    )


def save_checkpoint(ckpt: Checkpoint, path: Path) -> None:
    payload = encode_checkpoint(ckpt)
    write_atomic_sync(path, payload)
    LOGGER.info("checkpoint_saved", extra={"path": str(path), "step": ckpt.step, "bytes": len(payload)})


def load_checkpoint(path: Path) -> Checkpoint:
    ckpt = decode_checkpoint(path.read_bytes())
    LOGGER.info("checkpoint_loaded", extra={"path": str(path), "step": ckpt.step})
    return ckpt


def file_digest(path: Path) -> str:
    return hashlib.blake2b(path.read_bytes(), digest_size=16).hexdigest()


def checkpoint_name(step: int) -> str:
    return f"step_{step:06d}.cndl"


def checkpoint_step(path: Path) -> int | None:
    match = _NAME_PATTERN.fullmatch(path.name)
    return int(match.group(1)) if match else None


def latest_checkpoint(directory: Path) -> Path | None:
    """Checkpoint with the highest step number in ``directory``."""

    candidates = []
    for path in directory.glob("step_*.cndl"):
        step = checkpoint_step(path)
        if step is not None:
            candidates.append((step, path))
    return max(candidates)[1] if candidates else None
