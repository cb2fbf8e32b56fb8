"""On-disk dataset of generated pairs.

Layout: ``NNNNNN_a.png``, ``NNNNNN_b.png`` and ``NNNNNN_h.json`` per pair plus
one ``manifest.json`` written last.
"""

from __future__ import annotations

import asyncio
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, List, Optional

import numpy as np
from PIL import Image as PILImage
from pydantic import ValidationError

from condl.schemas import DatasetManifest, PairHomographyFile

from .files import write_atomic
from .geometry import Homography
from .synthgen import Image, SamplePair

LOGGER = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
WRITE_CONCURRENCY = 8


class DatasetError(RuntimeError):
    """The dataset directory is malformed or incomplete."""


@dataclass
class DatasetIndex:
    root: Path
    manifest: Optional[DatasetManifest]
    ids: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)


def pair_stem(pair_id: int) -> str:
    return f"{pair_id:06d}"


def pair_paths(root: Path, pair_id: int) -> tuple[Path, Path, Path]:
    stem = pair_stem(pair_id)
    return root / f"{stem}_a.png", root / f"{stem}_b.png", root / f"{stem}_h.json"


def encode_png(image: Image) -> bytes:
    buffer = io.BytesIO()
    image.to_pil().save(buffer, format="PNG")
    return buffer.getvalue()


def decode_png(payload: bytes) -> Image:
    with PILImage.open(io.BytesIO(payload)) as raw:
        return Image(np.asarray(raw.convert("RGB"), dtype=np.uint8))


async def _write_pair(root: Path, pair_id: int, pair: SamplePair) -> None:
    path_a, path_b, path_h = pair_paths(root, pair_id)
    png_a, png_b = await asyncio.gather(
        asyncio.to_thread(encode_png, pair.image_a),
        asyncio.to_thread(encode_png, pair.image_b),
    )
    document = PairHomographyFile(
        h=[[float(v) for v in row] for row in pair.h_ab.m],
        metadata=pair.metadata,
    )
    await asyncio.gather(
        write_atomic(path_a, png_a),
        write_atomic(path_b, png_b),
        write_atomic(path_h, document.model_dump_json(indent=2).encode("utf-8")),
    )


async def write_dataset(pairs: Iterable[SamplePair], root: Path, *, seed: int = 0) -> DatasetManifest:
    """Write ``pairs`` under ``root`` with sequential ids and return the manifest."""

    root.mkdir(parents=True, exist_ok=True)
    count = 0
    width = height = 0
    digest: Optional[str] = None
    pending: List[asyncio.Future] = []

    for pair in pairs:
        if count == 0:
            width, height, digest = pair.width, pair.height, pair.config_digest
        elif (pair.width, pair.height) != (width, height):
            raise ValueError(
                f"pair {count} is {pair.width}×{pair.height}, dataset is {width}×{height}"
            )
        elif pair.config_digest != digest:
            raise ValueError(f"pair {count} has distortion digest {pair.config_digest}, expected {digest}")
        pending.append(asyncio.ensure_future(_write_pair(root, count, pair)))
        count += 1
        if len(pending) >= WRITE_CONCURRENCY:
            await asyncio.gather(*pending)
            pending.clear()
    if pending:
        await asyncio.gather(*pending)

    if count == 0:
        raise ValueError("write_dataset received no pairs")

    manifest = DatasetManifest(
        count=count, width=width, height=height, config_digest=digest or "", seed=seed
    )
    await write_atomic(root / MANIFEST_NAME, manifest.model_dump_json(indent=2).encode("utf-8"))
    LOGGER.info("dataset_written", extra={"path": str(root), "count": count})
    return manifest


def _present_ids(root: Path) -> set[int]:
    ids: set[int] = set()
    for path in root.glob("*_*.*"):
        stem = path.name.split("_", 1)[0]
        if stem.isdigit() and len(stem) == 6:
            ids.add(int(stem))
    return ids


def open_dataset(root: Path) -> DatasetIndex:
    """Validate the manifest against the files present; pairs are not decoded."""

    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        if any(root.iterdir()):
            raise DatasetError(f"{manifest_path} is missing")
        LOGGER.warning("dataset_empty", extra={"path": str(root)})
        return DatasetIndex(root=root, manifest=None)

    try:
        manifest = DatasetManifest.model_validate_json(manifest_path.read_bytes())
    except ValidationError as exc:
        raise DatasetError(f"malformed manifest {manifest_path}: {exc}") from exc

    missing = [
        pair_id
        for pair_id in range(manifest.count)
        if not all(path.exists() for path in pair_paths(root, pair_id))
    ]
    if missing:
        listed = ", ".join(pair_stem(pair_id) for pair_id in missing[:20])
        more = f" (+{len(missing) - 20} more)" if len(missing) > 20 else ""
        raise DatasetError(
            f"manifest lists {manifest.count} pairs but files are missing for ids: {listed}{more}"
        )
    extra = sorted(pair_id for pair_id in _present_ids(root) if pair_id >= manifest.count)
    if extra:
        listed = ", ".join(pair_stem(pair_id) for pair_id in extra[:20])
        raise DatasetError(f"manifest lists {manifest.count} pairs but found files for ids: {listed}")

    return DatasetIndex(root=root, manifest=manifest, ids=list(range(manifest.count)))


def load_pair(root: Path, pair_id: int, manifest: Optional[DatasetManifest] = None) -> SamplePair:
    path_a, path_b, path_h = pair_paths(root, pair_id)
    stem = pair_stem(pair_id)
    try:
        image_a = decode_png(path_a.read_bytes())
        image_b = decode_png(path_b.read_bytes())
    except FileNotFoundError as exc:
        raise DatasetError(f"pair {stem}: missing file {exc.filename}") from exc
    except (OSError, ValueError) as exc:
        raise DatasetError(f"pair {stem}: unreadable image: {exc}") from exc

    if image_a.data.shape != image_b.data.shape:
        raise DatasetError(
            f"pair {stem}: image sizes differ ({image_a.width}×{image_a.height} vs {image_b.width}×{image_b.height})"
        )
    if manifest is not None and (image_a.width, image_a.height) != (manifest.width, manifest.height):
        raise DatasetError(
            f"pair {stem}: images are {image_a.width}×{image_a.height}, manifest says {manifest.width}×{manifest.height}"
        )

    try:
        document = PairHomographyFile.model_validate_json(path_h.read_bytes())
        h_ab = Homography(np.array(document.h, dtype=np.float64))
    except FileNotFoundError as exc:
        raise DatasetError(f"pair {stem}: missing file {exc.filename}") from exc
    except (ValidationError, ValueError) as exc:
        raise DatasetError(f"pair {stem}: malformed homography {path_h.name}: {exc}") from exc

    metadata = document.metadata
    if metadata is not None:
        digest, seed = metadata.config_digest, metadata.seed
    elif manifest is not None:
        digest, seed = manifest.config_digest, manifest.seed
    else:
        digest, seed = "", 0
    return SamplePair(
        image_a=image_a,
        image_b=image_b,
        h_ab=h_ab,
        config_digest=digest,
        seed=seed,
        pair_id=pair_id,
        metadata=metadata,
    )


def read_dataset(root: Path) -> Iterator[SamplePair]:
    """Validate ``root`` eagerly, then decode pairs lazily in id order."""

    index = open_dataset(root)
    return (load_pair(root, pair_id, index.manifest) for pair_id in index.ids)


def check_dataset(root: Path) -> List[str]:
    """Human-readable problems with ``root``; empty when the dataset is usable."""

    try:
        index = open_dataset(root)
    except DatasetError as exc:
        return [str(exc)]
    if index.manifest is None:
        return [f"{root / MANIFEST_NAME} is missing (empty dataset)"]
    if not index.ids:
        return [f"{root} holds no pairs"]
    return []
