from __future__ import annotations

import asyncio
import contextlib
import logging
import os
from pathlib import Path

from aiofiles import open as aioopen

LOGGER = logging.getLogger(__name__)


def _temp_path(path: Path) -> Path:
    if path.suffix:
        return path.with_suffix(path.suffix + ".tmp")
    return path.with_name(path.name + ".tmp")


async def write_atomic(path: Path, payload: bytes) -> None:
    """Write ``payload`` to ``path`` through a temp file and ``os.replace``."""

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = _temp_path(path)
    try:
        async with aioopen(tmp_path, "wb") as file:
            await file.write(payload)
            await file.flush()
        await asyncio.to_thread(os.replace, tmp_path, path)
    except Exception:
        with contextlib.suppress(FileNotFoundError):
            await asyncio.to_thread(tmp_path.unlink)
        raise

    LOGGER.debug("file_flushed", extra={"path": str(path), "bytes": len(payload)})


def write_atomic_sync(path: Path, payload: bytes) -> None:
    """Blocking variant for callers outside an event loop (the training loop)."""

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = _temp_path(path)
    try:
        with tmp_path.open("wb") as file:
            file.write(payload)
            file.flush()
            os.fsync(file.fileno())
        os.replace(tmp_path, path)
    except Exception:
        with contextlib.suppress(FileNotFoundError):
            tmp_path.unlink()
        raise

    LOGGER.debug("file_flushed", extra={"path": str(path), "bytes": len(payload)})
