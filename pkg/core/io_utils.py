"""
File I/O utilities.

Async binary and JSON reads; binary, JSON and text writes. Every write goes
through a uniquely named temp file and an atomic rename.
"""
from __future__ import annotations

import asyncio
import json
import logging
import os
import secrets
from pathlib import Path
from typing import Any

logger = logging.getLogger("trdq.io")


def _write_atomic_sync(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    # Unique temp name so concurrent writers never collide
    tmp_suffix = f".tmp.{os.getpid()}.{secrets.token_hex(8)}"
    tmp_path = path.with_suffix(path.suffix + tmp_suffix)
    try:
        with tmp_path.open("wb") as handle:
            handle.write(payload)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_path, path)
    finally:
        if tmp_path.exists():
            try:
                tmp_path.unlink()
            except OSError:
                pass


async def read_bytes(path: Path) -> bytes:
    def _read() -> bytes:
        with path.open("rb") as handle:
            return handle.read()

    return await asyncio.to_thread(_read)


async def write_bytes_atomic(path: Path, payload: bytes) -> None:
    await asyncio.to_thread(_write_atomic_sync, path, payload)


async def read_json(path: Path, default: Any = None) -> Any:
    def _read() -> Any:
        try:
            with path.open("r", encoding="utf-8") as handle:
                return json.load(handle)
        except FileNotFoundError:
            return default
        except (json.JSONDecodeError, OSError) as e:
            logger.error("Failed to read JSON from %s: %s", path, e)
            return default

    return await asyncio.to_thread(_read)


async def write_json_atomic(path: Path, data: Any) -> None:
    text = json.dumps(data, ensure_ascii=True, indent=2, allow_nan=False) + "\n"
    await write_bytes_atomic(path, text.encode("utf-8"))


async def write_text_atomic(path: Path, text: str) -> None:
    await write_bytes_atomic(path, text.encode("utf-8"))
