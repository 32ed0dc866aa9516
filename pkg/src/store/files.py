from __future__ import annotations

# On-disk primitives shared by the dataset, checkpoint and result stores:
# YAML manifests and raw little-endian float64 blocks in row-major order.

import hashlib
import logging
from dataclasses import asdict, is_dataclass
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt
import yaml

from src.core.errors import ManifestError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
BLOCK_DTYPE = np.dtype("<f8")


# -----------------------------
# Helper functions
# -----------------------------
def plain(obj: Any) -> Any:
    """Convert dataclasses, tuples and numpy values into YAML-safe builtins."""
    if is_dataclass(obj) and not isinstance(obj, type):
        return plain(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [plain(v) for v in obj.tolist()]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def ensure_writable(paths: list[Path], *, force: bool) -> None:
    """
    Refuse to overwrite existing outputs unless forced.

    Raises:
        FileExistsError: If any path exists and force is False.
    """
    existing = [p for p in paths if p.exists()]
    if existing and not force:
        msg = f"Refusing to overwrite existing file(s) without --force: {[str(p) for p in existing]}"
        logger.error(msg)
        raise FileExistsError(msg)


def ensure_file_exists(path: Path, label: str) -> None:
    """
    Raises:
        FileNotFoundError: If the path is missing or not a file.
    """
    if not path.is_file():
        msg = f"Missing {label} at '{path.resolve()}'"
        logger.error(msg)
        raise FileNotFoundError(msg)


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


# -----------------------------
# Manifests
# -----------------------------
def write_manifest(path: Path, payload: dict[str, Any]) -> str:
    """Write a YAML manifest with sorted keys; returns its sha256."""
    path.parent.mkdir(parents=True, exist_ok=True)
    text = yaml.safe_dump(plain({"format_version": FORMAT_VERSION, **payload}), sort_keys=True)
    path.write_text(text, encoding="utf-8")
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def read_manifest(path: Path, required: tuple[str, ...] = ()) -> dict[str, Any]:
    """
    Parse a YAML manifest.

    Raises:
        FileNotFoundError: If the manifest is missing.
        ManifestError: If the text does not parse (with the byte offset of
            the problem when known), is not a mapping, or lacks a required key.
    """
    ensure_file_exists(path, "manifest")
    raw = path.read_bytes()
    try:
        data = yaml.safe_load(raw.decode("utf-8"))
    except UnicodeDecodeError as e:
        msg = f"Manifest '{path}' is not valid UTF-8 at byte {e.start}"
        logger.error(msg)
        raise ManifestError(msg, byte_offset=e.start) from e
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        offset = None
        if mark is not None:
            # Character index -> byte offset
            offset = len(raw.decode("utf-8")[: mark.index].encode("utf-8"))
        msg = f"Failed to parse manifest '{path}'" + (f" at byte {offset}" if offset is not None else "") + f": {e}"
        logger.error(msg)
        raise ManifestError(msg, byte_offset=offset) from e

    if not isinstance(data, dict):
        msg = f"Manifest '{path}' must be a mapping at top-level, got {type(data).__name__}"
        logger.error(msg)
        raise ManifestError(msg, byte_offset=0)

    missing = [k for k in required if k not in data]
    if missing:
        msg = f"Manifest '{path}' is missing required key(s): {missing}"
        logger.error(msg)
        raise ManifestError(msg)

    if data.get("format_version") != FORMAT_VERSION:
        msg = f"Manifest '{path}' has unsupported format_version {data.get('format_version')!r}"
        logger.error(msg)
        raise ManifestError(msg)
    return data


# -----------------------------
# Raw blocks
# -----------------------------
def write_block(path: Path, array: npt.ArrayLike) -> dict[str, Any]:
    """Write an array as raw little-endian float64 (row-major); returns its block descriptor."""
    arr = np.ascontiguousarray(array, dtype=BLOCK_DTYPE)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(arr.tobytes(order="C"))
    return {"file": path.name, "shape": list(arr.shape), "sha256": sha256_file(path)}


def read_block(directory: Path, descriptor: dict[str, Any]) -> npt.NDArray[np.float64]:
    """
    Read a raw float64 block described by a manifest entry.

    Raises:
        FileNotFoundError: If the block file is missing.
        ManifestError: If the size or checksum does not match the manifest.
    """
    path = directory / str(descriptor["file"])
    ensure_file_exists(path, "data block")
    shape = tuple(int(s) for s in descriptor["shape"])
    raw = path.read_bytes()

    expected = int(np.prod(shape, dtype=np.int64)) * BLOCK_DTYPE.itemsize
    if len(raw) != expected:
        msg = f"Block '{path.name}' has {len(raw)} bytes, manifest shape {shape} needs {expected}"
        logger.error(msg)
        raise ManifestError(msg, byte_offset=min(len(raw), expected))

    checksum = descriptor.get("sha256")
    if checksum is not None and hashlib.sha256(raw).hexdigest() != checksum:
        msg = f"Block '{path.name}' checksum does not match its manifest"
        logger.error(msg)
        raise ManifestError(msg)

    return np.frombuffer(raw, dtype=BLOCK_DTYPE).reshape(shape).astype(np.float64)
