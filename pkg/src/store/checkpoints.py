from __future__ import annotations

# Estimator checkpoints: a YAML manifest (architecture descriptor, tensor
# names and shapes in state_dict order, provenance) plus one raw float64
# block holding every tensor back to back.

import logging
from pathlib import Path
from typing import Any

import numpy as np
import torch

from src.core.errors import ManifestError
from src.core.estimators import Estimator, estimator_from_descriptor
from src.store.files import ensure_writable, read_block, read_manifest, write_block, write_manifest

logger = logging.getLogger(__name__)


def checkpoint_paths(directory: str | Path, name: str = "estimator") -> dict[str, Path]:
    directory = Path(directory)
    return {
        "manifest": directory / f"{name}.manifest.yaml",
        "params": directory / f"{name}.params.f64",
    }


def save_checkpoint(
    est: Estimator,
    directory: str | Path,
    name: str = "estimator",
    *,
    config_hash: str | None = None,
    metadata: dict[str, Any] | None = None,
    force: bool = False,
) -> str:
    """
    Write an estimator checkpoint.

    Returns:
        sha256 of the parameter block (identical for identical parameters).

    Raises:
        FileExistsError: If files exist and force is False.
    """
    paths = checkpoint_paths(directory, name)
    ensure_writable(list(paths.values()), force=force)

    state = est.state_dict()
    tensors = [{"name": key, "shape": list(t.shape)} for key, t in state.items()]
    flat = np.concatenate([t.detach().cpu().numpy().astype(np.float64).ravel() for t in state.values()]) if state else np.zeros(0)
    block = write_block(paths["params"], flat)

    write_manifest(
        paths["manifest"],
        {
            "kind": "checkpoint",
            "estimator": est.describe(),
            "tensors": tensors,
            "block": block,
            "config_hash": config_hash,
            "metadata": metadata or {},
        },
    )
    logger.info("Wrote %s checkpoint (%d tensors, %d values) -> %s", est.kind, len(tensors), flat.size, paths["manifest"])
    return block["sha256"]


def load_checkpoint(directory: str | Path, name: str = "estimator") -> tuple[Estimator, dict[str, Any]]:
    """
    Rebuild an estimator from its checkpoint; parameters round-trip bitwise.

    Raises:
        FileNotFoundError: If the manifest or block is missing.
        ManifestError: If the manifest does not describe the stored block.
    """
    paths = checkpoint_paths(directory, name)
    manifest = read_manifest(paths["manifest"], ("kind", "estimator", "tensors", "block"))
    if manifest["kind"] != "checkpoint":
        msg = f"'{paths['manifest']}' is a {manifest['kind']} manifest, not a checkpoint"
        logger.error(msg)
        raise ManifestError(msg)

    try:
        est = estimator_from_descriptor(manifest["estimator"])
    except (KeyError, TypeError, ValueError) as e:
        msg = f"Malformed estimator descriptor in '{paths['manifest']}': {e}"
        logger.error(msg)
        raise ManifestError(msg) from e

    flat = read_block(paths["manifest"].parent, manifest["block"])
    state: dict[str, torch.Tensor] = {}
    offset = 0
    for entry in manifest["tensors"]:
        shape = tuple(int(s) for s in entry["shape"])
        size = int(np.prod(shape, dtype=np.int64))
        state[entry["name"]] = torch.from_numpy(flat[offset : offset + size].reshape(shape).copy())
        offset += size
    if offset != flat.size:
        msg = f"Checkpoint block holds {flat.size} values, tensors declare {offset}"
        logger.error(msg)
        raise ManifestError(msg)

    try:
        est.load_state_dict(state)
    except RuntimeError as e:
        msg = f"Checkpoint tensors do not fit the described estimator: {e}"
        logger.error(msg)
        raise ManifestError(msg) from e

    logger.info("Loaded %s checkpoint from %s", est.kind, paths["manifest"])
    return est, manifest
