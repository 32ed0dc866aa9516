from __future__ import annotations

# Dataset files: a YAML manifest (task, dims, seed, prior, normalization
# constants) next to raw float64 blocks for thetas and xs, plus a CSV export
# for inspection.

import logging
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from src.core.errors import ManifestError
from src.core.tasks import Dataset, PriorSpec, TaskSpec
from src.store.files import ensure_writable, plain, read_block, read_manifest, sha256_file, write_block, write_manifest

logger = logging.getLogger(__name__)

REQUIRED_KEYS = ("kind", "task", "n", "seed", "prior_predictive_std", "x_min", "x_max", "blocks")


def dataset_paths(directory: str | Path, name: str) -> dict[str, Path]:
    """Deterministic file names of a stored dataset."""
    directory = Path(directory)
    return {
        "manifest": directory / f"{name}.manifest.yaml",
        "hash": directory / f"{name}.manifest.sha256",
        "thetas": directory / f"{name}.thetas.f64",
        "xs": directory / f"{name}.xs.f64",
    }


# -----------------------------
# Helper functions
# -----------------------------
def _task_from_manifest(block: dict[str, Any]) -> TaskSpec:
    """
    Rebuild the frozen TaskSpec stored in a manifest.

    Raises:
        ManifestError: If the task block is malformed.
    """
    try:
        prior = PriorSpec(
            kind=block["prior"]["kind"],
            sigma=float(block["prior"]["sigma"]),
            sigmoid_transform=bool(block["prior"]["sigmoid_transform"]),
            transform_low=tuple(float(v) for v in block["prior"]["transform_low"]),
            transform_high=tuple(float(v) for v in block["prior"]["transform_high"]),
        )
        return TaskSpec(
            name=block["name"],
            theta_dim=int(block["theta_dim"]),
            x_dim=int(block["x_dim"]),
            prior=prior,
            noise_sigma=float(block["noise_sigma"]),
            time_points=int(block["time_points"]),
            t_end=float(block["t_end"]),
            initial_state=tuple(float(v) for v in block["initial_state"]),
            substeps=int(block["substeps"]),
            a_diag=tuple(float(v) for v in block["a_diag"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        msg = f"Malformed task block in dataset manifest: {e}"
        logger.error(msg)
        raise ManifestError(msg) from e


# -----------------------------
# Public API
# -----------------------------
def save_dataset(
    ds: Dataset,
    directory: str | Path,
    name: str,
    *,
    config_hash: str | None = None,
    force: bool = False,
) -> str:
    """
    Write a dataset as manifest + raw blocks.

    Args:
        ds: Dataset to store.
        directory: Output folder (created if needed).
        name: File stem, e.g. "train" or "test".
        config_hash: Hash of the experiment config that produced the data.
        force: Overwrite existing files.

    Returns:
        sha256 of the manifest (also written next to it).

    Raises:
        FileExistsError: If files exist and force is False.
    """
    paths = dataset_paths(directory, name)
    ensure_writable(list(paths.values()), force=force)

    blocks = {
        "thetas": write_block(paths["thetas"], ds.thetas),
        "xs": write_block(paths["xs"], ds.xs),
    }
    digest = write_manifest(
        paths["manifest"],
        {
            "kind": "dataset",
            "task": plain(ds.task),
            "n": ds.n,
            "seed": ds.seed,
            "prior_predictive_std": ds.prior_predictive_std,
            "x_min": ds.x_min,
            "x_max": ds.x_max,
            "blocks": blocks,
            "config_hash": config_hash,
        },
    )
    paths["hash"].write_text(digest + "\n", encoding="utf-8")
    logger.info("Wrote dataset '%s' (%s, n=%d) -> %s", name, ds.task.name, ds.n, paths["manifest"])
    return digest


def load_dataset(directory: str | Path, name: str) -> tuple[Dataset, dict[str, Any]]:
    """
    Load a dataset written by save_dataset.

    Returns:
        (Dataset, manifest dict).

    Raises:
        FileNotFoundError: If the manifest or a block is missing.
        ManifestError: If the manifest is malformed or a block does not match it.
    """
    paths = dataset_paths(directory, name)
    manifest = read_manifest(paths["manifest"], REQUIRED_KEYS)
    if manifest["kind"] != "dataset":
        msg = f"'{paths['manifest']}' is a {manifest['kind']} manifest, not a dataset"
        logger.error(msg)
        raise ManifestError(msg)

    task = _task_from_manifest(manifest["task"])
    thetas = read_block(paths["manifest"].parent, manifest["blocks"]["thetas"])
    xs = read_block(paths["manifest"].parent, manifest["blocks"]["xs"])

    n = int(manifest["n"])
    if thetas.shape != (n, task.theta_dim) or xs.shape != (n, task.x_dim):
        msg = f"Block shapes {thetas.shape}/{xs.shape} do not match n={n} and task '{task.name}'"
        logger.error(msg)
        raise ManifestError(msg)

    ds = Dataset(
        task=task,
        thetas=thetas,
        xs=xs,
        seed=int(manifest["seed"]),
        x_min=np.asarray(manifest["x_min"], dtype=np.float64),
        x_max=np.asarray(manifest["x_max"], dtype=np.float64),
        prior_predictive_std=float(manifest["prior_predictive_std"]),
    )
    logger.info("Loaded dataset '%s' (%s, n=%d)", name, task.name, n)
    return ds, manifest


def manifest_digest(directory: str | Path, name: str) -> str:
    return sha256_file(dataset_paths(directory, name)["manifest"])


def export_dataset_csv(ds: Dataset, path: str | Path, *, config_hash: str = "") -> Path:
    """Write thetas and xs side by side as CSV (columns theta_0.., x_0.., config_hash)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.concat(
        [
            pd.DataFrame(ds.thetas, columns=[f"theta_{j}" for j in range(ds.task.theta_dim)]),
            pd.DataFrame(ds.xs, columns=[f"x_{j}" for j in range(ds.task.x_dim)]),
        ],
        axis=1,
    )
    frame["config_hash"] = config_hash
    frame.to_csv(path, index=False)
    logger.info("Exported dataset CSV -> %s", path)
    return path
