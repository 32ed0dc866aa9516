from __future__ import annotations

# Attack outputs and evaluation tables. Every CSV carries a config_hash
# column so a later stage can refuse inputs produced by another config.

import logging
from pathlib import Path

import numpy as np
import pandas as pd

from src.core.attacks import AttackResult
from src.core.errors import ConfigError
from src.store.files import ensure_file_exists, read_block, read_manifest, write_block, write_manifest

logger = logging.getLogger(__name__)

ATTACK_COLUMNS = [
    "point_index",
    "kind",
    "relative_eps",
    "absolute_eps",
    "final_objective",
    "clamped",
    "error",
    "config_hash",
]


def attack_stem(kind: str, relative_eps: float) -> str:
    return f"{kind}_eps{relative_eps:g}"


def attack_paths(directory: str | Path, kind: str, relative_eps: float) -> dict[str, Path]:
    directory = Path(directory)
    stem = attack_stem(kind, relative_eps)
    return {
        "csv": directory / f"{stem}.csv",
        "manifest": directory / f"{stem}.manifest.yaml",
        "delta": directory / f"{stem}.delta.f64",
        "x_perturbed": directory / f"{stem}.xpert.f64",
    }


# -----------------------------
# Tables
# -----------------------------
def write_frame(df: pd.DataFrame, path: str | Path, config_hash: str) -> Path:
    """Write a table as CSV with a trailing config_hash column."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = df.copy()
    out["config_hash"] = config_hash
    out.to_csv(path, index=False)
    logger.info("Wrote %d row(s) -> %s", len(out), path)
    return path


def read_frame(path: str | Path, expected_hash: str | None = None) -> pd.DataFrame:
    """
    Read a CSV written by write_frame, checking its config hash.

    Raises:
        FileNotFoundError: If the file is missing.
        ConfigError: If the hash column is missing or differs from expected_hash.
    """
    path = Path(path)
    ensure_file_exists(path, "result table")
    df = pd.read_csv(path, keep_default_na=False, na_values=[""])

    if expected_hash is not None:
        if "config_hash" not in df.columns:
            msg = f"'{path}' has no config_hash column"
            logger.error(msg)
            raise ConfigError(msg)
        found = set(df["config_hash"].astype(str))
        if found and found != {expected_hash}:
            msg = f"'{path}' was produced by config {sorted(found)[0][:12]}, current config is {expected_hash[:12]}"
            logger.error(msg)
            raise ConfigError(msg)
    return df


# -----------------------------
# Attack results
# -----------------------------
def write_attack_results(
    results: list[AttackResult],
    directory: str | Path,
    *,
    kind: str,
    relative_eps: float,
    absolute_eps: float,
    x_dim: int,
    config_hash: str,
) -> dict[str, Path]:
    """
    Write one (kind, eps) attack run: a CSV row per point plus raw blocks of
    the perturbations and perturbed observations (row i = CSV row i).
    """
    paths = attack_paths(directory, kind, relative_eps)
    df = pd.DataFrame(
        {
            "point_index": [r.point_index for r in results],
            "kind": kind,
            "relative_eps": relative_eps,
            "absolute_eps": absolute_eps,
            "final_objective": [r.final_objective for r in results],
            "clamped": [r.clamped for r in results],
            "error": [r.error or "" for r in results],
        },
        columns=ATTACK_COLUMNS[:-1],
    )
    write_frame(df, paths["csv"], config_hash)

    deltas = np.stack([r.delta for r in results]) if results else np.zeros((0, x_dim))
    x_pert = np.stack([r.x_perturbed for r in results]) if results else np.zeros((0, x_dim))
    write_manifest(
        paths["manifest"],
        {
            "kind": "attack",
            "attack": kind,
            "relative_eps": relative_eps,
            "absolute_eps": absolute_eps,
            "n": len(results),
            "blocks": {"delta": write_block(paths["delta"], deltas), "x_perturbed": write_block(paths["x_perturbed"], x_pert)},
            "config_hash": config_hash,
        },
    )
    return paths


def read_attack_results(
    directory: str | Path,
    kind: str,
    relative_eps: float,
    *,
    expected_hash: str | None = None,
) -> tuple[list[AttackResult], float]:
    """
    Load one attack run.

    Returns:
        (results, absolute eps).

    Raises:
        FileNotFoundError: If an expected file is missing.
        ConfigError: If the run was produced under another config.
    """
    paths = attack_paths(directory, kind, relative_eps)
    df = read_frame(paths["csv"], expected_hash)
    manifest = read_manifest(paths["manifest"], ("blocks", "absolute_eps"))
    deltas = read_block(paths["manifest"].parent, manifest["blocks"]["delta"])
    x_pert = read_block(paths["manifest"].parent, manifest["blocks"]["x_perturbed"])

    results = []
    for i, row in enumerate(df.itertuples(index=False)):
        error = row.error if isinstance(row.error, str) and row.error else None
        results.append(
            AttackResult(
                delta=deltas[i],
                x_perturbed=x_pert[i],
                objective_trace=[],
                final_objective=float(row.final_objective),
                clamped=bool(row.clamped),
                point_index=int(row.point_index),
                error=error,
            )
        )
    return results, float(manifest["absolute_eps"])
