from __future__ import annotations

# Line plots of the evaluation tables, written as standalone SVG files.
# Output is byte-stable: Agg backend, fixed svg.hashsalt, no date metadata.

import logging
from collections.abc import Sequence
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

logger = logging.getLogger(__name__)

SVG_HASHSALT = "robust-npe"
FIGSIZE = (5.0, 4.0)

_STYLE = {
    "svg.hashsalt": SVG_HASHSALT,
    "svg.fonttype": "none",
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _save_svg(fig: plt.Figure, path: Path, config_hash: str | None = None) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    metadata: dict[str, str | None] = {"Date": None, "Creator": None}
    if config_hash:
        # Lands in <metadata> as dc:description
        metadata["Description"] = f"config_hash: {config_hash}"
    fig.savefig(path, format="svg", metadata=metadata)
    plt.close(fig)
    logger.info("Wrote plot -> %s", path)
    return path


def plot_kl_vs_eps(
    report: pd.DataFrame,
    path: str | Path,
    *,
    bound: tuple[Sequence[float], Sequence[float]] | None = None,
    config_hash: str | None = None,
) -> Path:
    """
    Median KL against relative eps (log-log), one line per attack kind with
    15%/85% quantile bars.

    Args:
        report: Robustness report table (attack, relative_eps, median_kl, q15_kl, q85_kl).
        path: Output SVG path.
        bound: Optional (relative eps, KL) curve drawn dashed, e.g. the
            largest-eigenvalue bound of the exact linear-Gaussian posterior.
        config_hash: Embedded in the SVG metadata when given.
    """
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=FIGSIZE)
        for attack, rows in report.groupby("attack", sort=True):
            rows = rows.sort_values("relative_eps")
            med = rows["median_kl"].to_numpy()
            yerr = np.vstack([med - rows["q15_kl"].to_numpy(), rows["q85_kl"].to_numpy() - med])
            ax.errorbar(rows["relative_eps"], med, yerr=np.clip(yerr, 0, None), marker="o", capsize=3, label=str(attack))

        if bound is not None:
            ax.plot(bound[0], bound[1], linestyle="--", color="black", label="0.5 lambda_max eps^2")

        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("relative eps")
        ax.set_ylabel("KL(q(theta|x) || q(theta|x_adv))")
        ax.legend(loc="best")
        fig.tight_layout()
        return _save_svg(fig, Path(path), config_hash)


def plot_coverage(curves: pd.DataFrame, path: str | Path, *, config_hash: str | None = None) -> Path:
    """Empirical against nominal coverage, one line per condition, with the identity as reference."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=FIGSIZE)
        ax.plot([0, 1], [0, 1], linestyle=":", color="black", label="identity")
        for label, rows in curves.groupby("condition", sort=False):
            rows = rows.sort_values("nominal")
            ax.plot(rows["nominal"], rows["empirical"], label=str(label))

        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_xlabel("nominal coverage")
        ax.set_ylabel("empirical coverage")
        ax.legend(loc="upper left")
        fig.tight_layout()
        return _save_svg(fig, Path(path), config_hash)


def plot_tradeoff(sweep: pd.DataFrame, path: str | Path, *, config_hash: str | None = None) -> Path:
    """Clean accuracy against median post-attack KL across the beta grid."""
    rows = sweep[~sweep["flagged"].astype(bool)]
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=FIGSIZE)
        ax.plot(rows["robustness"], rows["accuracy"], marker="o")
        for beta, kl, acc in zip(rows["beta"], rows["robustness"], rows["accuracy"]):
            ax.annotate(f"{beta:g}", (kl, acc), textcoords="offset points", xytext=(4, 4), fontsize=8)
        ax.set_xscale("log")
        ax.set_xlabel("median KL under attack")
        ax.set_ylabel("mean log q(theta|x)")
        fig.tight_layout()
        return _save_svg(fig, Path(path), config_hash)
