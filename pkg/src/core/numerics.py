from __future__ import annotations

# Dense linear algebra and counter-based random streams shared by every
# other module. All reals are float64.

import hashlib
import logging
import warnings
from dataclasses import dataclass, replace

import numpy as np
import numpy.typing as npt
from scipy import linalg

from src.core.errors import DegenerateSpectrumWarning, NoConvergence, NotPositiveDefinite

logger = logging.getLogger(__name__)

DenseMatrix = npt.NDArray[np.float64]

SYMMETRY_RTOL = 1e-10
EIG_TOL = 1e-8
EIG_MAX_ITERS = 10_000


# -----------------------------
# Dense matrices
# -----------------------------
def as_dense_matrix(data: npt.ArrayLike, *, name: str = "matrix") -> DenseMatrix:
    """
    Coerce array-like input into a finite, 2-D float64 array.

    Args:
        data: Nested sequence or array.
        name: Label used in error messages.

    Raises:
        ValueError: If the input is not 2-D or contains non-finite entries.
    """
    arr = np.array(data, dtype=np.float64, copy=True)
    if arr.ndim != 2:
        msg = f"{name} must be 2-D, got shape {arr.shape}"
        logger.error(msg)
        raise ValueError(msg)
    if not np.all(np.isfinite(arr)):
        msg = f"{name} contains non-finite entries"
        logger.error(msg)
        raise ValueError(msg)
    return arr


def _ensure_symmetric(m: DenseMatrix, name: str) -> None:
    if m.shape[0] != m.shape[1]:
        msg = f"{name} must be square, got shape {m.shape}"
        logger.error(msg)
        raise ValueError(msg)
    scale = max(float(np.max(np.abs(m), initial=0.0)), np.finfo(np.float64).tiny)
    asym = float(np.max(np.abs(m - m.T), initial=0.0))
    if asym > SYMMETRY_RTOL * scale:
        msg = f"{name} is not symmetric (max |m - m^T| = {asym:.3e})"
        logger.error(msg)
        raise ValueError(msg)


def cholesky_spd(m: npt.ArrayLike) -> DenseMatrix:
    """Lower Cholesky factor of a symmetric positive-definite matrix."""
    m = as_dense_matrix(m)
    _ensure_symmetric(m, "matrix")
    try:
        return linalg.cholesky(m, lower=True)
    except linalg.LinAlgError as e:
        msg = f"Matrix of shape {m.shape} is not positive definite: {e}"
        logger.error(msg)
        raise NotPositiveDefinite(msg) from e


def solve_spd(m: npt.ArrayLike, rhs: npt.ArrayLike) -> DenseMatrix:
    """
    Solve m·x = rhs for symmetric positive-definite m by Cholesky.

    Args:
        m: SPD matrix (n x n), symmetric within 1e-10 relative.
        rhs: Right-hand side, vector (n,) or matrix (n x k).

    Returns:
        x with the same shape as rhs.

    Raises:
        NotPositiveDefinite: If factorization meets a pivot <= 0.
    """
    m = as_dense_matrix(m)
    _ensure_symmetric(m, "matrix")
    rhs = np.asarray(rhs, dtype=np.float64)
    try:
        factor = linalg.cho_factor(m, lower=True)
    except linalg.LinAlgError as e:
        msg = f"Matrix of shape {m.shape} is not positive definite: {e}"
        logger.error(msg)
        raise NotPositiveDefinite(msg) from e
    return linalg.cho_solve(factor, rhs)


def inv_spd(m: npt.ArrayLike) -> DenseMatrix:
    """Inverse of an SPD matrix, symmetrized."""
    m = as_dense_matrix(m)
    inv = solve_spd(m, np.eye(m.shape[0]))
    return 0.5 * (inv + inv.T)


def floor_eigenvalues(m: npt.ArrayLike, floor: float) -> DenseMatrix:
    """Symmetric matrix with its eigenvalues clipped from below at `floor`."""
    m = as_dense_matrix(m)
    sym = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(sym)
    clipped = (vecs * np.maximum(vals, floor)) @ vecs.T
    return 0.5 * (clipped + clipped.T)


def _sign_convention(v: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    # First component of largest magnitude is positive
    idx = int(np.argmax(np.abs(v)))
    return -v if v[idx] < 0 else v


def _power_iterate(
    m: DenseMatrix, v: npt.NDArray[np.float64], tol: float, max_iters: int
) -> tuple[float, npt.NDArray[np.float64], bool]:
    lam = float(v @ m @ v)
    for _ in range(max_iters):
        w = m @ v
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0, v, True
        v = w / norm
        lam = float(v @ m @ v)
        resid = float(np.linalg.norm(m @ v - lam * v))
        if resid <= tol * max(abs(lam), np.finfo(np.float64).tiny):
            return lam, v, True
    return lam, v, False


def top_eigenpair(
    m: npt.ArrayLike,
    tol: float = EIG_TOL,
    max_iters: int = EIG_MAX_ITERS,
) -> tuple[float, npt.NDArray[np.float64]]:
    """
    Largest eigenvalue and unit eigenvector of a symmetric PSD matrix by power iteration.

    The eigenvector follows a fixed sign convention: its component of largest
    magnitude is positive. When the two largest Ritz values are tied within
    `tol`, a DegenerateSpectrumWarning is emitted and any unit vector in the
    top eigenspace is a valid answer.

    Raises:
        NoConvergence: If the residual ||m v - lambda v|| <= tol * lambda is not
            reached within max_iters.
    """
    if tol <= 0:
        msg = f"tol must be > 0, got {tol}"
        logger.error(msg)
        raise ValueError(msg)

    m = as_dense_matrix(m)
    _ensure_symmetric(m, "matrix")
    n = m.shape[0]

    if not np.any(m):
        return 0.0, _sign_convention(np.eye(n)[0])

    # Fixed pseudo-random start; never orthogonal to the top eigenvector in practice
    gen = RandomStream(seed=0x5EED).generator()
    start = gen.standard_normal(n)
    start /= np.linalg.norm(start)
    alt = gen.standard_normal(n)

    lam, v, converged = _power_iterate(m, start, tol, max_iters)
    if not converged:
        msg = f"Power iteration did not converge in {max_iters} iterations (n={n})"
        logger.error(msg)
        raise NoConvergence(msg)

    # Second Ritz value from the deflated matrix, only used to flag ties
    if n > 1:
        deflated = m - lam * np.outer(v, v)
        rest = alt - (alt @ v) * v
        rest_norm = float(np.linalg.norm(rest))
        if rest_norm > 0.0:
            lam2, _, _ = _power_iterate(deflated, rest / rest_norm, tol, min(max_iters, 2_000))
            if lam - lam2 < tol * max(abs(lam), 1.0):
                logger.warning("Degenerate top spectrum: lambda1=%.6g lambda2=%.6g", lam, lam2)
                warnings.warn(
                    f"top eigenvalues tied within tol ({lam:.6g} vs {lam2:.6g})",
                    DegenerateSpectrumWarning,
                    stacklevel=2,
                )

    return lam, _sign_convention(v)


# -----------------------------
# Random streams
# -----------------------------
def _derive_seed(seed: int, label: tuple[object, ...]) -> int:
    text = ":".join([str(seed), *(repr(part) for part in label)])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class RandomStream:
    """
    Counter-based random stream over the Philox bit generator.

    Output depends only on (seed, counter): every draw call uses the Philox
    block addressed by the current counter and then increments it, so a
    replay from the same pair is bitwise identical on every platform.
    Parallel workers never share a stream; they receive `substream(...)`
    copies keyed by a label such as a row index.
    """

    seed: int
    counter: int = 0

    def __post_init__(self) -> None:
        self.seed = int(self.seed) & 0xFFFF_FFFF_FFFF_FFFF
        if self.counter < 0:
            msg = f"counter must be >= 0, got {self.counter}"
            logger.error(msg)
            raise ValueError(msg)

    def generator(self) -> np.random.Generator:
        """numpy Generator bound to the next counter block."""
        bitgen = np.random.Philox(
            key=self.seed,
            counter=np.array([0, 0, 0, self.counter], dtype=np.uint64),
        )
        self.counter += 1
        return np.random.Generator(bitgen)

    def substream(self, *label: object) -> RandomStream:
        """Independent stream derived from (seed, label); does not touch this stream."""
        return RandomStream(seed=_derive_seed(self.seed, label))

    def copy(self) -> RandomStream:
        return replace(self)


def standard_normal(stream: RandomStream, n: int | tuple[int, ...]) -> npt.NDArray[np.float64]:
    """n i.i.d. standard normal draws (n may be a shape); advances the stream by one block."""
    shape = (n,) if isinstance(n, int) else tuple(n)
    if any(s < 0 for s in shape):
        msg = f"shape must be non-negative, got {shape}"
        logger.error(msg)
        raise ValueError(msg)
    return stream.generator().standard_normal(shape)


def uniform(stream: RandomStream, n: int | tuple[int, ...]) -> npt.NDArray[np.float64]:
    """Uniform draws on [0, 1); advances the stream by one block."""
    shape = (n,) if isinstance(n, int) else tuple(n)
    return stream.generator().random(shape)


def permutation(stream: RandomStream, n: int) -> npt.NDArray[np.int64]:
    return stream.generator().permutation(n)


def uniform_sphere(stream: RandomStream, n: int, dim: int, radius: float) -> npt.NDArray[np.float64]:
    """n points uniformly distributed on the L2 sphere of the given radius."""
    z = standard_normal(stream, (n, dim))
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return radius * z / norms


def uniform_ball(stream: RandomStream, n: int, dim: int, radius: float) -> npt.NDArray[np.float64]:
    """n points uniformly distributed in the L2 ball of the given radius."""
    directions = uniform_sphere(stream, n, dim, 1.0)
    radii = radius * uniform(stream, n) ** (1.0 / dim)
    return directions * radii[:, None]
