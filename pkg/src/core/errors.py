from __future__ import annotations

# Named failures shared by every layer. Each one subclasses the builtin the
# rest of the code base would otherwise raise, so callers that only catch
# ValueError / ArithmeticError keep working.


class NotPositiveDefinite(ArithmeticError):
    """Cholesky factorization met a pivot <= 0."""


class SingularGram(NotPositiveDefinite):
    """Feature Gram matrix could not be factorized (too few rows for d_phi)."""


class NoConvergence(ArithmeticError):
    """An iterative solver hit its iteration cap."""


class NonFiniteTrajectory(ArithmeticError):
    """ODE state left the finite range; the integrator step is too coarse."""


class FatalSimulatorError(RuntimeError):
    """A dataset row kept failing after the maximum number of resampling attempts."""


class NonFiniteOutput(ArithmeticError):
    """An estimator head produced NaN or inf."""


class DivergedTraining(ArithmeticError):
    """Training loss stayed non-finite after every learning-rate fallback."""


class ConfigError(ValueError):
    """Experiment configuration is malformed or inconsistent."""


class ManifestError(ValueError):
    """A manifest or raw block on disk could not be parsed."""

    def __init__(self, msg: str, *, byte_offset: int | None = None) -> None:
        super().__init__(msg)
        self.byte_offset = byte_offset


class DegenerateSpectrumWarning(UserWarning):
    """The two largest eigenvalues are tied within tolerance."""


class ZeroGradientWarning(UserWarning):
    """The attack objective had a vanishing gradient at initialization."""
