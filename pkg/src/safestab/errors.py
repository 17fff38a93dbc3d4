"""Exception hierarchy.

Errors raised while evaluating a batch of buffers carry a boolean ``mask``
marking the offending batch entries (``None`` for a single buffer), so the
Monte Carlo driver can retire only the paths that failed.
"""

from __future__ import annotations

import numpy as np


class SafestabError(Exception):
    """Base class for every error raised by this package."""

    category = "error"


class ConfigurationError(SafestabError, ValueError):
    category = "config_error"

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class ConfigParseError(ConfigurationError):
    category = "config_parse"


class UnknownNameError(ConfigurationError):
    """A registry lookup (preset, functional, controller) found nothing."""

    category = "unknown_name"


class DomainError(SafestabError, ValueError):
    category = "domain_error"


class _Masked(SafestabError):
    def __init__(self, message: str, mask: np.ndarray | None = None, step: int | None = None):
        super().__init__(message)
        self.mask = None if mask is None else np.asarray(mask, dtype=bool)
        self.step = step


class NumericError(_Masked, ArithmeticError):
    """Non-finite value produced by a quadrature or functional."""

    category = "numeric_error"


class NumericBlowupError(NumericError):
    """Integrator output left the finite range (or the |x| > 1e9 guard)."""

    category = "numeric_blowup"


class SafeSetViolation(_Masked):
    """A buffer outside Int(S) was handed to something defined only there."""

    category = "safe_set_violation"


class TransversalityError(_Masked):
    """||G(phi)||^2 fell below the transversality tolerance."""

    category = "transversality"


class SamplingError(SafestabError):
    category = "sampling_error"


def masked(mask: np.ndarray) -> np.ndarray | None:
    """Return ``mask`` for batched evaluations, ``None`` for scalar ones."""
    mask = np.asarray(mask)
    return None if mask.ndim == 0 else mask
