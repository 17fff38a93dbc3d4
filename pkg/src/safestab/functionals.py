"""Smoothly separable functionals and the Lyapunov/barrier structures built on them.

A separable functional splits as ``V(phi) = V1(phi(0)) + V2(phi)``.  What the
controllers need from it is a :class:`Jet`: the value, the gradient and
Hessian of the pointwise part with respect to ``phi(0)``, and the Dini
derivative of the history part.  Jets are analytic; nothing here estimates
derivatives numerically.

All callables broadcast over a leading batch axis.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple

import numpy as np

from .errors import ConfigurationError, DomainError, NumericError, SafeSetViolation, masked
from .history import HistorySegment

Pointwise = Callable[[np.ndarray], np.ndarray]


# -- comparison functions ------------------------------------------------

@dataclass(frozen=True)
class ClassKFunction:
    """A class-K (or K-infinity) comparison function, validated on a sampled grid."""

    evaluator: Callable[[np.ndarray], np.ndarray]
    kind: str = "K"
    domain: tuple[float, float] = (0.0, 1e3)
    name: str = "alpha"

    def __post_init__(self):
        if self.kind not in ("K", "Kinf"):
            raise ConfigurationError(f"unknown class kind {self.kind!r}", field="kind")
        if abs(float(self.evaluator(np.float64(0.0)))) > 1e-12:
            raise ConfigurationError(f"{self.name}(0) must be 0", field=self.name)
        grid = np.linspace(self.domain[0], self.domain[1], 100)
        vals = np.asarray([float(self.evaluator(s)) for s in grid])
        if np.any(vals < 0) or np.any(np.diff(vals) <= 0):
            raise ConfigurationError(f"{self.name} is not strictly increasing on {self.domain}", field=self.name)
        # smoke test for unboundedness only
        if self.kind == "Kinf" and not float(self.evaluator(np.float64(1e6))) > 1e3:
            raise ConfigurationError(f"{self.name} does not look unbounded", field=self.name)

    def __call__(self, s):
        return self.evaluator(s)


def linear_k(slope: float = 1.0, name: str = "linear") -> ClassKFunction:
    if slope <= 0:
        raise ConfigurationError("slope must be positive", field="slope")
    return ClassKFunction(lambda s: slope * np.asarray(s, dtype=float), kind="Kinf", name=name)


def power_k(coef: float, power: float, name: str = "power") -> ClassKFunction:
    return ClassKFunction(
        lambda s: coef * np.abs(np.asarray(s, dtype=float)) ** power, kind="Kinf", name=name
    )


# -- separable functionals -----------------------------------------------

class Jet(NamedTuple):
    value: np.ndarray
    grad: np.ndarray  # d V1 / d phi(0), shape (..., n)
    hess: np.ndarray  # shape (..., n, n)
    dini: np.ndarray  # D+ V2


@dataclass(frozen=True)
class SeparableFunctional:
    """``V(phi) = v1(phi(0)) + v2(phi)`` with analytic derivative data."""

    v1: Pointwise
    grad_v1: Pointwise
    hess_v1: Pointwise
    v2: Callable[[HistorySegment], np.ndarray]
    dini_v2: Callable[[HistorySegment], np.ndarray]
    name: str = "V"

    def head_value(self, phi: HistorySegment, x):
        """Value with ``phi(0)`` replaced by ``x`` in the pointwise part only."""
        return self.v1(np.asarray(x, dtype=float)) + self.v2(phi)

    def value(self, phi: HistorySegment):
        out = self.v1(phi.newest) + self.v2(phi)
        return _finite(out, self.name)

    __call__ = value

    def jet(self, phi: HistorySegment) -> Jet:
        x = phi.newest
        return Jet(
            _finite(self.v1(x) + self.v2(phi), self.name),
            np.asarray(self.grad_v1(x), dtype=float),
            np.asarray(self.hess_v1(x), dtype=float),
            np.asarray(self.dini_v2(phi), dtype=float),
        )


def integral_functional(
    v1: Pointwise,
    grad_v1: Pointwise,
    hess_v1: Pointwise,
    w: Pointwise,
    name: str = "V",
) -> SeparableFunctional:
    """History part ``int_{-delay}^0 w(phi(tau)) dtau``; its Dini derivative is
    ``w(phi(0)) - w(phi(-delay))``."""
    return SeparableFunctional(
        v1=v1,
        grad_v1=grad_v1,
        hess_v1=hess_v1,
        v2=lambda phi: phi.integrate(w),
        dini_v2=lambda phi: w(phi.newest) - w(phi.oldest),
        name=name,
    )


@dataclass(frozen=True)
class LogBarrier:
    """``B(phi) = ln(1 + 1/h(phi))`` for a separable ``h``, defined on ``h > 0``.

    B is kept separable by freezing the history part of ``h`` inside the
    pointwise part; the chain rule then gives

        grad B1 = B'(h) grad h1,  hess B1 = B''(h) grad h1 grad h1^T + B'(h) hess h1,
        D+ B2  = B'(h) D+ h2,

    with ``B'(h) = -1/(h(1+h))`` and ``B''(h) = (2h+1)/(h(1+h))^2``.
    """

    h: SeparableFunctional
    name: str = "B"

    @staticmethod
    def wrap(h):
        return np.log1p(1.0 / h)

    def _check(self, h):
        bad = ~(np.asarray(h) > 0)
        if np.any(bad):
            raise SafeSetViolation(f"{self.name} undefined: h <= 0", mask=masked(bad))

    def head_value(self, phi: HistorySegment, x):
        h = np.asarray(self.h.head_value(phi, x), dtype=float)
        self._check(h)
        return self.wrap(h)

    def value(self, phi: HistorySegment):
        h = np.asarray(self.h.value(phi), dtype=float)
        self._check(h)
        return self.wrap(h)

    __call__ = value

    def jet(self, phi: HistorySegment) -> Jet:
        hj = self.h.jet(phi)
        h = hj.value
        self._check(h)
        d1 = -1.0 / (h * (1.0 + h))
        d2 = (2.0 * h + 1.0) / (h * (1.0 + h)) ** 2
        d1e, d2e = np.expand_dims(d1, -1), np.expand_dims(d2, (-1, -2))
        grad = d1e * hj.grad
        hess = d2e * np.einsum("...i,...j->...ij", hj.grad, hj.grad) + d1e[..., None] * hj.hess
        return Jet(self.wrap(h), grad, hess, d1 * hj.dini)


def _finite(val, name):
    val = np.asarray(val, dtype=float)
    bad = ~np.isfinite(val)
    if np.any(bad):
        raise NumericError(f"{name} evaluated to a non-finite value", mask=masked(bad))
    return float(val) if val.ndim == 0 else val


# -- SCLKF / SCBKF -------------------------------------------------------

@dataclass(frozen=True)
class Sclkf:
    """Lyapunov-Krasovskii functional with its decay rate ``gamma1``.

    ``alpha1``/``alpha2`` are the K-infinity sandwich; ``deviation`` maps a
    state to the error whose norm enters the sandwich (identity by default,
    ``x - target`` for tracking functionals).
    """

    functional: SeparableFunctional
    gamma1: ClassKFunction
    alpha1: ClassKFunction | None = None
    alpha2: ClassKFunction | None = None
    deviation: Pointwise | None = None

    def value(self, phi):
        return self.functional.value(phi)

    def sandwich_margin(self, buffers: Iterable[HistorySegment]) -> float:
        """Worst ``min(V - alpha1(|e(0)|), alpha2(||e||) - V)`` over the buffers.

        Negative means the sandwich was violated somewhere; a warning is issued.
        """
        if self.alpha1 is None or self.alpha2 is None:
            raise ConfigurationError("sandwich functions not configured", field="alpha")
        dev = self.deviation or (lambda x: x)
        worst = np.inf
        for phi in buffers:
            v = self.value(phi)
            e = dev(phi.samples)
            lo = v - self.alpha1(np.linalg.norm(e[..., -1, :], axis=-1))
            hi = self.alpha2(np.max(np.linalg.norm(e, axis=-1), axis=-1)) - v
            worst = min(worst, float(np.min(lo)), float(np.min(hi)))
        if worst < 0:
            warnings.warn(f"SCLKF sandwich violated (worst margin {worst:.3g})", stacklevel=2)
        return worst


class Region(enum.Enum):
    INTERIOR = "interior"
    BOUNDARY = "boundary"
    EXTERIOR = "exterior"


@dataclass(frozen=True)
class Scbkf:
    """Barrier-Krasovskii functional ``B`` for the safe set ``{h >= 0}``."""

    barrier: LogBarrier | SeparableFunctional
    h: SeparableFunctional
    gamma2: ClassKFunction
    alpha1: ClassKFunction | None = None
    alpha2: ClassKFunction | None = None
    boundary_tol: float = 1e-9

    def eval_h(self, phi: HistorySegment):
        return self.h.value(phi)

    def region(self, phi: HistorySegment):
        """Region of each buffer; ``|h| <= boundary_tol`` counts as boundary."""
        h = np.asarray(self.eval_h(phi))
        out = np.where(
            np.abs(h) <= self.boundary_tol,
            Region.BOUNDARY,
            np.where(h > 0, Region.INTERIOR, Region.EXTERIOR),
        )
        return out.item() if out.ndim == 0 else out

    def eval_barrier(self, phi: HistorySegment):
        return self.barrier.value(phi)

    def require_interior(self, phi: HistorySegment):
        h = np.asarray(self.eval_h(phi))
        bad = ~(np.asarray(h) > 0)
        if np.any(bad):
            raise SafeSetViolation("buffer is not in the interior of the safe set", mask=masked(bad))
        return h

    def sandwich_margin(self, buffers: Iterable[HistorySegment]) -> float:
        """Worst margin of ``alpha1(h) <= 1/B <= alpha2(h)`` over interior buffers."""
        if self.alpha1 is None or self.alpha2 is None:
            raise ConfigurationError("sandwich functions not configured", field="alpha")
        worst = np.inf
        for phi in buffers:
            h = self.require_interior(phi)
            inv = 1.0 / np.asarray(self.barrier.value(phi))
            worst = min(
                worst,
                float(np.min(inv - self.alpha1(h))),
                float(np.min(self.alpha2(h) - inv)),
            )
        if worst < 0:
            warnings.warn(f"SCBKF reciprocal sandwich violated (worst margin {worst:.3g})", stacklevel=2)
        return worst


# -- drift ---------------------------------------------------------------

def ito_trace(rho: np.ndarray, hess: np.ndarray) -> np.ndarray:
    """``0.5 tr[rho^T hess rho]``."""
    return 0.5 * np.einsum("...ip,...ij,...jp->...", rho, hess, rho)


def drift_from_jet(jet: Jet, f, g, rho):
    """``(a, b)`` such that the Ito drift of the functional under input ``u`` is ``a + b u``."""
    a = np.einsum("...i,...i->...", jet.grad, f) + ito_trace(rho, jet.hess) + jet.dini
    b = np.einsum("...i,...ij->...j", jet.grad, g)
    return a, b


def drift_decomposition(functional, model, phi: HistorySegment):
    """Split the infinitesimal generator of ``functional`` into ``(a_drift, b_row)``."""
    if phi.state_dim != model.n:
        raise DomainError(f"buffer dimension {phi.state_dim} != model dimension {model.n}")
    f, g, rho = model.evaluate(phi)
    return drift_from_jet(functional.jet(phi), f, g, rho)


# -- registry ------------------------------------------------------------

def quadratic_tracking(target, weights=None, name: str = "V") -> SeparableFunctional:
    """``sum_i w_i (x_i - r_i)^2`` at ``phi(0)`` plus its integral over the delay window."""
    target = np.asarray(target, dtype=float)
    weights = np.ones_like(target) if weights is None else np.asarray(weights, dtype=float)
    if weights.shape != target.shape or np.any(weights < 0):
        raise ConfigurationError("weights must be nonnegative and match target", field="weights")

    live = np.flatnonzero(weights)

    def v1(x):
        d = x[..., live] - target[live]
        return np.sum(weights[live] * d * d, axis=-1)

    def grad(x):
        return 2.0 * weights * (x - target)

    hess_const = np.diag(2.0 * weights)

    def hess(x):
        return np.broadcast_to(hess_const, np.shape(x)[:-1] + hess_const.shape)

    return integral_functional(v1, grad, hess, v1, name=name)


def headway_safe_set(
    n: int,
    speed_index: int = 0,
    gap_index: int = 2,
    headway: float = 1.8,
    integral_weight: float = 0.01,
    name: str = "h",
) -> SeparableFunctional:
    """``z(phi(0)) - c int z(phi(tau))^2 dtau`` with ``z = x_gap - headway * x_speed``."""
    coeffs = np.zeros(n)
    coeffs[gap_index] = 1.0
    coeffs[speed_index] = -headway

    def z(x):
        return x[..., gap_index] - headway * x[..., speed_index]

    def w(x):
        return -integral_weight * z(x) ** 2

    zero_hess = np.zeros((n, n))
    return integral_functional(
        v1=z,
        grad_v1=lambda x: np.broadcast_to(coeffs, np.shape(x)),
        hess_v1=lambda x: np.broadcast_to(zero_hess, np.shape(x)[:-1] + (n, n)),
        w=w,
        name=name,
    )


def headway_barrier(n: int, **kwargs) -> tuple[SeparableFunctional, LogBarrier]:
    """The headway safe-set functional and its logarithmic barrier."""
    h = headway_safe_set(n, **kwargs)
    return h, LogBarrier(h)


FUNCTIONALS: dict[str, Callable] = {
    "quadratic_tracking": quadratic_tracking,
    "headway_barrier": headway_barrier,
}


def reciprocal_log_bounds() -> tuple[ClassKFunction, ClassKFunction]:
    """Class-K pair with ``alpha1(h) <= 1/ln(1 + 1/h) <= alpha2(h)`` for all ``h > 0``.

    ``ln(1 + y) <= y`` gives the lower bound ``h``; the upper bound adds ``h`` to
    the (increasing, vanishing-at-zero) reciprocal itself.
    """

    def recip(s):
        s = np.asarray(s, dtype=float)
        with np.errstate(divide="ignore"):
            out = np.where(s > 0, 1.0 / np.log1p(1.0 / np.where(s > 0, s, 1.0)), 0.0)
        return out

    lower = ClassKFunction(lambda s: np.asarray(s, dtype=float), kind="Kinf", name="alpha1")
    upper = ClassKFunction(lambda s: recip(s) + np.asarray(s, dtype=float), kind="Kinf", name="alpha2")
    return lower, upper
