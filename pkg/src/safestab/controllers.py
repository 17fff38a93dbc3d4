"""Control laws built from Krasovskii functionals.

* :class:`SontagController` -- universal stabilizer from an SCLKF.
* :func:`safety_admissible` -- membership test for the barrier's admissible input set.
* :class:`SlidingController` -- sliding-mode law on ``U = psi(V, B)`` that
  forces the drift of ``U`` to ``-gain * U / (|U| + smoothing)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError, TransversalityError, masked
from .functionals import Jet, Scbkf, Sclkf, drift_from_jet, ito_trace
from .history import HistorySegment
from .sdde import SddeModel

ZERO_THRESHOLD = 1e-12
TRANSVERSALITY_TOL = 1e-10


def sontag_kappa(lam: float, p, q, zero_threshold: float = ZERO_THRESHOLD) -> np.ndarray:
    """``-(p + sqrt(p^2 + lam |q|^4)) / |q|^2 * q``, or 0 where ``|q|^2 <= zero_threshold``."""
    if not lam > 0:
        raise ConfigurationError("lambda must be positive", field="lambda")
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    q2 = np.sum(q * q, axis=-1)
    live = q2 > zero_threshold
    q2s = np.where(live, q2, 1.0)
    root = np.sqrt(p * p + lam * q2s * q2s)
    # p + root loses everything to cancellation when p << 0; rationalise there
    with np.errstate(divide="ignore", invalid="ignore"):
        num = np.where(p >= 0, p + root, lam * q2s * q2s / (root - p))
    coef = np.where(live, -num / q2s, 0.0)
    return coef[..., None] * q


@dataclass(frozen=True)
class SontagController:
    sclkf: Sclkf
    model: SddeModel
    lam: float = 1.0
    zero_threshold: float = ZERO_THRESHOLD

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigurationError("lambda must be positive", field="lambda")
        if not self.zero_threshold > 0:
            raise ConfigurationError("zero_threshold must be positive", field="zero_threshold")

    def terms(self, phi: HistorySegment):
        """``(a, b)``: the drift plus ``gamma1(V)``, and ``L_g V1``."""
        f, g, rho = self.model.evaluate(phi)
        jet = self.sclkf.functional.jet(phi)
        a, b = drift_from_jet(jet, f, g, rho)
        return a + self.sclkf.gamma1(jet.value), b

    def __call__(self, phi: HistorySegment) -> np.ndarray:
        return stabilizing_control(self, phi)


def stabilizing_control(ctrl: SontagController, phi: HistorySegment) -> np.ndarray:
    a, b = ctrl.terms(phi)
    u = sontag_kappa(ctrl.lam, a, b, ctrl.zero_threshold)
    at_origin = np.asarray(phi.sup_norm()) <= ctrl.zero_threshold
    return np.where(at_origin[..., None], 0.0, u)


def safety_admissible(scbkf: Scbkf, model: SddeModel, phi: HistorySegment, u):
    """Whether ``u`` keeps the barrier drift strictly below ``gamma2(h)``.

    Returns ``(admissible, margin)`` with ``margin = gamma2(h) - (a + b u)``.
    """
    h = scbkf.require_interior(phi)
    f, g, rho = model.evaluate(phi)
    a, b = drift_from_jet(scbkf.barrier.jet(phi), f, g, rho)
    margin = scbkf.gamma2(h) - (a + np.einsum("...j,...j->...", b, np.asarray(u, dtype=float)))
    return margin > 0, margin


# -- sliding surface -----------------------------------------------------

Scalar2 = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SlidingSurface:
    """``U(phi) = psi(V(phi), B(phi))``.

    ``ito`` selects the diffusion term of ``L``: ``"printed"`` adds
    ``0.5 tr[rho^T (hess V1 + hess B1) rho]`` with unit weights, ``"strict"``
    weights each Hessian by its psi-partial and adds the second-order psi
    terms, which is the exact Ito drift of ``psi(V, B)``.
    """

    sclkf: Sclkf
    scbkf: Scbkf
    psi: Scalar2
    dpsi_dv: Scalar2
    dpsi_db: Scalar2
    d2psi: tuple[Scalar2, Scalar2, Scalar2] | None = None
    ito: str = "printed"

    def __post_init__(self):
        if self.ito not in ("printed", "strict"):
            raise ConfigurationError(f"unknown ito mode {self.ito!r}", field="ito")

    def value(self, phi: HistorySegment):
        return self.psi(self.sclkf.value(phi), self.scbkf.eval_barrier(phi))

    __call__ = value

    def partial_error(self, points, step: float = 1e-6) -> float:
        """Worst ``|exact - fd| / max(1e-6, 1e-4 |exact|)`` over ``(v, b)`` points; <= 1 passes."""
        worst = 0.0
        for v, b in points:
            for exact, fd in (
                (self.dpsi_dv(v, b), (self.psi(v + step, b) - self.psi(v - step, b)) / (2 * step)),
                (self.dpsi_db(v, b), (self.psi(v, b + step) - self.psi(v, b - step)) / (2 * step)),
            ):
                err = abs(float(exact) - float(fd)) / max(1e-6, 1e-4 * abs(float(exact)))
                worst = max(worst, err)
        return worst


def additive_surface(
    sclkf: Sclkf,
    scbkf: Scbkf,
    alpha: Callable,
    dalpha: Callable,
    beta: Callable,
    dbeta: Callable,
    d2alpha: Callable | None = None,
    d2beta: Callable | None = None,
    ito: str = "printed",
    check_range: tuple[float, float] = (0.0, 1e3),
) -> SlidingSurface:
    """``U = alpha(V) + beta(B)`` with ``alpha, beta >= 0`` (checked on ``check_range``)."""
    grid = np.linspace(*check_range, 200)
    if np.any(np.asarray(alpha(grid)) < 0) or np.any(np.asarray(beta(grid)) < 0):
        raise ConfigurationError("alpha and beta must be nonnegative", field="surface")
    zero = lambda v, b: np.zeros(np.broadcast(v, b).shape)  # noqa: E731
    d2 = None
    if d2alpha is not None or d2beta is not None:
        d2 = (
            (lambda v, b: d2alpha(v) + 0.0 * b) if d2alpha else zero,
            zero,
            (lambda v, b: d2beta(b) + 0.0 * v) if d2beta else zero,
        )
    return SlidingSurface(
        sclkf,
        scbkf,
        psi=lambda v, b: alpha(v) + beta(b),
        dpsi_dv=lambda v, b: dalpha(v) + 0.0 * b,
        dpsi_db=lambda v, b: dbeta(b) + 0.0 * v,
        d2psi=d2,
        ito=ito,
    )


def linear_surface(
    sclkf: Sclkf, scbkf: Scbkf, weight_v: float = 1.0, weight_b: float = 1.0, ito: str = "printed"
) -> SlidingSurface:
    """``U = weight_v * V + weight_b * B``."""
    if weight_v < 0 or weight_b < 0:
        raise ConfigurationError("surface weights must be nonnegative", field="varrho")
    return additive_surface(
        sclkf,
        scbkf,
        alpha=lambda v: weight_v * v,
        dalpha=lambda v: weight_v + 0.0 * np.asarray(v, dtype=float),
        beta=lambda b: weight_b * b,
        dbeta=lambda b: weight_b + 0.0 * np.asarray(b, dtype=float),
        ito=ito,
    )


def sliding_set_in_interior(beta: Callable, barrier_floor: float, upper: float = 1e3) -> bool:
    """For additive surfaces, ``U = 0`` forces ``beta(B) = 0``; ``beta > 0`` above the
    barrier floor then keeps the sliding set inside Int(S)."""
    grid = np.linspace(barrier_floor, upper, 1000)[1:]
    return bool(np.all(np.asarray(beta(grid)) > 0))


@dataclass(frozen=True)
class SlidingTerms:
    """``D+ U = F + G u + L`` with ``F = H f`` and ``G = H g``."""

    H: np.ndarray
    F: np.ndarray
    G: np.ndarray
    L: np.ndarray
    U: np.ndarray
    V: np.ndarray
    B: np.ndarray
    f: np.ndarray
    g: np.ndarray


def sliding_terms(surface: SlidingSurface, model: SddeModel, phi: HistorySegment) -> SlidingTerms:
    vj: Jet = surface.sclkf.functional.jet(phi)
    bj: Jet = surface.scbkf.barrier.jet(phi)
    f, g, rho = model.evaluate(phi)
    pv = np.asarray(surface.dpsi_dv(vj.value, bj.value), dtype=float)
    pb = np.asarray(surface.dpsi_db(vj.value, bj.value), dtype=float)
    H = pv[..., None] * vj.grad + pb[..., None] * bj.grad
    F = np.einsum("...i,...i->...", H, f)
    G = np.einsum("...i,...ij->...j", H, g)
    L = pv * vj.dini + pb * bj.dini
    if surface.ito == "printed":
        L = L + ito_trace(rho, vj.hess + bj.hess)
    else:
        L = L + pv * ito_trace(rho, vj.hess) + pb * ito_trace(rho, bj.hess)
        if surface.d2psi is not None:
            pvv, pvb, pbb = (np.asarray(d(vj.value, bj.value), dtype=float) for d in surface.d2psi)
            sv = np.einsum("...i,...ip->...p", vj.grad, rho)
            sb = np.einsum("...i,...ip->...p", bj.grad, rho)
            L = L + 0.5 * (
                pvv * np.sum(sv * sv, axis=-1)
                + 2.0 * pvb * np.sum(sv * sb, axis=-1)
                + pbb * np.sum(sb * sb, axis=-1)
            )
    U = surface.psi(vj.value, bj.value)
    return SlidingTerms(H=H, F=F, G=G, L=L, U=U, V=vj.value, B=bj.value, f=f, g=g)


def _check_transversal(G, tol):
    G2 = np.sum(G * G, axis=-1)
    bad = ~(G2 > tol)
    if np.any(bad):
        raise TransversalityError(
            f"transversality violated: |G|^2 <= {tol:g}", mask=masked(bad)
        )
    return G2


def aux_j(f, g, G, tol: float = TRANSVERSALITY_TOL):
    """Auxiliary matrices ``J1`` (antisymmetric) and ``J2`` (symmetric).

    With ``c = g G^T``: ``J1 = (c f^T - f c^T) / (2|G|^2)`` and
    ``J2 = (c f^T + f c^T) / (2|G|^2)``, so ``H J1 H^T = 0`` and
    ``H (J1 + J2) H^T = H f``.
    """
    G2 = _check_transversal(np.asarray(G, dtype=float), tol)
    c = np.einsum("...ij,...j->...i", g, G)
    cf = np.einsum("...i,...j->...ij", c, f)
    fc = np.swapaxes(cf, -1, -2)
    denom = (2.0 * G2)[..., None, None]
    return (cf - fc) / denom, (cf + fc) / denom


def quad_form(H, J):
    """``H J H^T`` for row vectors ``H``."""
    return np.einsum("...i,...ij,...j->...", H, J, H)


def switching_term(U, gain: float, smoothing: float):
    """``gain * U / (|U| + smoothing)``."""
    return gain * U / (np.abs(U) + smoothing)


def sliding_input(terms: SlidingTerms, J2, K, tol: float = TRANSVERSALITY_TOL) -> np.ndarray:
    """``u = -G^T (H J2 H^T + L + K) / |G|^2``."""
    G2 = _check_transversal(terms.G, tol)
    scale = (quad_form(terms.H, J2) + terms.L + K) / G2
    return -scale[..., None] * terms.G


@dataclass(frozen=True)
class SlidingController:
    surface: SlidingSurface
    model: SddeModel
    gain: float
    smoothing: float = 0.1
    transversality_tol: float = TRANSVERSALITY_TOL

    def __post_init__(self):
        for name in ("gain", "smoothing", "transversality_tol"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive", field=name)

    def __call__(self, phi: HistorySegment) -> np.ndarray:
        return sliding_control(self, phi)

    def ideal(self, phi: HistorySegment) -> np.ndarray:
        """Input holding ``U`` constant in mean (no switching term)."""
        terms = self.terms(phi)
        _, J2 = aux_j(terms.f, terms.g, terms.G, self.transversality_tol)
        return sliding_input(terms, J2, 0.0 * terms.U, self.transversality_tol)

    def terms(self, phi: HistorySegment) -> SlidingTerms:
        self.surface.scbkf.require_interior(phi)
        return sliding_terms(self.surface, self.model, phi)


def sliding_control(ctrl: SlidingController, phi: HistorySegment) -> np.ndarray:
    terms = ctrl.terms(phi)
    _, J2 = aux_j(terms.f, terms.g, terms.G, ctrl.transversality_tol)
    K = switching_term(terms.U, ctrl.gain, ctrl.smoothing)
    return sliding_input(terms, J2, K, ctrl.transversality_tol)


def sliding_drift(terms: SlidingTerms, u) -> np.ndarray:
    """``F + G u + L``, the drift of ``U`` under input ``u``."""
    return terms.F + np.einsum("...j,...j->...", terms.G, np.asarray(u, dtype=float)) + terms.L
