"""Monte Carlo estimates of safety and stability, plus algebraic identity suites.

Probabilities are judged on the simulation grid.  Paths that fail (blow-up,
safe-set violation inside the controller, transversality loss) count as
unsafe and non-convergent.  KL envelopes are not fitted: the reports carry
empirical frequencies and decay curves only.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

from .controllers import (
    SlidingController,
    SontagController,
    aux_j,
    quad_form,
    sliding_drift,
    sliding_input,
    sliding_terms,
    switching_term,
)
from .errors import SamplingError, TransversalityError, _Masked
from .functionals import Scbkf, Sclkf
from .history import HistorySegment
from .sdde import SddeModel, simulate_batch

Z95 = 1.959963984540054


def wilson_interval(successes: int, trials: int, z: float = Z95) -> tuple[float, float]:
    if trials <= 0:
        return 0.0, 1.0
    p = successes / trials
    denom = 1.0 + z * z / trials
    center = (p + z * z / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    return max(0.0, min(p, center - half)), min(1.0, max(p, center + half))


def moving_average(values: np.ndarray, window: int) -> np.ndarray:
    window = max(1, min(int(window), len(values)))
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


@dataclass
class FailedPath:
    index: int
    step: int
    category: str
    message: str


@dataclass
class MonteCarloReport:
    paths: int
    horizon: float
    dt: float
    seed_base: int
    safe_paths: int
    safety_probability: float
    ci_lo: float
    ci_hi: float
    failed_paths: list[FailedPath]
    min_constraint: np.ndarray
    curve_times: np.ndarray
    mean_curves: dict[str, np.ndarray]
    terminal_error: np.ndarray
    mean_terminal_error: float
    eventually_decreasing: bool | None
    config: dict = field(default_factory=dict)

    @property
    def failed(self) -> int:
        return len(self.failed_paths)

    def to_dict(self) -> dict:
        d = {
            "paths": self.paths,
            "horizon": self.horizon,
            "dt": self.dt,
            "seed_base": self.seed_base,
            "safe_paths": self.safe_paths,
            "safety_probability": self.safety_probability,
            "safety_ci95": [self.ci_lo, self.ci_hi],
            "failed_paths": [asdict(f) for f in self.failed_paths],
            "mean_terminal_error": self.mean_terminal_error,
            "eventually_decreasing": self.eventually_decreasing,
            "min_constraint": _tolist(self.min_constraint),
            "terminal_error": _tolist(self.terminal_error),
            "curves": {"t": _tolist(self.curve_times), **{k: _tolist(v) for k, v in self.mean_curves.items()}},
            "notes": [
                "safety judged on the simulation grid (min over steps)",
                "failed paths count as unsafe and non-convergent",
                "probability is a finite-sample estimate at one confidence level; no KL envelope is fitted",
            ],
            "config": self.config,
        }
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, allow_nan=True)

    def summary(self) -> str:
        lines = [
            f"paths                 {self.paths} (seed_base {self.seed_base})",
            f"horizon / dt          {self.horizon:g} s / {self.dt:g} s",
            f"safety probability    {self.safety_probability:.4f}  "
            f"[95% Wilson {self.ci_lo:.4f}, {self.ci_hi:.4f}]",
            f"failed paths          {self.failed}",
            f"mean terminal error   {self.mean_terminal_error:.6g}",
            f"E[V] eventually decr. {self.eventually_decreasing}",
        ]
        for f in self.failed_paths[:10]:
            lines.append(f"  path {f.index}: step {f.step} {f.category}: {f.message}")
        if self.failed > 10:
            lines.append(f"  ... {self.failed - 10} more")
        return "\n".join(lines) + "\n"

    def per_path_csv(self) -> str:
        rows = ["path,seed,min_constraint,terminal_error,failed"]
        failed = {f.index for f in self.failed_paths}
        for i in range(self.paths):
            rows.append(
                f"{i},{self.seed_base + i},{format(float(self.min_constraint[i]), '.17g')},"
                f"{format(float(self.terminal_error[i]), '.17g')},{int(i in failed)}"
            )
        return "\n".join(rows) + "\n"


def _tolist(a) -> list:
    return [None if not np.isfinite(v) else float(v) for v in np.asarray(a, dtype=float).ravel()]


def _eval_or_nan(fn: Callable, hist: HistorySegment) -> np.ndarray:
    """Evaluate a batched functional, NaN where it is undefined."""
    try:
        return np.asarray(fn(hist), dtype=float)
    except _Masked as exc:
        if exc.mask is None or exc.mask.all():
            return np.full(hist.batch_size, np.nan)
        out = np.full(hist.batch_size, np.nan)
        good = ~exc.mask
        out[good] = _eval_or_nan(fn, hist.take(good))
        return out


def run_monte_carlo(
    model: SddeModel,
    controller: Callable,
    init,
    horizon: float,
    dt: float,
    paths: int,
    seed_base: int,
    constraint: Callable[[HistorySegment], np.ndarray],
    curves: Mapping[str, Callable[[HistorySegment], np.ndarray]] | None = None,
    terminal_error: Callable[[np.ndarray], np.ndarray] | None = None,
    record_every: int = 10,
    decreasing_curve: str | None = None,
    burn_in: float | None = None,
    smoothing_window: float = 1.0,
    config: dict | None = None,
) -> MonteCarloReport:
    """Simulate ``paths`` seeded paths and aggregate per-path results by path index.

    ``constraint`` is evaluated at every step; a path is safe when its minimum
    stays ``>= 0``.  ``curves`` are recorded every ``record_every`` steps and
    averaged over successful paths.
    """
    if paths < 1:
        raise ValueError("paths must be at least 1")
    curves = dict(curves or {})
    steps = int(round(horizon / dt))
    n_rec = steps // record_every + 1
    min_c = np.full(paths, np.inf)
    recorded = {k: np.full((paths, n_rec), np.nan) for k in curves}

    def observe(k, t, hist, u, active):
        c = _eval_or_nan(constraint, hist)
        c = np.where(np.isnan(c), -np.inf, c)
        min_c[active] = np.minimum(min_c[active], c)
        if k % record_every == 0:
            j = k // record_every
            for name, fn in curves.items():
                recorded[name][active, j] = _eval_or_nan(fn, hist)

    result = simulate_batch(
        model, controller, init, horizon, dt, range(seed_base, seed_base + paths), on_step=observe
    )
    ok = result.succeeded
    safe = ok & (min_c >= 0)
    lo, hi = wilson_interval(int(safe.sum()), paths)
    err_fn = terminal_error or (lambda x: np.linalg.norm(x, axis=-1))
    term = np.asarray(err_fn(result.final_states), dtype=float)
    term = np.where(ok, term, np.nan)
    mean_curves = {
        k: (np.mean(v[ok], axis=0) if ok.any() else np.full(n_rec, np.nan)) for k, v in recorded.items()
    }
    times = np.arange(n_rec) * record_every * dt
    decreasing = None
    if decreasing_curve is not None and ok.any():
        decreasing = eventually_decreasing(
            times, mean_curves[decreasing_curve],
            burn_in if burn_in is not None else horizon / 10, smoothing_window,
        )
    failed = [FailedPath(i, f.step, f.category, f.message) for i, f in sorted(result.failures.items())]
    return MonteCarloReport(
        paths=paths,
        horizon=horizon,
        dt=dt,
        seed_base=seed_base,
        safe_paths=int(safe.sum()),
        safety_probability=float(safe.mean()),
        ci_lo=lo,
        ci_hi=hi,
        failed_paths=failed,
        min_constraint=min_c,
        curve_times=times,
        mean_curves=mean_curves,
        terminal_error=term,
        mean_terminal_error=float(np.mean(term[ok])) if ok.any() else float("nan"),
        eventually_decreasing=decreasing,
        config=dict(config or {}),
    )


def eventually_decreasing(times, values, burn_in: float, window: float) -> bool:
    """Moving average over ``window`` seconds is non-increasing after ``burn_in``."""
    values = np.asarray(values, dtype=float)
    if len(times) < 2:
        return True
    step = times[1] - times[0]
    smooth = moving_average(values[times >= burn_in], int(round(window / step)))
    scale = max(1.0, float(np.max(np.abs(smooth)))) if smooth.size else 1.0
    return bool(np.all(np.diff(smooth) <= 1e-12 * scale))


def estimate_safety(
    model: SddeModel,
    controller: Callable,
    scbkf: Scbkf,
    init,
    horizon: float,
    dt: float,
    paths: int,
    seed_base: int,
    constraint: Callable[[HistorySegment], np.ndarray] | None = None,
    **kwargs,
) -> MonteCarloReport:
    """Fraction of paths whose constraint (``h`` by default) never goes negative."""
    curves = kwargs.pop("curves", {"h": scbkf.eval_h, "B": scbkf.eval_barrier})
    return run_monte_carlo(
        model, controller, init, horizon, dt, paths, seed_base,
        constraint=constraint or scbkf.eval_h, curves=curves, **kwargs,
    )


def estimate_stability(
    model: SddeModel,
    controller: Callable,
    sclkf: Sclkf,
    init,
    horizon: float,
    dt: float,
    paths: int,
    seed_base: int,
    terminal_error: Callable[[np.ndarray], np.ndarray] | None = None,
    **kwargs,
) -> MonteCarloReport:
    """Path-averaged ``E[V]`` curve, terminal error and an eventual-decrease flag."""
    curves = {"V": sclkf.value, **kwargs.pop("curves", {})}
    always = lambda hist: np.zeros(hist.batch_size)  # noqa: E731
    return run_monte_carlo(
        model, controller, init, horizon, dt, paths, seed_base,
        constraint=kwargs.pop("constraint", always), curves=curves,
        terminal_error=terminal_error, decreasing_curve="V", **kwargs,
    )


# -- identities -----------------------------------------------------------

@dataclass
class IdentityCheck:
    name: str
    tolerance: str
    worst_abs: float = 0.0
    worst_rel: float = 0.0
    violations: int = 0
    checked: int = 0

    @property
    def passed(self) -> bool:
        return self.violations == 0


@dataclass
class IdentityReport:
    count: int
    checks: list[IdentityCheck]
    skipped_transversality: int = 0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "passed": self.passed,
            "skipped_transversality": self.skipped_transversality,
            "checks": [{**asdict(c), "passed": c.passed} for c in self.checks],
        }

    def summary(self) -> str:
        lines = [f"identity suite on {self.count} buffers: {'PASS' if self.passed else 'FAIL'}"]
        for c in self.checks:
            lines.append(
                f"  {'PASS' if c.passed else 'FAIL'} {c.name:<22} worst abs {c.worst_abs:.3e} "
                f"rel {c.worst_rel:.3e} ({c.violations}/{c.checked} over {c.tolerance})"
            )
        return "\n".join(lines) + "\n"


def _record(check: IdentityCheck, err: np.ndarray, scale: np.ndarray, limit: np.ndarray):
    err, scale, limit = (np.atleast_1d(np.asarray(a, dtype=float)) for a in (err, scale, limit))
    if err.size == 0:
        return
    check.checked += err.size
    check.worst_abs = max(check.worst_abs, float(np.max(err)))
    check.worst_rel = max(check.worst_rel, float(np.max(err / np.maximum(scale, 1e-300))))
    check.violations += int(np.sum(~(err <= limit)))


def identity_suite(
    sontag: SontagController | None,
    sliding: SlidingController,
    buffers: HistorySegment | None,
    aux: Callable = aux_j,
) -> IdentityReport:
    """Check the controller algebra pointwise on a batch of interior buffers.

    * Sontag decrement: ``a + b u = -sqrt(a^2 + lam |b|^4)`` (1e-9 relative)
    * ``H J1 H^T = 0`` and ``H (J1 + J2) H^T = F`` (1e-10 (1 + |H|^2 |J1|))
    * sliding drift ``F + G u + L = -K`` (1e-9 relative to ``|F| + |G u| + |L| + |K|``)
    * sign ``U (F + G u + L) <= 0``

    ``aux`` replaces :func:`aux_j`, for fault injection.
    """
    checks = {
        "sontag_decrement": IdentityCheck("sontag_decrement", "1e-9 rel"),
        "HJ1H_zero": IdentityCheck("HJ1H_zero", "1e-10(1+|H|^2|J1|)"),
        "HJ1J2H_eq_F": IdentityCheck("HJ1J2H_eq_F", "1e-10(1+|H|^2|J1|)"),
        "sliding_drift": IdentityCheck("sliding_drift", "1e-9 rel"),
        "sliding_sign": IdentityCheck("sliding_sign", "U*drift <= 0"),
    }
    count = 0 if buffers is None else (buffers.batch_size or 1)
    report = IdentityReport(count, list(checks.values()))
    if count == 0:
        return report

    if sontag is not None:
        a, b = sontag.terms(buffers)
        u = sontag(buffers)
        b2 = np.sum(b * b, axis=-1)
        live = b2 > sontag.zero_threshold
        lhs = a + np.sum(b * u, axis=-1)
        rhs = -np.sqrt(a * a + sontag.lam * b2 * b2)
        err = np.abs(lhs - rhs)[live]
        scale = np.abs(rhs)[live]
        _record(checks["sontag_decrement"], err, scale, 1e-9 * scale)

    terms = sliding_terms(sliding.surface, sliding.model, buffers)
    G2 = np.atleast_1d(np.sum(terms.G * terms.G, axis=-1))
    live = G2 > sliding.transversality_tol
    report.skipped_transversality = int(np.sum(~live))
    if not live.any():
        return report
    if buffers.batch_size is not None and not live.all():
        buffers = buffers.take(live)
        terms = sliding_terms(sliding.surface, sliding.model, buffers)
    try:
        J1, J2 = aux(terms.f, terms.g, terms.G, sliding.transversality_tol)
    except TransversalityError:  # pragma: no cover - filtered above
        return report
    H = terms.H
    tol_j = 1e-10 * (1.0 + np.sum(H * H, axis=-1) * np.linalg.norm(J1, axis=(-2, -1)))
    e1 = np.abs(quad_form(H, J1))
    e2 = np.abs(quad_form(H, J1 + J2) - terms.F)
    _record(checks["HJ1H_zero"], e1, tol_j, tol_j)
    _record(checks["HJ1J2H_eq_F"], e2, tol_j, tol_j)

    K = switching_term(terms.U, sliding.gain, sliding.smoothing)
    u = sliding_input(terms, J2, K, sliding.transversality_tol)
    drift = sliding_drift(terms, u)
    Gu = np.sum(terms.G * u, axis=-1)
    scale = np.abs(terms.F) + np.abs(Gu) + np.abs(terms.L) + np.abs(K)
    _record(checks["sliding_drift"], np.abs(drift + K), scale, 1e-9 * scale)
    sign = np.maximum(terms.U * drift, 0.0)
    _record(checks["sliding_sign"], sign, np.abs(terms.U * drift), np.zeros_like(sign))
    return report


# -- boundary condition ---------------------------------------------------

@dataclass
class BoundaryReport:
    count: int
    u2_xi: float
    ratios: np.ndarray
    passed: bool

    @property
    def min_ratio(self) -> float:
        return float(np.min(self.ratios)) if self.ratios.size else float("inf")

    def to_dict(self) -> dict:
        return {"count": self.count, "u2_xi": self.u2_xi, "min_ratio": self.min_ratio,
                "passed": self.passed}


def project_to_boundary(
    scbkf: Scbkf,
    xi: HistorySegment,
    direction: np.ndarray,
    h_tol: float = 1e-10,
    max_doublings: int = 60,
) -> HistorySegment | None:
    """Interior-side point of ``{h = 0}`` on the ray ``xi + s * direction``.

    Returns ``None`` if the ray never leaves the safe set.
    """
    base = xi.samples

    def at(s):
        return xi.replace_samples(base + s * direction)

    s_hi = 1.0
    for _ in range(max_doublings):
        if scbkf.eval_h(at(s_hi)) <= 0:
            break
        s_hi *= 2.0
    else:
        return None
    s_lo = 0.0
    for _ in range(200):
        mid = 0.5 * (s_lo + s_hi)
        if mid in (s_lo, s_hi):
            break
        h = scbkf.eval_h(at(mid))
        if h > 0:
            s_lo = mid
            if h <= h_tol:
                break
        else:
            s_hi = mid
    return at(s_lo)


def boundary_check(
    surface,
    scbkf: Scbkf,
    xi: HistorySegment,
    count: int,
    rng: np.random.Generator,
    direction_sampler: Callable[[np.random.Generator, HistorySegment], np.ndarray] | None = None,
    max_rays: int = 100,
) -> BoundaryReport:
    """Sampled check of ``U^2(phi) >= U^2(xi)`` on boundary buffers.

    ``passed`` is False (a warning, not an error) when some ratio is below 1.
    """
    if scbkf.eval_h(xi) <= 0:
        raise SamplingError("xi must be in the interior of the safe set")
    u2_xi = float(surface.value(xi)) ** 2
    sampler = direction_sampler or _smooth_direction
    ratios = []
    for _ in range(count):
        for _ in range(max_rays):
            proj = project_to_boundary(scbkf, xi, sampler(rng, xi))
            if proj is not None:
                break
        else:
            raise SamplingError(f"no exterior point found along {max_rays} random rays")
        ratios.append(float(surface.value(proj)) ** 2 / max(u2_xi, 1e-300))
    ratios = np.asarray(ratios)
    return BoundaryReport(count, u2_xi, ratios, bool(np.all(ratios >= 1.0)))


def _smooth_direction(rng: np.random.Generator, xi: HistorySegment) -> np.ndarray:
    n = xi.state_dim
    theta = xi.times[:, None]
    const = rng.standard_normal(n)
    amp = 0.3 * rng.standard_normal(n)
    freq = rng.uniform(0.0, 2.0 * np.pi / xi.delay, n)
    return const + amp * np.sin(freq * theta + rng.uniform(0, 2 * np.pi, n))
