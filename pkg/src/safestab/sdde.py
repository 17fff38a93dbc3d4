"""Control-affine stochastic delay systems and their Euler-Maruyama simulation.

    dx(t) = (f(x_t) + g(x_t) u) dt + rho(x_t) dw(t),   x_0 = xi

Shapes: ``f -> (..., n)``, ``g -> (..., n, m)``, ``rho -> (..., n, p)`` where
``...`` is empty for a single buffer and ``(B,)`` for a batch.

Randomness: every path owns a ``numpy.random.Generator`` seeded with
``PCG64(seed)``; Monte Carlo path ``i`` uses ``seed_base + i``.  Gaussian
draws are taken in fixed-size chunks per path, so a path's noise sequence
does not depend on the batch it runs in.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import (
    DomainError,
    NumericBlowupError,
    SafestabError,
    _Masked,
    masked,
)
from .history import HistorySegment, constant_history, grid_size, new_history

BLOWUP_LIMIT = 1e9
NOISE_CHUNK = 1024

Controller = Callable[[HistorySegment], np.ndarray]


@dataclass(frozen=True)
class SddeModel:
    f: Callable[[HistorySegment], np.ndarray]
    g: Callable[[HistorySegment], np.ndarray]
    rho: Callable[[HistorySegment], np.ndarray]
    n: int
    m: int
    p: int
    delay: float
    zero_equilibrium: bool = False
    name: str = "sdde"

    def __post_init__(self):
        if self.delay <= 0:
            raise DomainError("delay must be positive")
        probe = constant_history(self.delay, self.delay, np.zeros(self.n))
        f0, g0, r0 = self.evaluate(probe)
        if self.zero_equilibrium:
            for label, val in (("f", f0), ("g", g0), ("rho", r0)):
                if np.max(np.abs(val), initial=0.0) > 1e-12:
                    raise DomainError(f"{label}(0) != 0 but zero_equilibrium is set")

    def evaluate(self, phi: HistorySegment):
        """Return ``(f, g, rho)`` at ``phi`` with shape checks."""
        lead = () if phi.batch_size is None else (phi.batch_size,)
        f = np.asarray(self.f(phi), dtype=float)
        g = np.asarray(self.g(phi), dtype=float)
        r = np.asarray(self.rho(phi), dtype=float)
        for label, val, shape in (
            ("f", f, lead + (self.n,)),
            ("g", g, lead + (self.n, self.m)),
            ("rho", r, lead + (self.n, self.p)),
        ):
            if val.shape != shape:
                if val.shape == shape[len(lead):]:
                    continue  # state-independent output; broadcasts over the batch
                raise DomainError(f"{self.name}.{label} returned shape {val.shape}, expected {shape}")
        return f, g, r


def brownian_increment(rng: np.random.Generator, dt: float, p: int) -> np.ndarray:
    """``p`` independent N(0, dt) draws."""
    if dt < 0:
        raise DomainError("dt must be nonnegative")
    if dt == 0:
        return np.zeros(p)
    return math.sqrt(dt) * rng.standard_normal(p)


class NoiseStream:
    """Chunked standard-normal draws for a set of independently seeded paths."""

    def __init__(self, seeds: Iterable[int], p: int, chunk: int = NOISE_CHUNK):
        self.seeds = [int(s) for s in seeds]
        self.p = p
        self.chunk = chunk
        self._rngs = [np.random.Generator(np.random.PCG64(s)) for s in self.seeds]
        self._buf = np.empty((len(self.seeds), chunk, p))
        self._pos = chunk

    def draw(self, active: np.ndarray) -> np.ndarray:
        """Standard normals of shape ``(len(active), p)`` for the listed path indices."""
        if self._pos == self.chunk:
            for i in active:
                self._buf[i] = self._rngs[i].standard_normal((self.chunk, self.p))
            self._pos = 0
        z = self._buf[active, self._pos]
        self._pos += 1
        return z


def em_step(
    model: SddeModel,
    hist: HistorySegment,
    u,
    dt: float,
    dW,
    step: int | None = None,
) -> np.ndarray:
    """One explicit Euler-Maruyama step: ``phi(0) + (f + g u) dt + rho dW``."""
    if abs(dt - hist.grid_step) > 1e-12 * hist.grid_step:
        raise DomainError(f"dt={dt} must equal the history grid step {hist.grid_step}")
    f, g, r = model.evaluate(hist)
    u = np.asarray(u, dtype=float)
    dW = np.asarray(dW, dtype=float)
    drift = f + np.einsum("...ij,...j->...i", g, u)
    x = hist.newest + drift * dt + np.einsum("...ij,...j->...i", r, dW)
    bad = ~np.all(np.isfinite(x), axis=-1) | (np.max(np.abs(x), axis=-1) > BLOWUP_LIMIT)
    if np.any(bad):
        raise NumericBlowupError(f"state blew up at step {step}", mask=masked(bad), step=step)
    return x


def _initial_history(model: SddeModel, init, dt: float) -> HistorySegment:
    if isinstance(init, HistorySegment):
        if init.size != grid_size(model.delay, dt):
            raise DomainError("initial history does not match the simulation grid")
        return init
    if callable(init):
        return new_history(model.delay, dt, init)
    return constant_history(model.delay, dt, init)


def _n_steps(horizon: float, dt: float) -> int:
    if not horizon > 0:
        raise DomainError("horizon must be positive")
    steps = int(round(horizon / dt))
    if abs(steps * dt - horizon) > 1e-9 * horizon:
        raise DomainError(f"horizon {horizon} is not a multiple of dt {dt}")
    return steps


@dataclass(frozen=True)
class Failure:
    step: int
    category: str
    message: str


@dataclass
class SimulationTrace:
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    logs: dict[str, np.ndarray]
    seed: int
    failure: Failure | None = None

    @property
    def ok(self) -> bool:
        return self.failure is None

    @property
    def input_norm(self) -> np.ndarray:
        return np.linalg.norm(self.inputs, axis=-1)

    def header(self) -> list[str]:
        n, m = self.states.shape[1], self.inputs.shape[1]
        return (
            ["t"]
            + [f"x{i + 1}" for i in range(n)]
            + [f"u{j + 1}" for j in range(m)]
            + list(self.logs)
        )

    def to_csv(self) -> str:
        """CSV text, one row per step, ``%.17g`` formatting."""
        cols = [self.times[:, None], self.states, self.inputs]
        cols += [np.asarray(v)[:, None] for v in self.logs.values()]
        table = np.hstack(cols) if len(self.times) else np.empty((0, len(self.header())))
        buf = io.StringIO()
        buf.write(",".join(self.header()) + "\n")
        for row in table:
            buf.write(",".join(format(float(v), ".17g") for v in row) + "\n")
        return buf.getvalue()


def simulate(
    model: SddeModel,
    controller: Controller,
    init,
    horizon: float,
    dt: float,
    seed: int,
    logs: Mapping[str, Callable[[HistorySegment], float]] | None = None,
) -> SimulationTrace:
    """Closed-loop sample path with zero-order-hold control.

    ``init`` is a :class:`HistorySegment`, a callable ``theta -> x`` or a
    constant state.  A controller or integrator failure ends the trace early
    and is recorded in ``trace.failure``.
    """
    logs = dict(logs or {})
    steps = _n_steps(horizon, dt)
    hist = _initial_history(model, init, dt)
    noise = NoiseStream([seed], model.p)
    one = np.array([0])
    times, states, inputs = [], [], []
    logged = {k: [] for k in logs}
    failure = None
    for k in range(steps + 1):
        try:
            u = np.asarray(controller(hist), dtype=float).reshape(model.m)
            row = {name: float(fn(hist)) for name, fn in logs.items()}
        except SafestabError as exc:
            failure = Failure(k, exc.category, str(exc))
            break
        times.append(k * dt)
        states.append(hist.newest.copy())
        inputs.append(u)
        for name, val in row.items():
            logged[name].append(val)
        if k == steps:
            break
        dW = math.sqrt(dt) * noise.draw(one)[0]
        try:
            x = em_step(model, hist, u, dt, dW, step=k + 1)
        except SafestabError as exc:
            failure = Failure(k + 1, exc.category, str(exc))
            break
        hist = hist.advance(x)
    return SimulationTrace(
        times=np.asarray(times, dtype=float),
        states=np.asarray(states, dtype=float).reshape(-1, model.n),
        inputs=np.asarray(inputs, dtype=float).reshape(-1, model.m),
        logs={k: np.asarray(v, dtype=float) for k, v in logged.items()},
        seed=seed,
        failure=failure,
    )


@dataclass
class BatchResult:
    seeds: list[int]
    final_states: np.ndarray
    failures: dict[int, Failure] = field(default_factory=dict)

    @property
    def succeeded(self) -> np.ndarray:
        ok = np.ones(len(self.seeds), dtype=bool)
        ok[list(self.failures)] = False
        return ok


StepObserver = Callable[[int, float, HistorySegment, np.ndarray, np.ndarray], None]


def simulate_batch(
    model: SddeModel,
    controller: Controller,
    init,
    horizon: float,
    dt: float,
    seeds: Iterable[int],
    on_step: StepObserver | None = None,
) -> BatchResult:
    """Run independent paths in lockstep on a batched history.

    ``controller`` must accept batched segments.  ``on_step(k, t, hist, u,
    active)`` sees the live sub-batch and the path indices of its rows;
    masked errors raised by it or by the controller retire only the
    offending paths.
    """
    seeds = [int(s) for s in seeds]
    steps = _n_steps(horizon, dt)
    single = _initial_history(model, init, dt)
    if single.batch_size is None:
        samples = np.broadcast_to(single.samples, (len(seeds),) + single.samples.shape)
    else:
        samples = single.samples
    hist = HistorySegment(model.delay, dt, samples, t=single.t)
    active = np.arange(len(seeds))
    noise = NoiseStream(seeds, model.p)
    final = np.full((len(seeds), model.n), np.nan)
    failures: dict[int, Failure] = {}
    sqdt = math.sqrt(dt)

    def retire(rows: np.ndarray, step: int, exc: SafestabError):
        nonlocal hist, active
        for r in np.flatnonzero(rows):
            idx = int(active[r])
            failures[idx] = Failure(step, exc.category, str(exc))
            final[idx] = hist.newest[r]
        keep = ~rows
        active = active[keep]
        hist = hist.take(keep) if active.size else hist

    def evaluate(k: int):
        while active.size:
            try:
                u = np.asarray(controller(hist), dtype=float).reshape(active.size, model.m)
                if on_step is not None:
                    on_step(k, k * dt, hist, u, active)
                return u
            except _Masked as exc:
                retire(_offending_rows(exc, hist, controller, on_step, k, dt, active), k, exc)
        return None

    for k in range(steps + 1):
        u = evaluate(k)
        if u is None or k == steps:
            break
        dW = sqdt * noise.draw(active)
        with np.errstate(all="ignore"):
            try:
                x = em_step(model, hist, u, dt, dW, step=k + 1)
            except NumericBlowupError as exc:
                bad = exc.mask
                retire(bad, k + 1, exc)
                if not active.size:
                    break
                x = em_step(model, hist, u[~bad], dt, dW[~bad], step=k + 1)
        hist = hist.advance(x)
    if active.size:
        final[active] = hist.newest
    return BatchResult(seeds=seeds, final_states=final, failures=failures)


def _offending_rows(exc, hist, controller, on_step, k, dt, active) -> np.ndarray:
    if exc.mask is not None and exc.mask.shape == (active.size,) and exc.mask.any():
        return exc.mask
    # unmasked error from a batch evaluation: isolate culprits row by row
    rows = np.zeros(active.size, dtype=bool)
    for r in range(active.size):
        sub = hist.take(slice(r, r + 1))
        try:
            u = controller(sub)
            if on_step is not None:
                on_step(k, k * dt, sub, np.asarray(u).reshape(1, -1), active[r:r + 1])
        except SafestabError:
            rows[r] = True
    if not rows.any():
        rows[:] = True
    return rows
