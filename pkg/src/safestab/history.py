"""Delay-state buffers.

A :class:`HistorySegment` stores the delayed state ``x_t(theta)`` for
``theta`` in ``[-delay, 0]`` on a uniform grid.  The samples array has shape
``(L, n)`` for a single buffer or ``(B, L, n)`` for a batch of ``B`` buffers
that share a grid, where ``L = delay / grid_step + 1``.

Segments behave as immutable values.  ``advance`` appends into a shared
append-only tape, so the window of an older segment is never overwritten;
branching from a stale segment copies instead of writing.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ConfigurationError, DomainError, NumericError, masked

_RATIO_RTOL = 1e-9
_TAPE_FACTOR = 8
_SPARE_BUDGET = 1 << 22  # spare tape elements per segment, caps memory on huge batches


def grid_size(delay: float, grid_step: float) -> int:
    """Number of samples ``delay / grid_step + 1``; raises if the ratio is not integral."""
    if not (np.isfinite(delay) and delay > 0):
        raise ConfigurationError(f"delay must be positive, got {delay!r}", field="delay")
    if not (np.isfinite(grid_step) and grid_step > 0):
        raise ConfigurationError(f"grid_step must be positive, got {grid_step!r}", field="dt")
    ratio = delay / grid_step
    steps = int(round(ratio))
    if steps < 1 or abs(ratio - steps) > _RATIO_RTOL * ratio:
        raise ConfigurationError(
            f"delay/grid_step = {ratio!r} is not an integer", field="dt"
        )
    return steps + 1


class _Tape:
    __slots__ = ("data", "filled")

    def __init__(self, data: np.ndarray, filled: int):
        self.data = data
        self.filled = filled


class HistorySegment:
    """Uniform-grid sample of a delayed state over ``[-delay, 0]``.

    ``t`` is the absolute time of the newest sample; it advances by
    ``grid_step`` on every :meth:`advance`.
    """

    __slots__ = ("delay", "grid_step", "t", "_tape", "_start", "_size", "_memo")

    def __init__(self, delay: float, grid_step: float, samples, t: float = 0.0):
        size = grid_size(delay, grid_step)
        samples = np.asarray(samples, dtype=float)  # copied into the tape below
        if samples.ndim not in (2, 3):
            raise DomainError(f"samples must have shape (L, n) or (B, L, n), got {samples.shape}")
        if samples.shape[-2] != size:
            raise DomainError(f"expected {size} samples, got {samples.shape[-2]}")
        if not np.all(np.isfinite(samples)):
            raise DomainError("history samples must be finite")
        self.delay = float(delay)
        self.grid_step = float(grid_step)
        self.t = float(t)
        self._size = size
        self._tape = _Tape(_with_capacity(samples, size), size)
        self._start = 0
        self._memo = None

    @classmethod
    def _view(cls, ref: "HistorySegment", tape: _Tape, start: int, t: float) -> "HistorySegment":
        seg = cls.__new__(cls)
        seg.delay = ref.delay
        seg.grid_step = ref.grid_step
        seg.t = t
        seg._size = ref._size
        seg._tape = tape
        seg._start = start
        seg._memo = None
        return seg

    # -- shape -----------------------------------------------------------
    @property
    def samples(self) -> np.ndarray:
        view = self._tape.data[..., self._start:self._start + self._size, :]
        view.flags.writeable = False
        return view

    @property
    def size(self) -> int:
        return self._size

    def __len__(self) -> int:
        return self._size

    @property
    def state_dim(self) -> int:
        return self._tape.data.shape[-1]

    @property
    def batch_size(self) -> int | None:
        """Number of buffers in a batch, ``None`` for a single buffer."""
        data = self._tape.data
        return data.shape[0] if data.ndim == 3 else None

    @property
    def times(self) -> np.ndarray:
        """Grid offsets ``theta`` from ``-delay`` to ``0``."""
        return np.linspace(-self.delay, 0.0, self._size)

    @property
    def newest(self) -> np.ndarray:
        """``phi(0)``, shape ``(..., n)``."""
        return self._tape.data[..., self._start + self._size - 1, :]

    @property
    def oldest(self) -> np.ndarray:
        """``phi(-delay)``, shape ``(..., n)``."""
        return self._tape.data[..., self._start, :]

    # -- operations ------------------------------------------------------
    def advance(self, new_state) -> "HistorySegment":
        """Drop the oldest sample and append ``new_state`` as ``phi(0)``."""
        x = np.asarray(new_state, dtype=float)
        expected = self._tape.data.shape[:-2] + (self.state_dim,)
        if x.shape != expected:
            raise DomainError(f"new state has shape {x.shape}, expected {expected}")
        bad = ~np.all(np.isfinite(x), axis=-1)
        if np.any(bad):
            raise DomainError("new state must be finite")
        tape = self._tape
        end = self._start + self._size
        if end == tape.filled and end < tape.data.shape[-2]:
            tape.data[..., end, :] = x
            tape.filled += 1
            return HistorySegment._view(self, tape, self._start + 1, self.t + self.grid_step)
        window = np.concatenate([self.samples[..., 1:, :], x[..., None, :]], axis=-2)
        fresh = _Tape(_with_capacity(window, self._size), self._size)
        return HistorySegment._view(self, fresh, 0, self.t + self.grid_step)

    def sample(self, theta: float) -> np.ndarray:
        """Linear interpolation of the buffer at offset ``theta``; exact on grid points."""
        tol = 1e-12 * self.delay
        if not (-self.delay - tol <= theta <= tol):
            raise DomainError(f"theta={theta!r} outside [-{self.delay}, 0]")
        pos = (min(max(theta, -self.delay), 0.0) + self.delay) / self.grid_step
        k = int(round(pos))
        if abs(pos - k) <= 1e-9:
            return self.samples[..., k, :].copy()
        lo = int(np.floor(pos))
        frac = pos - lo
        s = self.samples
        return (1.0 - frac) * s[..., lo, :] + frac * s[..., lo + 1, :]

    def sup_norm(self) -> np.ndarray | float:
        """``sup_theta |phi(theta)|`` over grid samples (Euclidean norm)."""
        out = np.max(np.linalg.norm(self.samples, axis=-1), axis=-1)
        return float(out) if np.ndim(out) == 0 else out

    def integrate(self, w: Callable[[np.ndarray], np.ndarray]):
        """Composite trapezoid approximation of ``int_{-delay}^0 w(phi(tau)) dtau``.

        ``w`` maps states of shape ``(..., n)`` to values of shape ``(...)``.
        Results are memoized per integrand; segments are immutable.
        """
        if self._memo is None:
            self._memo = {}
        elif w in self._memo:
            return self._memo[w]
        vals = np.asarray(w(self.samples), dtype=float)
        total = self.grid_step * (vals.sum(axis=-1) - 0.5 * (vals[..., 0] + vals[..., -1]))
        bad = ~np.isfinite(total)
        if np.any(bad):
            raise NumericError("non-finite integrand on history buffer", mask=masked(bad))
        total = float(total) if np.ndim(total) == 0 else total
        self._memo[w] = total
        return total

    # -- batch helpers ---------------------------------------------------
    def take(self, index) -> "HistorySegment":
        """Sub-batch (or single buffer for an integer index) as a fresh segment."""
        if self.batch_size is None:
            raise DomainError("take() requires a batched segment")
        return HistorySegment(self.delay, self.grid_step, self.samples[index], t=self.t)

    def replace_samples(self, samples) -> "HistorySegment":
        return HistorySegment(self.delay, self.grid_step, samples, t=self.t)

    def __add__(self, other: "HistorySegment") -> "HistorySegment":
        if not isinstance(other, HistorySegment):
            return NotImplemented
        if other.size != self.size or other.grid_step != self.grid_step:
            raise DomainError("segments must share a grid")
        return self.replace_samples(self.samples + other.samples)

    def __mul__(self, scale: float) -> "HistorySegment":
        return self.replace_samples(float(scale) * self.samples)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        batch = "" if self.batch_size is None else f", batch={self.batch_size}"
        return (
            f"HistorySegment(delay={self.delay}, grid_step={self.grid_step}, "
            f"n={self.state_dim}{batch}, t={self.t})"
        )


def _with_capacity(window: np.ndarray, size: int) -> np.ndarray:
    shape = list(window.shape)
    per_sample = window.size // max(window.shape[-2], 1)
    spare = min((_TAPE_FACTOR - 1) * size, max(1, _SPARE_BUDGET // max(per_sample, 1)))
    shape[-2] = size + spare
    data = np.empty(shape)
    data[..., :size, :] = window
    return data


def new_history(
    delay: float,
    grid_step: float,
    init: Callable[[float], np.ndarray],
    t: float = 0.0,
) -> HistorySegment:
    """Evaluate ``init(theta)`` on the grid ``-delay, ..., 0``.

    ``init`` may return an ``n``-vector or a ``(B, n)`` array for a batch.
    """
    size = grid_size(delay, grid_step)
    thetas = np.linspace(-delay, 0.0, size)
    values = [np.asarray(init(float(th)), dtype=float) for th in thetas]
    stacked = np.stack(values, axis=-2)
    if stacked.ndim == 1:
        stacked = stacked[:, None]
    if not np.all(np.isfinite(stacked)):
        raise DomainError("initial history must be finite on the grid")
    return HistorySegment(delay, grid_step, stacked, t=t)


def constant_history(delay: float, grid_step: float, value, t: float = 0.0) -> HistorySegment:
    value = np.atleast_1d(np.asarray(value, dtype=float))
    size = grid_size(delay, grid_step)
    samples = np.broadcast_to(value[..., None, :], value.shape[:-1] + (size, value.shape[-1]))
    return HistorySegment(delay, grid_step, samples, t=t)


def stack(segments: list[HistorySegment]) -> HistorySegment:
    """Combine single buffers sharing a grid into one batch."""
    first = segments[0]
    for seg in segments[1:]:
        if seg.size != first.size or seg.grid_step != first.grid_step:
            raise DomainError("segments must share a grid")
    return HistorySegment(
        first.delay, first.grid_step, np.stack([s.samples for s in segments]), t=first.t
    )
