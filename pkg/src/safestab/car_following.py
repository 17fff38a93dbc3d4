"""Stochastic delayed car-following benchmark.

State ``x = (v_follower, v_leader, gap)``.  The follower tracks ``v_d`` with
a quadratic Lyapunov-Krasovskii functional while a logarithmic barrier keeps
the headway functional ``h`` positive; a sliding-mode controller on
``U = V + varrho * B`` mediates the two.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .controllers import SlidingController, SlidingSurface, linear_surface
from .errors import ConfigurationError, UnknownNameError
from .functionals import (
    Scbkf,
    Sclkf,
    headway_barrier,
    linear_k,
    power_k,
    quadratic_tracking,
    reciprocal_log_bounds,
)
from .history import HistorySegment, constant_history, grid_size
from .sdde import SddeModel

ACCEL_LIMIT = 2.5


@dataclass(frozen=True)
class LeadProfile:
    """Piecewise-constant leader acceleration: ``accels[i]`` from ``times[i]`` on."""

    times: tuple[float, ...] = (0.0,)
    accels: tuple[float, ...] = (0.0,)

    def __post_init__(self):
        if len(self.times) != len(self.accels) or not self.times:
            raise ConfigurationError("lead profile needs matching times and accels", field="lead_profile")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ConfigurationError("lead profile times must increase", field="lead_profile")
        if any(abs(a) > ACCEL_LIMIT for a in self.accels):
            raise ConfigurationError(f"lead acceleration must lie in [-{ACCEL_LIMIT}, {ACCEL_LIMIT}]",
                                     field="lead_profile")

    def __call__(self, t: float) -> float:
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        return float(self.accels[max(i, 0)]) if t >= self.times[0] else 0.0


@dataclass(frozen=True)
class CarFollowingParams:
    M: float = 1650.0
    a0: float = 0.1
    a1: float = 5.0
    a2: float = 0.25
    v_d: float = 22.0
    varrho: float = 50.0
    Delta: float = 0.2
    headway: float = 1.8
    integral_weight: float = 0.01
    noise_scale: float = 0.05
    gain: float = 10.0
    smoothing: float = 0.1
    lead_profile: LeadProfile = field(default_factory=LeadProfile)
    ito: str = "printed"

    def __post_init__(self):
        if not self.M > 0:
            raise ConfigurationError("M must be positive", field="M")
        if not self.Delta > 0:
            raise ConfigurationError("Delta must be positive", field="Delta")
        if self.noise_scale < 0:
            raise ConfigurationError("noise_scale must be nonnegative", field="noise_scale")
        if not self.varrho > 0:
            raise ConfigurationError("varrho must be positive", field="varrho")

    def resistance(self, v):
        """``F(x) = (a0 + a1 v + a2 v^2) / M`` for follower speed ``v``."""
        return (self.a0 + self.a1 * v + self.a2 * v * v) / self.M


def build_model(params: CarFollowingParams) -> SddeModel:
    lead = params.lead_profile
    g_const = np.array([[1.0], [0.0], [0.0]])

    def f(phi: HistorySegment):
        now, then = phi.newest, phi.oldest
        out = np.empty(now.shape)
        out[..., 0] = params.resistance(then[..., 0]) - params.resistance(now[..., 0])
        out[..., 1] = lead(phi.t)
        out[..., 2] = now[..., 1] - now[..., 0]
        return out

    def rho(phi: HistorySegment):
        now = phi.newest
        out = np.zeros(now.shape + (1,))
        out[..., 0, 0] = params.noise_scale * now[..., 0]
        out[..., 2, 0] = params.noise_scale * now[..., 2]
        return out

    return SddeModel(
        f=f,
        g=lambda phi: g_const,
        rho=rho,
        n=3,
        m=1,
        p=1,
        delay=params.Delta,
        name="car_following",
    )


def headway_margin(x) -> np.ndarray:
    """``x3 - 1.8 x1`` evaluated on states; the preset safety constraint."""
    x = np.asarray(x, dtype=float)
    return x[..., 2] - 1.8 * x[..., 0]


@dataclass(frozen=True)
class Functionals:
    sclkf: Sclkf
    scbkf: Scbkf
    surface: SlidingSurface


def build_functionals(params: CarFollowingParams) -> Functionals:
    target = np.array([params.v_d, 0.0, 0.0])
    V = quadratic_tracking(target, weights=np.array([1.0, 0.0, 0.0]), name="V")
    sclkf = Sclkf(
        V,
        gamma1=linear_k(1.0, name="gamma1"),
        alpha1=power_k(1.0, 2.0, name="alpha1"),
        alpha2=power_k(1.0 + params.Delta, 2.0, name="alpha2"),
        deviation=lambda x: (x - target)[..., :1],
    )
    h, B = headway_barrier(
        3,
        speed_index=0,
        gap_index=2,
        headway=params.headway,
        integral_weight=params.integral_weight,
    )
    lo, hi = reciprocal_log_bounds()
    scbkf = Scbkf(B, h, gamma2=linear_k(1.0, name="gamma2"), alpha1=lo, alpha2=hi)
    surface = linear_surface(sclkf, scbkf, 1.0, params.varrho, ito=params.ito)
    return Functionals(sclkf, scbkf, surface)


@dataclass(frozen=True)
class Scenario:
    name: str
    params: CarFollowingParams
    model: SddeModel
    functionals: Functionals
    controller: SlidingController
    xi: np.ndarray
    dt: float = 1e-3
    horizon: float = 60.0

    def init(self, dt: float | None = None) -> HistorySegment:
        """Constant initial history at ``xi``."""
        return constant_history(self.params.Delta, dt or self.dt, self.xi)

    @property
    def sclkf(self) -> Sclkf:
        return self.functionals.sclkf

    @property
    def scbkf(self) -> Scbkf:
        return self.functionals.scbkf

    @property
    def surface(self) -> SlidingSurface:
        return self.functionals.surface


def scenario(params: CarFollowingParams, xi, name: str = "custom", dt: float = 1e-3,
             horizon: float = 60.0) -> Scenario:
    model = build_model(params)
    fns = build_functionals(params)
    ctrl = SlidingController(fns.surface, model, gain=params.gain, smoothing=params.smoothing)
    return Scenario(name, params, model, fns, ctrl, np.asarray(xi, dtype=float), dt, horizon)


PRESETS: dict[str, tuple[range, Callable[[int], dict]]] = {
    "fig1_l": (range(1, 7), lambda l: dict(xi=(8.0 + 2.0 * l, 10.0, 150.0), noise_scale=0.05, gain=10.0)),
    "fig2_ell": (range(1, 11), lambda l: dict(xi=(16.0, 10.0, 150.0), noise_scale=float(l), gain=15.0)),
}


def preset_members(name: str) -> range:
    if name not in PRESETS:
        raise UnknownNameError(f"unknown preset {name!r}", field="preset")
    return PRESETS[name][0]


def preset(name: str, index: int, **overrides) -> Scenario:
    """Scenario for one member of a figure family; ``overrides`` replace parameters."""
    members = preset_members(name)
    if index not in members:
        raise ConfigurationError(
            f"{name} index must be in {members.start}..{members.stop - 1}, got {index}", field="index"
        )
    member = PRESETS[name][1](index)
    xi = overrides.pop("xi", member.pop("xi"))
    dt = overrides.pop("dt", 1e-3)
    horizon = overrides.pop("horizon", 60.0)
    params = replace(CarFollowingParams(), **{**member, **overrides})
    return scenario(params, xi, name=f"{name}[{index}]", dt=dt, horizon=horizon)


def random_interior_buffers(
    sc: Scenario,
    count: int,
    rng: np.random.Generator,
    dt: float | None = None,
    min_h: float = 1e-3,
) -> HistorySegment | None:
    """Batch of ``count`` smooth random histories inside the safe set.

    Each buffer is a random operating point (speeds in [0, 35] m/s, headway
    slack in [1, 200] m) plus a sinusoidal ripple over the delay window.
    Draws with ``h <= min_h`` are rejected and redrawn.
    """
    if count <= 0:
        return None
    dt = dt or sc.dt
    delay = sc.params.Delta
    theta = np.linspace(-delay, 0.0, grid_size(delay, dt))
    out = []
    while len(out) < count:
        need = 2 * (count - len(out))
        v1 = rng.uniform(0.0, 35.0, need)
        v2 = rng.uniform(0.0, 35.0, need)
        gap = rng.uniform(1.0, 200.0, need) + sc.params.headway * v1
        base = np.stack([v1, v2, gap], axis=-1)
        amp = rng.uniform(0.0, 1.0, (need, 3)) * np.array([2.0, 2.0, 5.0])
        freq = rng.uniform(0.0, 4.0 * np.pi / delay, (need, 3))
        phase = rng.uniform(0.0, 2.0 * np.pi, (need, 3))
        ripple = amp[:, None, :] * np.sin(freq[:, None, :] * theta[None, :, None] + phase[:, None, :])
        seg = HistorySegment(delay, dt, base[:, None, :] + ripple)
        ok = np.asarray(sc.scbkf.eval_h(seg)) > min_h
        out.extend(seg.samples[ok])
    return HistorySegment(delay, dt, np.asarray(out[:count]))
