import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _models import scalar_model
from safestab.car_following import preset, random_interior_buffers
from safestab.controllers import (
    SlidingController,
    SlidingSurface,
    SontagController,
    additive_surface,
    aux_j,
    linear_surface,
    quad_form,
    safety_admissible,
    sliding_drift,
    sliding_set_in_interior,
    sliding_terms,
    sontag_kappa,
    switching_term,
)
from safestab.errors import ConfigurationError, SafeSetViolation, TransversalityError
from safestab.functionals import Sclkf, SeparableFunctional, linear_k
from safestab.history import constant_history

SC = preset("fig1_l", 1)
BUFS = random_interior_buffers(SC, 1000, np.random.default_rng(2024))


def _x2_functional():
    return SeparableFunctional(
        v1=lambda x: x[..., 0] ** 2,
        grad_v1=lambda x: 2.0 * x,
        hess_v1=lambda x: np.full(np.shape(x)[:-1] + (1, 1), 2.0),
        v2=lambda phi: 0.0 * phi.newest[..., 0],
        dini_v2=lambda phi: 0.0 * phi.newest[..., 0],
    )


# -- Sontag -------------------------------------------------------------------

def test_kappa_zero_q():
    np.testing.assert_array_equal(sontag_kappa(1.0, 3.0, np.zeros(2)), np.zeros(2))


def test_kappa_small_lambda_limit():
    assert sontag_kappa(1e-12, 1.0, np.array([1.0]))[0] == pytest.approx(-2.0)


def test_kappa_direct_substitution():
    np.testing.assert_allclose(sontag_kappa(1.0, 0.0, np.array([1.0, 0.0])), [-1.0, 0.0])


def test_kappa_rejects_nonpositive_lambda():
    with pytest.raises(ConfigurationError):
        sontag_kappa(0.0, 1.0, np.ones(1))


def test_kappa_is_accurate_for_large_negative_p():
    getcontext().prec = 50
    p, q, lam = -1e8, 1e-2, 2.0
    D = Decimal
    exact = -(D(p) + (D(p) ** 2 + D(lam) * D(q) ** 4).sqrt()) / D(q) ** 2 * D(q)
    assert sontag_kappa(lam, p, np.array([q]))[0] == pytest.approx(float(exact), rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(
    st.floats(-1e4, 1e4),
    st.lists(st.floats(-1e2, 1e2), min_size=1, max_size=3),
    st.sampled_from([0.1, 1.0, 10.0]),
)
def test_kappa_decrement_identity(p, q, lam):
    q = np.array(q)
    q2 = float(q @ q)
    if q2 <= 1e-12:
        return
    u = sontag_kappa(lam, p, q)
    lhs = p + float(q @ u)
    rhs = -math.sqrt(p * p + lam * q2 * q2)
    assert abs(lhs - rhs) <= 1e-9 * abs(rhs)


@pytest.mark.parametrize("eps", [1e-1, 1e-2, 1e-3])
@pytest.mark.parametrize("lam", [0.1, 1.0, 10.0])
def test_kappa_continuity_bound(eps, lam):
    rng = np.random.default_rng(int(eps * 1e4) + int(lam * 10))
    for _ in range(100):
        q = rng.standard_normal(2)
        q *= rng.uniform(1e-3, 1.0) * eps / np.linalg.norm(q)  # keep |q| <= eps
        p = rng.uniform(-1, 1) * eps * np.linalg.norm(q)
        assert np.linalg.norm(sontag_kappa(lam, p, q)) <= (2 + math.sqrt(lam)) * eps


def _scalar_sontag():
    model = scalar_model(drift=1.0, gain=1.0)
    return SontagController(Sclkf(_x2_functional(), gamma1=linear_k(1.0)), model, lam=1.0), model


def test_stabilizing_control_scalar_example():
    ctrl, _ = _scalar_sontag()
    a, b = ctrl.terms(constant_history(0.2, 0.1, [1.0]))
    assert a == pytest.approx(3.0)
    np.testing.assert_allclose(b, [2.0])
    np.testing.assert_allclose(ctrl(constant_history(0.2, 0.1, [1.0])), [-4.0])


def test_stabilizing_control_at_origin_is_zero():
    ctrl, _ = _scalar_sontag()
    np.testing.assert_array_equal(ctrl(constant_history(0.2, 0.1, [0.0])), [0.0])


def test_stabilizing_control_zero_b_gives_zero_input():
    model = scalar_model(drift=-1.0, gain=0.0)
    ctrl = SontagController(Sclkf(_x2_functional(), gamma1=linear_k(0.5)), model)
    phi = constant_history(0.2, 0.1, [2.0])
    np.testing.assert_array_equal(ctrl(phi), [0.0])
    a, _ = ctrl.terms(phi)
    assert a < 0


def test_scaling_the_functional_keeps_decrement_sign_and_zero_branch():
    model = scalar_model(drift=1.0, gain=1.0)
    base = _x2_functional()
    c = 7.5
    scaled = SeparableFunctional(
        lambda x: c * base.v1(x), lambda x: c * base.grad_v1(x), lambda x: c * base.hess_v1(x),
        base.v2, base.dini_v2,
    )
    for fn, gamma in ((base, linear_k(1.0)), (scaled, linear_k(1.0))):
        ctrl = SontagController(Sclkf(fn, gamma1=gamma), model)
        phi = constant_history(0.2, 0.1, [0.8])
        a, b = ctrl.terms(phi)
        assert a + float(b @ ctrl(phi)) < 0
        np.testing.assert_array_equal(ctrl(constant_history(0.2, 0.1, [0.0])), [0.0])


def test_sontag_on_batch_matches_rows():
    ctrl = SontagController(SC.sclkf, SC.model)
    batch = ctrl(BUFS.take(slice(0, 5)))
    rows = np.vstack([ctrl(BUFS.take(i)) for i in range(5)])
    np.testing.assert_allclose(batch, rows, rtol=1e-13)


# -- admissible set -----------------------------------------------------------

def _unit_barrier():
    # h = x on dx = u dt: B' (1) = -1/2, gamma2(1) = 1, so margin = 1 + u / 2
    from safestab.functionals import LogBarrier, Scbkf

    h = SeparableFunctional(
        v1=lambda x: x[..., 0], grad_v1=lambda x: np.ones_like(x),
        hess_v1=lambda x: np.zeros(np.shape(x) + (1,)),
        v2=lambda phi: 0.0, dini_v2=lambda phi: 0.0,
    )
    return Scbkf(LogBarrier(h), h, gamma2=linear_k(1.0)), scalar_model(gain=1.0)


@pytest.mark.parametrize("u, margin, admissible", [(0.0, 1.0, True), (-2.0, 0.0, False), (-4.0, -1.0, False)])
def test_admissible_by_construction(u, margin, admissible):
    scbkf, model = _unit_barrier()
    ok, m = safety_admissible(scbkf, model, constant_history(0.2, 0.1, [1.0]), np.array([u]))
    assert m == margin
    assert bool(ok) is admissible


def test_admissible_matches_monte_carlo_drift_of_barrier():
    from safestab.sdde import em_step

    phi = constant_history(0.2, 1e-4, [16.0, 10.0, 150.0])
    u = np.zeros(1)
    ok, margin = safety_admissible(SC.scbkf, SC.model, phi, u)
    dt, paths = 1e-4, 10_000
    batch = type(phi)(0.2, dt, np.broadcast_to(phi.samples, (paths,) + phi.samples.shape))
    dW = np.sqrt(dt) * np.random.default_rng(0).standard_normal((paths, 1))
    nxt = batch.advance(em_step(SC.model, batch, np.zeros((paths, 1)), dt, dW))
    inc = (SC.scbkf.eval_barrier(nxt) - SC.scbkf.eval_barrier(phi)) / dt
    est = SC.scbkf.gamma2(SC.scbkf.eval_h(phi)) - inc.mean()
    assert abs(est - margin) <= 3 * inc.std(ddof=1) / np.sqrt(paths)
    assert bool(ok) == (margin > 0)


def test_admissible_outside_safe_set_raises():
    with pytest.raises(SafeSetViolation):
        safety_admissible(SC.scbkf, SC.model, constant_history(0.2, 1e-3, [10.0, 10.0, 0.0]), np.zeros(1))


# -- sliding algebra ------------------------------------------------------------

def test_sliding_terms_reduce_to_lyapunov_when_beta_is_zero():
    surface = additive_surface(
        SC.sclkf, SC.scbkf, alpha=lambda v: v, dalpha=lambda v: 1.0 + 0 * v,
        beta=lambda b: 0 * b, dbeta=lambda b: 0 * b, ito="strict",
    )
    phi = BUFS.take(3)
    t = sliding_terms(surface, SC.model, phi)
    vj = SC.sclkf.functional.jet(phi)
    f, g, rho = SC.model.evaluate(phi)
    np.testing.assert_allclose(t.H, vj.grad)
    from safestab.functionals import ito_trace

    assert t.L == pytest.approx(vj.dini + ito_trace(rho, vj.hess))


def test_sliding_terms_vanish_without_dynamics():
    from _models import zero_model

    model = zero_model(n=3, m=1, p=1)
    t = sliding_terms(SC.surface, model, BUFS.take(0))
    assert t.F == 0.0
    np.testing.assert_array_equal(t.G, [0.0])


def test_l_vanishes_without_noise_or_history_terms():
    quiet = preset("fig1_l", 1, noise_scale=0.0)
    t = sliding_terms(quiet.surface, quiet.model, constant_history(0.2, 1e-3, [16.0, 10.0, 150.0]))
    assert t.L == 0.0


def test_aux_j_vanishes_for_zero_drift():
    J1, J2 = aux_j(np.zeros(3), np.array([[1.0], [0.0], [0.0]]), np.array([2.0]))
    assert not J1.any() and not J2.any()


def test_aux_j_requires_transversality():
    with pytest.raises(TransversalityError):
        aux_j(np.ones(3), np.array([[1.0], [0.0], [0.0]]), np.array([1e-6]))


@pytest.mark.parametrize("ito", ["printed", "strict"])
def test_sliding_identities_on_random_buffers(ito):
    surface = linear_surface(SC.sclkf, SC.scbkf, 1.0, 50.0, ito=ito)
    ctrl = SlidingController(surface, SC.model, gain=10.0)
    t = sliding_terms(surface, SC.model, BUFS)
    J1, J2 = aux_j(t.f, t.g, t.G)
    tol = 1e-10 * (1 + np.sum(t.H**2, axis=-1) * np.linalg.norm(J1, axis=(-2, -1)))
    assert np.all(np.abs(quad_form(t.H, J1)) <= tol)
    assert np.all(np.abs(quad_form(t.H, J1 + J2) - t.F) <= tol)
    u = ctrl(BUFS)
    drift = sliding_drift(t, u)
    K = switching_term(t.U, 10.0, 0.1)
    scale = np.abs(t.F) + np.abs(t.G[:, 0] * u[:, 0]) + np.abs(t.L) + np.abs(K)
    assert np.all(np.abs(drift + K) <= 1e-9 * scale)
    assert np.all(t.U * drift <= 0)


def test_zero_surface_value_gives_ideal_controller():
    phi = constant_history(0.2, 1e-3, [16.0, 10.0, 150.0])
    u0 = float(SC.surface.value(phi))
    shifted = SlidingSurface(
        SC.sclkf, SC.scbkf, psi=lambda v, b: v + 50.0 * b - u0,
        dpsi_dv=lambda v, b: 1.0 + 0 * v, dpsi_db=lambda v, b: 50.0 + 0 * b,
    )
    ctrl = SlidingController(shifted, SC.model, gain=10.0)
    np.testing.assert_allclose(ctrl(phi), ctrl.ideal(phi), rtol=1e-12)
    t = sliding_terms(shifted, SC.model, phi)
    assert abs(sliding_drift(t, ctrl(phi))) <= 1e-9 * (abs(t.F) + abs(t.L))


def test_sliding_controller_refuses_exterior_buffers():
    with pytest.raises(SafeSetViolation):
        SC.controller(constant_history(0.2, 1e-3, [10.0, 10.0, 0.0]))


def test_sliding_controller_transversality_failure_at_target_speed():
    # with beta removed, G = dV1/dx1 = 0 when x1 = v_d
    surface = linear_surface(SC.sclkf, SC.scbkf, 1.0, 0.0)
    ctrl = SlidingController(surface, SC.model, gain=10.0)
    with pytest.raises(TransversalityError):
        ctrl(constant_history(0.2, 1e-3, [22.0, 10.0, 150.0]))


def test_controller_parameters_validated():
    with pytest.raises(ConfigurationError):
        SlidingController(SC.surface, SC.model, gain=0.0)
    with pytest.raises(ConfigurationError):
        SlidingController(SC.surface, SC.model, gain=1.0, smoothing=-1.0)
    with pytest.raises(ConfigurationError):
        SontagController(SC.sclkf, SC.model, lam=-1.0)


def test_surface_partials_match_finite_differences():
    pts = [(v, b) for v in (0.0, 1.0, 43.2, 900.0) for b in (0.01, 0.7, 5.0)]
    assert SC.surface.partial_error(pts) <= 1.0
    wrong = SlidingSurface(
        SC.sclkf, SC.scbkf, psi=lambda v, b: v * v + b,
        dpsi_dv=lambda v, b: v, dpsi_db=lambda v, b: 1.0,
    )
    assert wrong.partial_error(pts) > 1.0


def test_additive_surface_rejects_negative_parts():
    with pytest.raises(ConfigurationError):
        additive_surface(SC.sclkf, SC.scbkf, lambda v: v - 1, lambda v: 1 + 0 * v, lambda b: b, lambda b: 1 + 0 * b)
    with pytest.raises(ConfigurationError):
        linear_surface(SC.sclkf, SC.scbkf, 1.0, -2.0)
    with pytest.raises(ConfigurationError):
        SlidingSurface(SC.sclkf, SC.scbkf, psi=lambda v, b: v, dpsi_dv=lambda v, b: 1, dpsi_db=lambda v, b: 0,
                       ito="other")


def test_sliding_set_inclusion_check():
    assert sliding_set_in_interior(lambda b: 50.0 * b, barrier_floor=0.0)
    assert not sliding_set_in_interior(lambda b: np.zeros_like(b), barrier_floor=0.0)


def test_printed_and_strict_trace_agree_for_unit_weights():
    unit = linear_surface(SC.sclkf, SC.scbkf, 1.0, 1.0, ito="printed")
    strict = linear_surface(SC.sclkf, SC.scbkf, 1.0, 1.0, ito="strict")
    a = sliding_terms(unit, SC.model, BUFS.take(slice(0, 20))).L
    b = sliding_terms(strict, SC.model, BUFS.take(slice(0, 20))).L
    np.testing.assert_allclose(a, b, rtol=1e-12)
    weighted = sliding_terms(SC.surface, SC.model, BUFS.take(slice(0, 20))).L
    strict50 = sliding_terms(linear_surface(SC.sclkf, SC.scbkf, 1.0, 50.0, ito="strict"), SC.model,
                             BUFS.take(slice(0, 20))).L
    assert not np.allclose(weighted, strict50)
