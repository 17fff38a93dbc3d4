import math

import numpy as np
import pytest

from _models import scalar_model, zero_input, zero_model
from safestab.errors import DomainError, NumericBlowupError, TransversalityError
from safestab.history import constant_history
from safestab.sdde import SddeModel, brownian_increment, em_step, simulate, simulate_batch


def test_brownian_increment_zero_dt():
    np.testing.assert_array_equal(brownian_increment(np.random.default_rng(0), 0.0, 3), np.zeros(3))


def test_brownian_increment_moments():
    dt, n = 0.01, 100_000
    rng = np.random.Generator(np.random.PCG64(7))
    draws = np.array([brownian_increment(rng, dt, 1)[0] for _ in range(n)])
    assert abs(draws.mean()) <= 4 * math.sqrt(dt / n)
    assert draws.var() == pytest.approx(dt, rel=0.05)


def test_brownian_increment_is_deterministic_given_state():
    a = brownian_increment(np.random.Generator(np.random.PCG64(3)), 0.1, 4)
    b = brownian_increment(np.random.Generator(np.random.PCG64(3)), 0.1, 4)
    np.testing.assert_array_equal(a, b)


def test_em_step_zero_model_leaves_state():
    hist = constant_history(0.2, 0.1, [1.5, -2.0])
    x = em_step(zero_model(), hist, np.array([3.0]), 0.1, np.array([0.4]))
    np.testing.assert_array_equal(x, [1.5, -2.0])


def test_em_step_pure_drift():
    c = np.array([0.5, -1.0])
    model = SddeModel(
        f=lambda phi: c, g=lambda phi: np.zeros((2, 1)), rho=lambda phi: np.zeros((2, 1)),
        n=2, m=1, p=1, delay=0.2,
    )
    x = em_step(model, constant_history(0.2, 0.1, [1.0, 1.0]), np.array([9.0]), 0.1, np.array([1.0]))
    np.testing.assert_allclose(x, [1.05, 0.9])


def test_em_step_direct_substitution():
    x = em_step(scalar_model(), constant_history(0.2, 0.1, [1.0]), np.array([2.0]), 0.1, np.zeros(1))
    assert x[0] == pytest.approx(1.2)


def test_em_step_blowup_carries_step():
    model = scalar_model(drift=1e12)
    with pytest.raises(NumericBlowupError) as err:
        em_step(model, constant_history(0.2, 0.1, [1.0]), np.zeros(1), 0.1, np.zeros(1), step=17)
    assert err.value.step == 17


def test_em_step_rejects_mismatched_dt():
    with pytest.raises(DomainError):
        em_step(scalar_model(), constant_history(0.2, 0.1, [1.0]), np.zeros(1), 0.05, np.zeros(1))


def test_zero_equilibrium_flag_is_checked():
    with pytest.raises(DomainError):
        SddeModel(
            f=lambda phi: phi.newest + 1.0, g=lambda phi: np.zeros((1, 1)), rho=lambda phi: np.zeros((1, 1)),
            n=1, m=1, p=1, delay=0.2, zero_equilibrium=True,
        )


def test_wrong_output_shape_is_rejected():
    with pytest.raises(DomainError):
        SddeModel(
            f=lambda phi: np.zeros(3), g=lambda phi: np.zeros((1, 1)), rho=lambda phi: np.zeros((1, 1)),
            n=1, m=1, p=1, delay=0.2,
        )


def test_zero_model_gives_constant_trace():
    trace = simulate(zero_model(), zero_input(), [1.0, 2.0], horizon=0.5, dt=0.1, seed=1)
    assert len(trace.times) == 6
    np.testing.assert_array_equal(trace.states, np.tile([1.0, 2.0], (6, 1)))
    np.testing.assert_allclose(np.diff(trace.times), 0.1)


def _decay_error(dt):
    trace = simulate(scalar_model(drift=-1.0), zero_input(), [1.0], horizon=1.0, dt=dt, seed=0)
    return abs(trace.states[-1, 0] - math.exp(-1.0))


def test_linear_decay_matches_exponential():
    assert _decay_error(1e-3) < 2e-3


def test_deterministic_error_is_first_order():
    e1, e2 = _decay_error(2e-3), _decay_error(1e-3)
    assert 1.7 <= e1 / e2 <= 2.3


@pytest.mark.parametrize("dt", [0.1, 0.01])
def test_pure_diffusion_variance(dt):
    sigma, T = 0.7, 1.0
    res = simulate_batch(scalar_model(gain=0.0, sigma=sigma), zero_input(), [0.0], T, dt, range(10_000))
    assert res.final_states[:, 0].var() == pytest.approx(sigma**2 * T, rel=0.05)


def test_trace_is_reproducible_and_seed_sensitive():
    model = scalar_model(drift=-0.5, sigma=0.3)
    a = simulate(model, zero_input(), [1.0], 1.0, 0.01, seed=42)
    b = simulate(model, zero_input(), [1.0], 1.0, 0.01, seed=42)
    c = simulate(model, zero_input(), [1.0], 1.0, 0.01, seed=43)
    assert a.to_csv() == b.to_csv()
    assert a.to_csv() != c.to_csv()


def test_batch_matches_single_paths_and_is_order_independent():
    model = scalar_model(drift=-0.5, sigma=0.3)
    seeds = [5, 9, 2, 11]
    fwd = simulate_batch(model, zero_input(), [1.0], 2.0, 0.01, seeds)
    rev = simulate_batch(model, zero_input(), [1.0], 2.0, 0.01, seeds[::-1])
    np.testing.assert_array_equal(fwd.final_states, rev.final_states[::-1])
    for i, s in enumerate(seeds):
        single = simulate(model, zero_input(), [1.0], 2.0, 0.01, seed=s)
        np.testing.assert_array_equal(single.states[-1], fwd.final_states[i])


def test_csv_schema_and_formatting():
    model = scalar_model(drift=-1.0)
    trace = simulate(model, zero_input(), [1.0], 0.02, 0.01, seed=0, logs={"V": lambda phi: phi.newest[0] ** 2})
    lines = trace.to_csv().splitlines()
    assert lines[0] == "t,x1,u1,V"
    assert lines[1] == "0,1,0,1"
    assert lines[2].split(",")[1] == format(0.99, ".17g")
    assert len(lines) == 4


def test_controller_failure_truncates_trace():
    def ctrl(phi):
        if phi.t > 0.05:
            raise TransversalityError("G vanished")
        return np.zeros(1)

    trace = simulate(scalar_model(), ctrl, [1.0], 1.0, 0.01, seed=0)
    assert not trace.ok
    assert trace.failure.category == "transversality"
    assert trace.failure.step == len(trace.times)


def test_batch_retires_only_blown_up_paths():
    def ctrl(phi):
        # path starting at 2 explodes, the others stay put
        return np.where(phi.newest > 1.5, 1e13, 0.0)

    init = constant_history(0.2, 0.1, [1.0])
    batch_init = type(init)(0.2, 0.1, np.stack([init.samples, 2 * init.samples, init.samples]))
    res = simulate_batch(scalar_model(), ctrl, batch_init, 1.0, 0.1, [0, 1, 2])
    assert list(res.failures) == [1]
    assert res.failures[1].category == "numeric_blowup"
    np.testing.assert_array_equal(res.final_states[[0, 2], 0], [1.0, 1.0])
