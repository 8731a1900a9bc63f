import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import chaoskit.engine as engine
from chaoskit.engine import (
    NoisePlan,
    TimeGrid,
    Trajectory,
    brownian_increment,
    increments,
    initial_ensemble,
    simulate,
    step,
)
from chaoskit.errors import DivergenceError, InvalidInputError
from chaoskit.model import Ensemble, ModelSpec, SingleKernel, build_scenario, standard_normal_sampler


def _zeros_like_diff(m0=1):
    return lambda x, y: np.zeros(np.broadcast_shapes(x.shape, y.shape) + (m0,))


def null_model(drift=lambda x: 0 * x, outer=lambda u: 0 * u):
    form = SingleKernel(outer, lambda x, y: 0 * (x + y), lambda v: 0 * v, _zeros_like_diff())
    return ModelSpec(1, 1, drift, form, standard_normal_sampler(1))


# -- noise -----------------------------------------------------------------


def test_increment_deterministic():
    plan = NoisePlan(1234, 8, 3)
    grid = TimeGrid(1.0, 8)
    a = brownian_increment(plan, 5, 2, grid)
    b = brownian_increment(plan, 5, 2, grid)
    assert a.shape == (3,)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, brownian_increment(plan, 6, 2, grid))
    assert not np.array_equal(a, brownian_increment(NoisePlan(1235, 8, 3), 5, 2, grid))


def test_increment_statistics():
    # 10^5 scalar increments with dt = 1: 4-sigma mean bound, variance in [0.98, 1.02]
    plan = NoisePlan(7, 1000, 1, horizon=1000.0)
    dW = increments(plan, range(100), TimeGrid(1000.0, 1000)).ravel()
    assert dW.size == 10**5
    assert abs(dW.mean()) < 4 / math.sqrt(10**5)
    assert 0.98 <= dW.var(ddof=1) <= 1.02


def test_refinement_consistency_two_levels():
    plan = NoisePlan(3, 4, 1)
    fine = increments(plan, [0], TimeGrid(1.0, 4))[0]
    coarse = increments(plan, [0], TimeGrid(1.0, 2))[0]
    assert coarse[0, 0] == fine[0, 0] + fine[1, 0]
    assert coarse[1, 0] == fine[2, 0] + fine[3, 0]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**63), st.integers(0, 6), st.integers(0, 4), st.integers(1, 3))
def test_refinement_consistency_property(seed, level, extra, m0):
    fine_count = 2 ** (level + extra + 1)
    plan = NoisePlan(seed, fine_count, m0)
    m = 2**level
    coarse = increments(plan, [0, 3], TimeGrid(1.0, m))
    finer = increments(plan, [0, 3], TimeGrid(1.0, 2 * m))
    assert np.array_equal(coarse, finer[:, 0::2] + finer[:, 1::2])


def test_non_dyadic_ratio_sums_fine_increments():
    plan = NoisePlan(9, 6, 2)
    fine = plan.fine_increments(1)
    coarse = increments(plan, [1], TimeGrid(1.0, 2))[0]
    np.testing.assert_allclose(coarse[0], fine[0] + fine[1] + fine[2], rtol=0, atol=1e-15)


def test_incompatible_grid_rejected():
    with pytest.raises(InvalidInputError):
        increments(NoisePlan(0, 8, 1), [0], TimeGrid(1.0, 3))
    with pytest.raises(InvalidInputError):
        increments(NoisePlan(0, 8, 1, horizon=2.0), [0], TimeGrid(1.0, 4))
    with pytest.raises(InvalidInputError):
        brownian_increment(NoisePlan(0, 8, 1), 0, 8, TimeGrid(1.0, 8))


def test_increments_independent_of_query_set():
    plan = NoisePlan(42, 16, 2)
    grid = TimeGrid(1.0, 8)
    big = increments(plan, range(10), grid)
    small = increments(plan, [7, 2], grid)
    assert np.array_equal(big[[7, 2]], small)


def test_initial_lane_separate_from_noise_lane():
    plan = NoisePlan(5, 4, 1)
    init = initial_ensemble(build_scenario("example1"), 3, plan, TimeGrid(1.0, 4))
    assert not np.isin(init.states.ravel(), plan.fine_increments(0).ravel() / math.sqrt(plan.fine_dt)).any()


# -- step ------------------------------------------------------------------


def test_null_dynamics_only_advance_time():
    grid = TimeGrid(1.0, 4)
    e = Ensemble(np.array([1.0, -2.0, 0.5]), 1, grid.dt)
    out = step(e, null_model(), grid, NoisePlan(0, 4, 1))
    assert np.array_equal(out.states, e.states)
    assert out.time_index == 2


def test_constant_interaction_drift_single_step():
    grid = TimeGrid(1.0, 2)
    model = null_model(outer=lambda u: 0 * u + 1.0)
    out = step(Ensemble(np.array([1.0, 3.0]), 0, 0.5), model, grid, NoisePlan(0, 2, 1))
    np.testing.assert_array_equal(out.states.ravel(), [1.5, 3.5])


def test_step_matches_example1_formula():
    model = build_scenario("example1")
    grid = TimeGrid(1.0, 16)
    plan = NoisePlan(77, 16, 1)
    e = initial_ensemble(model, 5, plan, grid)
    out = step(e, model, grid, plan)
    x = e.states[:, 0]
    dt = grid.dt
    dW = increments(plan, range(5), grid)[:, 0, 0]
    want = []
    for i in range(5):
        a = x[i] - x[i] ** 3
        drift = a / (1 + math.sqrt(dt) * abs(a))
        f = 1 / (1 + math.exp(-np.mean(np.arctan(x[i] + x))))
        g = math.sin(np.mean(np.sqrt(x[i] ** 2 + x**2)))
        want.append(x[i] + drift * dt + f * dt + g * dW[i])
    np.testing.assert_allclose(out.states[:, 0], want, rtol=1e-13, atol=1e-13)


def test_step_deterministic():
    model = build_scenario("example1")
    grid = TimeGrid(1.0, 8)
    plan = NoisePlan(1, 8, 1)
    e = initial_ensemble(model, 32, plan, grid)
    assert np.array_equal(step(e, model, grid, plan).states, step(e, model, grid, plan).states)


def test_step_past_end_and_divergence():
    grid = TimeGrid(1.0, 1)
    e = Ensemble(np.array([1.0]), 1, 1.0)
    with pytest.raises(InvalidInputError):
        step(e, null_model(), grid, NoisePlan(0, 1, 1))
    blowup = null_model(drift=lambda x: np.where(x > 2, np.inf, 0 * x))
    with pytest.raises(DivergenceError) as info:
        step(Ensemble(np.array([0.0, 3.0]), 0, 1.0), blowup, grid, NoisePlan(0, 1, 1))
    assert info.value.particle == 1 and info.value.step == 0


def test_tamed_vs_plain_lipschitz_drift():
    model = null_model(drift=lambda x: -x)
    for k in (2, 5, 8):
        grid = TimeGrid(1.0, 2**k)
        dt = grid.dt
        e = Ensemble(np.linspace(-4, 4, 17), 0, dt)
        plan = NoisePlan(0, 2**k, 1)
        tamed = step(e, model, grid, plan).states
        plain = step(e, model, grid, plan, tamed=False).states
        a = np.abs(e.states)
        assert np.all(np.abs(tamed - plain) <= math.sqrt(dt) * a**2 * dt + 1e-15)


# -- simulate --------------------------------------------------------------


def test_zero_steps_returns_initial():
    model = build_scenario("example1")
    plan = NoisePlan(0, 1, 1)
    traj = simulate(model, 4, TimeGrid(1.0, 0), plan, mode="full")
    assert len(traj.ensembles) == 1 and traj.terminal.time_index == 0
    assert np.array_equal(traj.terminal.states, initial_ensemble(model, 4, plan, TimeGrid(1.0, 0)).states)


def test_single_particle_runs():
    traj = simulate(build_scenario("example1"), 1, TimeGrid(1.0, 64), NoisePlan(3, 64, 1))
    assert traj.terminal.particle_count == 1
    assert np.all(np.isfinite(traj.terminal.states))


def test_full_mode_keeps_every_step():
    traj = simulate(build_scenario("example1"), 3, TimeGrid(1.0, 8), NoisePlan(3, 8, 1), mode="full")
    assert [e.time_index for e in traj.ensembles] == list(range(9))
    with pytest.raises(InvalidInputError):
        simulate(build_scenario("example1"), 3, TimeGrid(1.0, 8), NoisePlan(3, 8, 1), mode="sometimes")


def test_coupling_across_particle_counts(monkeypatch):
    model = build_scenario("example1")
    grid = TimeGrid(1.0, 16)
    plan = NoisePlan(99, 16, 1)
    seen = {}
    original = engine.step

    def spy(ens, model, grid, plan=None, gamma=0.5, dW=None, tamed=True):
        seen.setdefault(ens.particle_count, []).append(np.array(dW))
        return original(ens, model, grid, plan, gamma, dW, tamed)

    monkeypatch.setattr(engine, "step", spy)
    t4 = simulate(model, 4, grid, plan, mode="full")
    t8 = simulate(model, 8, grid, plan, mode="full")
    assert np.array_equal(t4.initial.states, t8.initial.states[:4])
    for a, b in zip(seen[4], seen[8]):
        assert np.array_equal(a, b[:4])
    assert not np.array_equal(t4.terminal.states, t8.terminal.states[:4])


def test_simulation_deterministic_across_thread_counts(monkeypatch):
    model = build_scenario("example2", 2)
    grid = TimeGrid(1.0, 8)
    plan = NoisePlan(8, 8, 2)
    monkeypatch.setenv("CHAOSKIT_THREADS", "1")
    a = simulate(model, 40, grid, plan).terminal.states
    monkeypatch.setenv("CHAOSKIT_THREADS", "4")
    import chaoskit.model as model_mod

    monkeypatch.setattr(model_mod, "_BLOCK_ELEMENTS", 40 * 8)  # force several blocks
    b = simulate(model, 40, grid, plan).terminal.states
    assert np.array_equal(a, b)


def test_trajectory_validation():
    e0 = Ensemble(np.zeros(2), 0, 0.5)
    with pytest.raises(InvalidInputError):
        Trajectory([e0, e0])
    with pytest.raises(InvalidInputError):
        Trajectory([e0, Ensemble(np.zeros(3), 1, 0.5)])


def test_grid_time_floor():
    grid = TimeGrid(1.0, 8)
    assert grid.grid_time(0.3) == 0.25
    assert grid.grid_time(grid.time(3)) == grid.time(3)


def test_moment_stability_example1():
    # empirical E|X_T|^4 over 16 seeds stays bounded as dt shrinks
    model = build_scenario("example1")
    for k in range(4, 11):
        m = 2**k
        moments = []
        for seed in range(16):
            x = simulate(model, 64, TimeGrid(1.0, m), NoisePlan(seed, m, 1)).terminal.states
            moments.append(np.mean(x**4))
        assert np.all(np.isfinite(moments))
        assert np.mean(moments) < 1e3
