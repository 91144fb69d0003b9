import numpy as np
import pytest

from mcgba.bench import lm_config, max_cost_divergence
from mcgba.camera import total_cost
from mcgba.lm import LAMBDA_MAX, LmConfig, StateVector, optimize, update_lambda
from mcgba.mcg import McgConfig
from mcgba.pcg import CgConfig
from mcgba.problem_io import SyntheticConfig, generate_synthetic


def noisy(n_p=20, n_l=300, d=0.75, seed=0, cam_noise=0.01):
    return generate_synthetic(
        SyntheticConfig(n_p, n_l, d, noise_sigma=1.0, rng_seed=seed, camera_noise=cam_noise, point_noise=0.005)
    )


@pytest.mark.parametrize(
    "accepted, lam, expected",
    [(True, 9e-4, 3e-4), (False, 1e-4, 2e-4), (True, 1e-12, 1e-12), (False, LAMBDA_MAX, LAMBDA_MAX)],
)
def test_update_lambda(accepted, lam, expected):
    assert update_lambda(accepted, lam) == pytest.approx(expected, rel=1e-15)


def test_ground_truth_stops_after_one_iteration():
    p = generate_synthetic(SyntheticConfig(10, 80, 0.75, rng_seed=3))
    _, trace = optimize(p)
    assert len(trace.iterations) == 1
    assert trace.converged


def test_accepted_steps_decrease_cost():
    p = noisy(cam_noise=0.1)
    state, trace = optimize(p)
    assert trace.final_cost < trace.initial_cost
    for it in trace.iterations:
        if it.accepted:
            assert it.cost_after < it.cost_before
    assert np.all(np.diff(trace.cost_trace()) <= 0)
    assert total_cost(p, state.cameras, state.points) == trace.final_cost


def test_lambda_schedule_follows_acceptance():
    _, trace = optimize(noisy(seed=1, cam_noise=0.1))
    its = trace.iterations
    for a, b in zip(its, its[1:]):
        assert b.lam == pytest.approx(update_lambda(a.accepted, a.lam), rel=1e-15)


def test_deterministic():
    p = noisy(seed=2)
    a = optimize(p)[1].cost_trace()
    b = optimize(p)[1].cost_trace()
    np.testing.assert_array_equal(a, b)


def test_pcg_and_mcg_traces_agree():
    p = noisy(n_p=50, n_l=800, d=0.75, seed=4)
    _, tp = optimize(p, cfg=lm_config("pcg", 6.0, 5))
    _, tm = optimize(p, cfg=lm_config("mcg", 6.0, 5))
    assert len(tp.iterations) == len(tm.iterations)
    assert max_cost_divergence(tp, tm) < 1e-6


def test_initial_state_is_used():
    p = noisy(seed=5)
    start = StateVector.from_problem(p)
    start.points = start.points + 0.01
    _, trace = optimize(p, initial_state=start, cfg=LmConfig(max_iterations=1))
    assert trace.initial_cost == pytest.approx(total_cost(p, start.cameras, start.points))


def test_iteration_budget():
    _, trace = optimize(noisy(seed=6, cam_noise=0.3), cfg=LmConfig(max_iterations=2))
    assert len(trace.iterations) == 2
    assert trace.termination == "max_iterations"


def test_failed_inner_solves_abort(monkeypatch):
    import mcgba.lm as lm
    from mcgba.pcg import SolverBreakdown

    def broken(*args, **kwargs):
        raise SolverBreakdown("forced")

    monkeypatch.setattr(lm, "solve_reduced_system", broken)
    _, trace = optimize(noisy(seed=7), cfg=LmConfig(max_consecutive_failures=4))
    assert trace.termination == "too_many_failures"
    assert len(trace.iterations) == 4
    assert [it.lam for it in trace.iterations] == pytest.approx([1e-4, 2e-4, 4e-4, 8e-4])


def test_solver_kind():
    assert LmConfig().solver_kind == "pcg"
    assert LmConfig(inner=McgConfig(1.0, 2)).solver_kind == "mcg"
    with pytest.raises(ValueError):
        LmConfig(lambda0=0.0)
    assert isinstance(LmConfig().inner, CgConfig)
