import math

import numpy as np
import pytest

from modules.errors import DomainError, NumericalError, RangeError
from modules.pdmp_core import (
    HybridState,
    JumpCause,
    Trajectory,
    cumulative_intensity,
    sample_inter_jump_time,
    simulate,
    state_at,
)
from tests.toy_models import DriftModel, LinearIntensityModel


def test_cumulative_intensity_constant_rate(drift_model):
    z = HybridState(1, (2.0,))
    assert cumulative_intensity(drift_model, z, 0.0) == 0.0
    assert cumulative_intensity(drift_model, z, 3.0) == pytest.approx(1.5)
    assert cumulative_intensity(drift_model, z, 8.0) == pytest.approx(4.0)


@pytest.mark.parametrize("t", [-1.0, 8.5, math.nan])
def test_cumulative_intensity_rejects_times_outside_domain(drift_model, t):
    with pytest.raises(DomainError):
        cumulative_intensity(drift_model, HybridState(1, (2.0,)), t)


@pytest.mark.parametrize("x, t", [(0.0, 1.0), (0.5, 2.0), (2.0, 0.3)])
def test_cumulative_intensity_quadrature_matches_closed_form(x, t):
    model = LinearIntensityModel()
    value = cumulative_intensity(model, HybridState(1, (x,)), t)
    assert value == pytest.approx(LinearIntensityModel.cumulative(x, t), rel=1e-8)


def test_inverted_jump_times_follow_survival_law(rng):
    model = LinearIntensityModel()
    z = HybridState(1, (0.5,))
    samples = np.array([sample_inter_jump_time(model, z, rng)[0] for _ in range(3000)])
    for t in (0.5, 1.0, 2.0):
        assert np.mean(samples > t) == pytest.approx(LinearIntensityModel.survival(0.5, t), abs=0.03)


def test_truncated_exponential_mean(rng, drift_model):
    z = HybridState(1, (0.0,))
    draws = [sample_inter_jump_time(drift_model, z, rng) for _ in range(20000)]
    times = np.array([s for s, _ in draws])
    # E[min(E / 0.5, 10)] = (1 - exp(-5)) / 0.5
    assert times.mean() == pytest.approx((1 - math.exp(-5)) / 0.5, rel=0.03)
    boundary = np.mean([cause is JumpCause.BOUNDARY for _, cause in draws])
    assert boundary == pytest.approx(math.exp(-5), abs=0.003)


def test_random_jumps_land_strictly_before_boundary(rng, drift_model):
    z = HybridState(1, (9.9,))
    for _ in range(500):
        s, cause = sample_inter_jump_time(drift_model, z, rng)
        t_star = drift_model.boundary_time(z)
        assert s <= t_star
        if cause is JumpCause.RANDOM:
            assert s < t_star
        else:
            assert s == t_star


def test_zero_intensity_means_boundary_jump(rng):
    model = DriftModel(rate=0.0, wall=10.0)
    assert sample_inter_jump_time(model, HybridState(1, (4.0,)), rng) == (6.0, JumpCause.BOUNDARY)


def test_simulate_produces_increasing_jump_times(rng, drift_model):
    trajectory = simulate(drift_model, HybridState(1, (0.0,)), 30, rng)
    times = trajectory.jump_times
    assert all(b > a for a, b in zip(times, times[1:]))
    assert all(jump.inter_jump > 0 for jump in trajectory.jumps)
    assert [jump.index for jump in trajectory.jumps] == list(range(1, len(times) + 1))


def test_simulate_stops_in_absorbing_state(rng):
    model = DriftModel(rate=0.0, wall=1.0)
    trajectory = simulate(model, HybridState(1, (0.0,)), 10, rng)
    assert len(trajectory.jumps) == 1
    assert trajectory.absorbed
    assert trajectory.jumps[0].post_jump_state == HybridState(0, (1.0,))
    chain = trajectory.chain_array(pad_to=10)
    assert chain.shape == (11, 3)
    assert np.all(chain[2:] == [0.0, 1.0, 0.0])


def test_simulate_rejects_bad_arguments(rng, drift_model):
    with pytest.raises(DomainError):
        simulate(drift_model, HybridState(1, (0.0,)), 0, rng)
    with pytest.raises(DomainError):
        simulate(drift_model, HybridState(1, (math.inf,)), 3, rng)


def test_simulate_reports_non_finite_states(rng):
    class Exploding(DriftModel):
        def kernel(self, state, rng):
            return HybridState(1, (math.nan,))

    with pytest.raises(NumericalError, match="index 1"):
        simulate(Exploding(), HybridState(1, (0.0,)), 3, rng)


def test_simulate_is_reproducible(drift_model):
    first = simulate(drift_model, HybridState(1, (1.0,)), 20, np.random.default_rng(7))
    second = simulate(drift_model, HybridState(1, (1.0,)), 20, np.random.default_rng(7))
    assert first == second


def test_embedded_chain_starts_with_zero_sojourn(rng, drift_model):
    trajectory = simulate(drift_model, HybridState(1, (1.0,)), 5, rng)
    chain = trajectory.embedded_chain()
    assert chain[0] == (HybridState(1, (1.0,)), 0.0)
    assert len(chain) == len(trajectory.jumps) + 1


def test_state_at_reconstructs_path(rng, drift_model):
    z0 = HybridState(1, (1.0,))
    trajectory = simulate(drift_model, z0, 5, rng)
    assert state_at(trajectory, 0.0) == z0
    first = trajectory.jumps[0]
    assert state_at(trajectory, first.jump_time) == first.post_jump_state
    halfway = state_at(trajectory, first.jump_time / 2)
    assert halfway.position[0] == pytest.approx(1.0 + first.jump_time / 2)
    with pytest.raises(RangeError):
        state_at(trajectory, trajectory.last_time + 1.0)
    with pytest.raises(RangeError):
        state_at(trajectory, -0.1)


def test_trajectory_dict_round_trip(rng, drift_model):
    trajectory = simulate(drift_model, HybridState(1, (1.0,)), 6, rng)
    restored = Trajectory.from_dict(trajectory.to_dict(), drift_model)
    assert restored == trajectory
    assert restored.model is drift_model


def test_vector_helpers_agree_with_scalar_calls(drift_model):
    rows = np.array([[1.0, 2.0], [1.0, 9.0], [0.0, 10.0]])
    moved = drift_model.flow_points(rows, np.array([0.0, 0.5]))
    assert moved.shape == (3, 2, 2)
    assert moved[0, 1, 1] == pytest.approx(2.5)
    assert moved[2, 1, 1] == 10.0
    assert drift_model.boundary_times(rows).tolist() == [8.0, 1.0, math.inf]
    assert drift_model.absorbing_mask(rows).tolist() == [False, False, True]
