import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import brentq
from scipy.special import gamma

from modules.corrosion_model import (
    BOUNDARY_TOLERANCE_MM,
    DEFAULT_PARAMS,
    DEFAULT_REWARD,
    FAILED_MODE,
    CorrosionModel,
    CorrosionParams,
    CorrosionState,
    ParameterUnits,
    RewardFunction,
    ThicknessReward,
    TransientMode,
    boundary_time,
    corrosion_flow,
    post_jump_kernel,
    reward,
    sample_initial,
    thickness_increment,
)
from modules.errors import ConfigurationError, DomainError, InputError
from modules.pdmp_core import sample_inter_jump_time

states = st.builds(
    CorrosionState.build,
    mode=st.sampled_from([1, 2, 3]),
    thickness=st.floats(0.0, 0.19),
    protection=st.floats(-2e5, 3e4),
    rate=st.floats(1e-7, 1e-5),
)


def test_thickness_increment_reference_value():
    assert thickness_increment(1e-5, 0.0, 30000.0, 30000.0) == pytest.approx(0.3 * math.exp(-1), abs=1e-9)


def test_thickness_increment_is_zero_while_protected():
    assert thickness_increment(1e-5, 5000.0, 30000.0, 4000.0) == 0.0
    assert thickness_increment(1e-5, 5000.0, 30000.0, 5000.0) == 0.0


def test_thickness_increment_rejects_negative_arguments():
    with pytest.raises(DomainError):
        thickness_increment(1e-5, -1.0, 30000.0, 10.0)
    with pytest.raises(DomainError):
        thickness_increment(1e-5, 0.0, 30000.0, -10.0)


@given(st.floats(1e-7, 1e-5), st.floats(0.0, 3e4), st.floats(0.0, 2e5), st.sampled_from([1, 2, 3]))
def test_flow_from_fresh_start_matches_increment(rho, gamma_, t, mode):
    eta = DEFAULT_PARAMS.env(mode).transition_period
    moved = corrosion_flow(CorrosionState.build(mode, 0.0, gamma_, rho), t)
    assert moved.thickness == pytest.approx(thickness_increment(rho, gamma_, eta, t), rel=1e-12, abs=1e-15)
    assert moved.protection_remaining == max(0.0, gamma_ - t)


@given(states, st.floats(0.0, 5e4), st.floats(0.0, 5e4))
def test_flow_is_a_semigroup(state, s, t):
    twice = corrosion_flow(corrosion_flow(state, s), t)
    once = corrosion_flow(state, s + t)
    assert twice.thickness == pytest.approx(once.thickness, abs=1e-10)
    assert twice.protection_clock == pytest.approx(once.protection_clock, abs=1e-6)
    assert twice.mode == once.mode and twice.rate == once.rate


@given(states, st.floats(0.0, 5e4), st.floats(0.0, 5e4))
def test_thickness_is_nondecreasing_along_flow(state, s, t):
    assert corrosion_flow(state, s + t).thickness >= corrosion_flow(state, s).thickness


def test_flow_rejects_negative_duration():
    with pytest.raises(DomainError):
        corrosion_flow(CorrosionState.build(1, 0.0, 0.0, 1e-6), -1.0)


@given(states)
def test_boundary_time_reaches_threshold(state):
    t_star = boundary_time(state)
    assert math.isfinite(t_star) and t_star >= 0
    assert corrosion_flow(state, t_star).thickness == pytest.approx(0.2, abs=BOUNDARY_TOLERANCE_MM)


@pytest.mark.parametrize("mode, thickness, protection, rate", [
    (1, 0.0, 11800.0, 5e-6),
    (2, 0.05, 0.0, 3e-7),
    (3, 0.199, -1e4, 9e-6),
    (1, 0.1, -5e5, 1e-6),
])
def test_boundary_time_agrees_with_root_finding(mode, thickness, protection, rate):
    state = CorrosionState.build(mode, thickness, protection, rate)
    t_star = boundary_time(state)
    root = brentq(lambda t: corrosion_flow(state, t).thickness - 0.2, 0.0, 1e9, xtol=1e-6, rtol=1e-14)
    assert t_star == pytest.approx(root, rel=1e-8)


def test_boundary_time_near_the_threshold_is_finite():
    state = CorrosionState.build(2, 0.19981143150602626, 0.0, 1.8365579264874103e-07)
    t_star = boundary_time(state)
    assert math.isfinite(t_star) and t_star > 0
    assert corrosion_flow(state, t_star).thickness == pytest.approx(0.2, abs=BOUNDARY_TOLERANCE_MM)
    root = brentq(lambda t: corrosion_flow(state, t).thickness - 0.2, 0.0, 1e7, xtol=1e-6, rtol=1e-14)
    assert t_star == pytest.approx(root, rel=1e-8)


@given(
    gap=st.floats(1e-8, 1e-3),
    clock=st.floats(-1e5, 0.0),
    rate=st.floats(1e-7, 1e-5),
    mode=st.sampled_from([1, 2, 3]),
)
def test_boundary_time_close_to_the_threshold(gap, clock, rate, mode):
    state = CorrosionState.build(mode, 0.2 - gap, clock, rate)
    t_star = boundary_time(state)
    assert math.isfinite(t_star) and t_star > 0
    assert corrosion_flow(state, t_star).thickness == pytest.approx(0.2, abs=BOUNDARY_TOLERANCE_MM)


def test_boundary_time_is_zero_at_threshold():
    assert boundary_time(CorrosionState.build(2, 0.2 - 1e-10, 0.0, 1e-6)) == 0.0


def test_failed_mode_is_absorbing(corrosion_model, rng):
    failed = CorrosionState.build(FAILED_MODE, 0.2, 0.0, 1e-6)
    assert corrosion_model.is_absorbing(failed)
    assert corrosion_model.intensity(failed) == 0.0
    assert math.isinf(corrosion_model.boundary_time(failed))
    assert corrosion_model.flow(failed, 1e5) == failed
    assert corrosion_model.kernel(failed, rng) == failed


def test_kernel_cycles_environments(rng):
    state = CorrosionState.build(1, 0.05, 300.0, 5e-6)
    for expected in (2, 3, 1, 2):
        state = post_jump_kernel(state, rng)
        assert state.mode == expected
        env = DEFAULT_PARAMS.env(expected)
        assert env.rate_low <= state.rate <= env.rate_high
        assert state.thickness == 0.05
        assert state.protection_remaining == 300.0


def test_kernel_carries_the_corrosion_transient(rng):
    exposed = CorrosionState.build(2, 0.05, -4000.0, 5e-7)
    after = post_jump_kernel(exposed, rng)
    assert after.protection_clock == -4000.0
    assert after.protection_remaining == 0.0


def test_restart_reading_clips_the_clock(rng):
    params = CorrosionParams.from_published(transient=TransientMode.RESTART)
    exposed = CorrosionState.build(2, 0.05, -4000.0, 5e-7)
    after = post_jump_kernel(exposed, rng, params)
    assert after.protection_clock == 0.0
    assert after.protection_remaining == 0.0
    chains = CorrosionModel(params).sample_chains(500, 10, np.random.default_rng(4))
    assert np.all(chains[..., 2] >= 0)


def test_kernel_fails_structure_at_threshold(rng):
    at_limit = CorrosionState.build(3, 0.2 - 1e-12, 0.0, 5e-6)
    failed = post_jump_kernel(at_limit, rng)
    assert failed.mode == FAILED_MODE
    assert failed.thickness == 0.2


def test_initial_protection_is_weibull(corrosion_model):
    chains = corrosion_model.sample_chains(100_000, 1, np.random.default_rng(1))
    protection = chains[:, 0, 2]
    assert protection.mean() == pytest.approx(11800.0 * gamma(1.4), rel=0.02)
    assert np.all(chains[:, 0, 1] == 0.0)
    assert np.all(chains[:, 0, 0] == 1)


def test_scalar_initial_state(rng):
    state = sample_initial(DEFAULT_PARAMS, rng)
    assert state.mode == 1 and state.thickness == 0.0
    assert state.protection_clock > 0
    assert 1e-6 <= state.rate <= 1e-5


@pytest.mark.parametrize("mode, mean", [(1, 17520.0), (2, 131400.0), (3, 8760.0)])
def test_sojourn_means(corrosion_model, mode, mean):
    rng = np.random.default_rng(mode)
    # Protected for 1e9 hours, so the boundary never truncates the sojourn.
    state = CorrosionState.build(mode, 0.0, 1e9, 1e-6)
    samples = [sample_inter_jump_time(corrosion_model, state, rng)[0] for _ in range(40000)]
    assert np.mean(samples) == pytest.approx(mean, rel=0.02)


def test_sampled_chains_respect_model_invariants(corrosion_model):
    chains = corrosion_model.sample_chains(2000, 25, np.random.default_rng(3))
    assert chains.shape == (2000, 26, 5)
    modes, thickness, rate, sojourn = chains[..., 0], chains[..., 1], chains[..., 3], chains[..., 4]
    assert np.all(np.diff(thickness, axis=1) >= 0)
    assert np.all(thickness <= 0.2)
    assert np.all(sojourn >= 0) and np.all(sojourn[:, 0] == 0)
    assert np.all(np.diff(chains[..., 2], axis=1) <= 0)
    for mode in (1, 2, 3):
        env = DEFAULT_PARAMS.env(mode)
        in_mode = rate[modes == mode]
        assert np.all((in_mode >= env.rate_low) & (in_mode <= env.rate_high))
    failed = modes == FAILED_MODE
    # Once failed, the chain is padded with zero sojourns at the threshold.
    assert np.all(np.diff(failed.astype(int), axis=1) >= 0)
    assert np.all(thickness[failed] == 0.2)
    padded = failed[:, :-1] & failed[:, 1:]
    assert np.all(sojourn[:, 1:][padded] == 0)


def test_threshold_is_exceeded_within_horizon(corrosion_model):
    chains = corrosion_model.sample_chains(10_000, 25, np.random.default_rng(11))
    assert np.mean(chains[:, -1, 0] == FAILED_MODE) >= 0.99


def test_default_chains_are_finite(corrosion_model):
    chains = corrosion_model.sample_chains(10_000, 25, np.random.default_rng(0))
    assert np.all(np.isfinite(chains))


def test_single_jump_rarely_reaches_threshold(corrosion_model):
    chains = corrosion_model.sample_chains(10_000, 1, np.random.default_rng(12))
    assert np.mean(chains[:, -1, 0] == FAILED_MODE) < 0.05


def test_vectorized_helpers_match_scalar_versions(corrosion_model):
    chains = corrosion_model.sample_chains(50, 6, np.random.default_rng(5))
    rows = chains[:, 3, :4]
    times = np.array([0.0, 1000.0, 25000.0])
    moved = corrosion_model.flow_points(rows, times)
    t_star = corrosion_model.boundary_times(rows)
    for i, row in enumerate(rows):
        state = corrosion_model.decode(row)
        assert t_star[i] == pytest.approx(corrosion_model.boundary_time(state), rel=1e-12)
        for j, t in enumerate(times):
            expected = corrosion_model.flow(state, t)
            assert moved[i, j, 1] == pytest.approx(expected.thickness, rel=1e-12, abs=1e-15)


def test_default_reward_shape():
    g = DEFAULT_REWARD
    assert g(0.0) == 0.0
    assert g(0.15) == 1.0
    assert g(0.18) == 4.0
    assert g(0.2) == 1.0
    assert g(0.25) == 0.0
    assert g(0.3) == 0.0
    assert g(0.165) == pytest.approx(2.5)
    assert g.maximum == 4.0
    assert reward(g, 0.19) == pytest.approx(2.5)
    with pytest.raises(DomainError):
        reward(g, -0.01)


def test_reward_text_round_trip():
    g = RewardFunction.from_text("0:0; 0.1:2 ;0.3:1", beyond=0.5)
    assert g.knots == ((0.0, 0.0), (0.1, 2.0), (0.3, 1.0))
    assert g(1.0) == 0.5
    assert RewardFunction.from_text(g.to_text(), 0.5) == g


@pytest.mark.parametrize("text", ["0:0;0.1", "0:1;0:2", "", "a:b"])
def test_reward_rejects_malformed_knots(text):
    with pytest.raises(InputError):
        RewardFunction.from_text(text)


def test_thickness_reward_reads_thickness_column():
    rows = np.array([[1, 0.18, 0.0, 1e-6], [0, 0.2, 0.0, 1e-6]])
    assert ThicknessReward(DEFAULT_REWARD)(rows).tolist() == [4.0, 1.0]


def test_per_hour_units_invert_printed_values():
    params = CorrosionParams.from_published(
        ParameterUnits.PER_HOUR, sojourns=(1 / 17520, 1 / 131400, 1 / 8760), weibull_scale=1 / 11800
    )
    assert params.env(2).mean_sojourn == pytest.approx(131400.0)
    assert params.weibull_scale == pytest.approx(11800.0)


def test_invalid_parameters_are_refused():
    params = CorrosionParams.from_published(rate_ranges=((1e-5, 1e-6), (1e-7, 1e-6), (1e-6, 1e-5)))
    assert any("rate_low" in problem for problem in params.problems())
    with pytest.raises(ConfigurationError):
        CorrosionModel(params)


def test_fingerprint_tracks_parameters():
    other = CorrosionParams.from_published(failure_threshold=0.25)
    assert CorrosionModel().fingerprint() == CorrosionModel(DEFAULT_PARAMS).fingerprint()
    assert CorrosionModel().fingerprint() != CorrosionModel(other).fingerprint()
