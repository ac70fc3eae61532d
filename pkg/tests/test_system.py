import numpy as np
import pytest

from error_handler import CausalityError, UnsupportedRecoveryError, ValidationError
from synthesis import MomentSpec, evaluate_expected_cost
from system import (SystemSpec, CostSpec, ClosedLoopMap, ControllerRealization, SampleSet, GaussianSampler,
                    build_stacked, causal_mask, achievability_residual, closed_loop_from_controller,
                    recover_controller, rollout, monte_carlo_cost, condition_gaussian, unobservable_response)


def test_scalar_stacking(scalar_stacked):
    np.testing.assert_array_equal(scalar_stacked.Z, [[0, 0], [1, 0]])
    np.testing.assert_array_equal(scalar_stacked.bigA, [[1, 0], [0, 0]])
    np.testing.assert_array_equal(scalar_stacked.bigB, [[1, 0], [0, 0]])
    np.testing.assert_array_equal(scalar_stacked.bigE, np.eye(2))
    assert scalar_stacked.s == 2


def test_stacked_shapes_for_rectangular_disturbance():
    spec = SystemSpec(3, np.eye(2), [[0.0], [1.0]], [[1.0, 0.0, 0.5], [0.0, 1.0, 0.0]])
    stacked = build_stacked(spec)
    assert stacked.s == 2 + 2 * 3
    assert stacked.bigE.shape == (6, 8)
    np.testing.assert_array_equal(stacked.bigE[:2, :2], np.eye(2))
    # identity blocks only on the first block subdiagonal
    np.testing.assert_array_equal(stacked.Z[2:4, 0:2], np.eye(2))
    assert np.count_nonzero(stacked.Z) == 4


def test_time_varying_shorthand_expands():
    spec = SystemSpec(3, [1.0, 2.0], 1.0, 1.0)
    assert [a[0, 0] for a in spec.A] == [1.0, 2.0]
    with pytest.raises(ValidationError):
        SystemSpec(3, [1.0, 2.0, 3.0], 1.0, 1.0)
    with pytest.raises(ValidationError):
        SystemSpec(1, 1.0, 1.0, 1.0)


def test_mass_spring_preset():
    spec = SystemSpec.mass_spring(5, mass=2.0, spring=1.0, damping=0.5, sampling_time=0.1)
    np.testing.assert_allclose(spec.A[0], [[1.0, 0.1], [-0.05, 0.975]])
    np.testing.assert_allclose(spec.B[0], [[0.0], [0.05]])
    np.testing.assert_array_equal(spec.E[0], np.eye(2))
    assert spec.s == 2 + 4 * 2


def test_causal_mask_counts():
    stacked = build_stacked(SystemSpec(2, 1.0, 1.0, 1.0))
    mask = stacked.phi_mask()
    assert mask.shape == (4, 2)
    assert mask.sum() == 6
    # free entries of Phi_u
    assert mask[2:].sum() == 3
    np.testing.assert_array_equal(causal_mask(3, 1, 2, 1).sum(axis=1), [2, 3, 4])


def test_non_causal_map_rejected():
    with pytest.raises(CausalityError):
        ClosedLoopMap([[1.0, 0.3], [1.0, 1.0]], [[0.0, 0.0], [0.0, 0.0]], 1, 1, 1)


def test_open_loop_map_is_achievable(scalar_stacked):
    closed_loop = ClosedLoopMap([[1.0, 0.0], [1.0, 1.0]], np.zeros((2, 2)), 1, 1, 1)
    assert achievability_residual(scalar_stacked, closed_loop) == pytest.approx(0.0, abs=1e-14)
    perturbed = ClosedLoopMap([[1.0, 0.0], [1.5, 1.0]], np.zeros((2, 2)), 1, 1, 1)
    assert achievability_residual(scalar_stacked, perturbed) == pytest.approx(0.5)


def test_controller_round_trip(mass_spring):
    stacked = build_stacked(mass_spring)
    rng = np.random.default_rng(3)
    K = rng.normal(size=(stacked.N * stacked.m, stacked.N * stacked.d)) * causal_mask(stacked.N, 1, 2, 2)
    closed_loop = closed_loop_from_controller(stacked, ControllerRealization(K, stacked.N, 2, 1))
    assert achievability_residual(stacked, closed_loop) < 1e-10
    recovered = recover_controller(closed_loop)
    np.testing.assert_allclose(recovered.K, K, atol=1e-9)
    assert not recovered.ill_conditioned


def test_recovery_needs_square_phi_x():
    spec = SystemSpec(2, 1.0, 1.0, [[1.0, 0.5]])
    stacked = build_stacked(spec)
    closed_loop = closed_loop_from_controller(stacked, ControllerRealization(np.zeros((2, 2)), 2, 1, 1))
    assert closed_loop.phi_x.shape == (2, 3)
    with pytest.raises(UnsupportedRecoveryError):
        recover_controller(closed_loop)


def test_cost_spec_validation():
    cost = CostSpec([[2.0, 0.0], [0.0, 0.0]])
    np.testing.assert_allclose(cost.Dhalf @ cost.Dhalf, cost.D, atol=1e-12)
    with pytest.raises(ValidationError):
        CostSpec([[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(ValidationError):
        CostSpec([[1.0, 0.5], [0.0, 1.0]])
    weighted = CostSpec.from_weights(2, [[3.0]], [[0.5]])
    np.testing.assert_allclose(np.diag(weighted.D), [3.0, 3.0, 0.5, 0.5])


def test_expected_cost_of_fixed_map():
    phi = np.array([[1.0, 0.0], [2.0, 1.0]])
    assert evaluate_expected_cost(phi, MomentSpec(None, np.eye(2))) == pytest.approx(6.0)
    shifted = MomentSpec([1.0, 0.0], np.eye(2))
    assert evaluate_expected_cost(phi, shifted) == pytest.approx(6.0 + 5.0)


def test_fixed_initial_state():
    samples = SampleSet([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    fixed = samples.with_fixed_initial_state([0.0])
    np.testing.assert_array_equal(fixed.trajectories[:, 0], [0.0, 0.0])
    np.testing.assert_array_equal(fixed.trajectories[:, 1:], samples.trajectories[:, 1:])
    np.testing.assert_allclose(samples.covariance(), np.cov(samples.trajectories.T, bias=True))


def test_rollout_matches_map(mass_spring):
    stacked = build_stacked(mass_spring)
    cost = CostSpec.identity(stacked.N, 2, 1)
    K = -0.3 * causal_mask(stacked.N, 1, 2, 2)
    controller = ControllerRealization(K, stacked.N, 2, 1)
    closed_loop = closed_loop_from_controller(stacked, controller)
    w = np.linspace(-1.0, 1.0, stacked.s)
    expected = float(np.sum((closed_loop.phi @ w) ** 2))
    assert rollout(mass_spring, cost, controller, w)["cost"] == pytest.approx(expected)
    assert rollout(mass_spring, cost, closed_loop, w)["cost"] == pytest.approx(expected)
    with pytest.raises(ValidationError):
        rollout(mass_spring, cost, closed_loop, w[:-1])


def test_monte_carlo_agrees_with_analytic_cost(mass_spring):
    stacked = build_stacked(mass_spring)
    cost = CostSpec.identity(stacked.N, 2, 1)
    closed_loop = closed_loop_from_controller(
        stacked, ControllerRealization(-0.2 * causal_mask(stacked.N, 1, 2, 2), stacked.N, 2, 1))
    mean = np.full(stacked.s, 0.1)
    cov = 0.5 * np.eye(stacked.s)
    mc = monte_carlo_cost(mass_spring, cost, closed_loop, GaussianSampler(mean, cov, seed=11), 20_000)
    analytic = evaluate_expected_cost(closed_loop, MomentSpec(mean, cov), cost)
    assert abs(mc["mean"] - analytic) <= 4.0 * mc["stderr"]


def test_sampler_is_reproducible():
    first = GaussianSampler(np.zeros(3), np.eye(3), seed=5).draw(4)
    second = GaussianSampler(np.zeros(3), np.eye(3), seed=5).draw(4)
    np.testing.assert_array_equal(first, second)
    with pytest.raises(ValidationError):
        GaussianSampler(np.zeros(2), [[1.0, 2.0], [2.0, 1.0]])


def test_disturbance_block_and_conditioning():
    samples = SampleSet([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    np.testing.assert_array_equal(samples.disturbances(1).trajectories, [[2.0, 3.0], [5.0, 6.0]])
    with pytest.raises(ValidationError):
        samples.disturbances(3)

    mean, cov = condition_gaussian([0.0, 0.0], [[1.0, 0.5], [0.5, 1.0]], [2.0])
    np.testing.assert_allclose(mean, [1.0])
    np.testing.assert_allclose(cov, [[0.75]])
    # independent blocks are untouched
    mean, cov = condition_gaussian([1.0, -1.0, 0.5], np.diag([2.0, 3.0, 4.0]), [7.0])
    np.testing.assert_allclose(mean, [-1.0, 0.5])
    np.testing.assert_allclose(cov, np.diag([3.0, 4.0]))


def test_map_policy_needs_observable_disturbances():
    # x1 = x0 + u0 + w0[0]; the second disturbance coordinate never reaches the state
    spec = SystemSpec(2, 1.0, 1.0, [[1.0, 0.0]])
    cost = CostSpec.identity(2, 1, 1)
    phi_x = [[1.0, 0.0, 0.0], [1.0, 1.0, 0.0]]
    w = np.array([0.5, -1.0, 2.0])

    seen = ClosedLoopMap(phi_x, [[0.0, 0.0, 0.0], [0.0, 0.7, 0.0]], 1, 1, 2)
    expected = float(np.sum((seen.phi @ w) ** 2))
    assert rollout(spec, cost, seen, w)["cost"] == pytest.approx(expected)

    hidden = ClosedLoopMap(phi_x, [[0.0, 0.0, 0.0], [0.0, 0.0, 0.7]], 1, 1, 2)
    assert unobservable_response(spec, hidden) == pytest.approx(0.7)
    with pytest.raises(UnsupportedRecoveryError):
        rollout(spec, cost, hidden, w)
