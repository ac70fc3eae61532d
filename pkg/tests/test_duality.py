import math

import numpy as np
import pytest
from scipy import integrate, optimize, stats

from ambiguity import GaussianReference, feasibility_threshold, feasibility_tilt
from duality import (QuadraticLoss, spectral_bound, log_partition, dual_objective, wasserstein_dual_objective,
                     worst_case_risk, risk_profile, gaussian_grid, primal_oracle_1d)
from error_handler import DivergentIntegralError, InfeasibleRadiusError, ValidationError
from system import SampleSet

from conftest import requires_solver


def quad_log_partition(Q, q, lam, eps, w, mean, var):
    sd = math.sqrt(var)

    def integrand(z):
        exponent = (Q * z * z + 2 * q * z - lam * (w - z) ** 2) / (lam * eps)
        return stats.norm.pdf(z, mean, sd) * math.exp(exponent)

    value, _ = integrate.quad(integrand, -60.0, 60.0, points=[w, mean], epsabs=1e-14, epsrel=1e-12, limit=400)
    return lam * eps * math.log(value)


@pytest.mark.parametrize("q", [0.0, 0.4])
def test_log_partition_matches_quadrature(q):
    ref = GaussianReference([0.3], [[2.0]])
    loss = QuadraticLoss([[0.5]], [q])
    expected = quad_log_partition(0.5, q, 2.0, 1.0, 0.7, 0.3, 2.0)
    assert log_partition(loss, 2.0, ref, 1.0, [0.7]) == pytest.approx(expected, rel=1e-9, abs=1e-11)


def test_log_partition_zero_loss():
    # l = 0, lambda = 1, eps = 2, w = 0, nu = N(0, 1): log E exp(-z^2 / 2) = -log(2) / 2, times 2
    value = log_partition(QuadraticLoss([[0.0]]), 1.0, GaussianReference([0.0], [[1.0]]), 2.0, [0.0])
    assert value == pytest.approx(-math.log(2.0), abs=1e-12)


def test_log_partition_translation_invariance():
    # shifting sample, reference mean and loss centre together leaves the value unchanged
    Q = np.array([[0.6, 0.1], [0.1, 0.3]])
    shift = np.array([1.5, -2.0])
    cov = np.array([[1.0, 0.2], [0.2, 0.8]])
    w = np.array([0.4, 0.9])
    base = log_partition(QuadraticLoss(Q), 3.0, GaussianReference([0.0, 0.0], cov), 0.5, w)
    # l(z - c) = z^T Q z - 2 (Q c)^T z + c^T Q c
    moved_loss = QuadraticLoss(Q, -Q @ shift)
    moved = log_partition(moved_loss, 3.0, GaussianReference(shift, cov), 0.5, w + shift)
    assert moved + float(shift @ Q @ shift) == pytest.approx(base, rel=1e-10)


def test_log_partition_diverges_below_bound():
    ref = GaussianReference([0.0], [[1.0]])
    loss = QuadraticLoss([[4.0]])
    bound = spectral_bound(loss, ref, 2.0)
    # metric 1 + eps/2 = 2
    assert bound == pytest.approx(2.0)
    with pytest.raises(DivergentIntegralError):
        log_partition(loss, 0.9 * bound, ref, 2.0, [0.0])
    with pytest.raises(ValidationError):
        log_partition(loss, 3.0, ref, 0.0, [0.0])


def test_empirical_ball_shortcut(sample_1d, reference_1d):
    result = worst_case_risk(QuadraticLoss([[1.0]]), sample_1d, reference_1d, rho=0.0, eps=0.0)
    assert math.isinf(result.lambda_star)
    assert result.value == pytest.approx(1.75)


def test_wasserstein_closed_form(sample_1d, reference_1d):
    # sup E z^2 over the W2 ball: (sqrt(E w^2) + sqrt(rho))^2
    rho = 0.5
    result = worst_case_risk(QuadraticLoss([[1.0]]), sample_1d, reference_1d, rho=rho, eps=0.0)
    assert result.value == pytest.approx((math.sqrt(1.75) + math.sqrt(rho)) ** 2, rel=1e-7)


def test_small_eps_approaches_wasserstein(sample_1d, reference_1d):
    loss = QuadraticLoss([[1.0]])
    wasserstein = worst_case_risk(loss, sample_1d, reference_1d, rho=0.5, eps=0.0).value
    regularized = worst_case_risk(loss, sample_1d, reference_1d, rho=0.5, eps=1e-6).value
    assert regularized == pytest.approx(wasserstein, rel=1e-3)


def test_minimizer_matches_scalar_search(scalar_samples):
    ref = GaussianReference([0.2, 0.0], [[1.0, 0.3], [0.3, 1.5]])
    loss = QuadraticLoss([[1.0, 0.4], [0.4, 2.0]], [0.1, -0.3])
    eps = 0.4
    rho = feasibility_threshold(scalar_samples, ref, eps) + 0.8
    result = worst_case_risk(loss, scalar_samples, ref, rho, eps)

    lower = spectral_bound(loss, ref, eps)
    brute = optimize.minimize_scalar(lambda lam: dual_objective(loss, lam, scalar_samples, ref, rho, eps),
                                     bounds=(lower * (1 + 1e-8), lower + 200.0), method="bounded",
                                     options={"xatol": 1e-10})
    assert result.value == pytest.approx(brute.fun, rel=1e-8)
    assert result.value <= brute.fun + 1e-9
    assert result.rho_min == pytest.approx(rho - 0.8)
    assert result.per_sample.shape == (scalar_samples.n,)


def test_infeasible_radius(sample_1d, reference_1d):
    rho_min = feasibility_threshold(sample_1d, reference_1d, 1.0)
    with pytest.raises(InfeasibleRadiusError) as info:
        worst_case_risk(QuadraticLoss([[1.0]]), sample_1d, reference_1d, rho=0.5 * rho_min, eps=1.0)
    assert info.value.rho_min == pytest.approx(rho_min)


def test_risk_shrinks_as_eps_grows(sample_1d, reference_1d):
    grid = [0.0, 0.05, 0.3, 1.0, 3.0]
    rho = feasibility_threshold(sample_1d, reference_1d, 3.0) + 0.5
    rows = risk_profile(QuadraticLoss([[1.0]]), sample_1d, reference_1d, rho, grid)
    assert [row["status"] for row in rows] == ["ok"] * len(grid)
    values = [row["value"] for row in rows]
    assert all(b <= a + 1e-8 * abs(a) for a, b in zip(values, values[1:]))


def test_profile_marks_infeasible_cells(sample_1d, reference_1d):
    rho = feasibility_threshold(sample_1d, reference_1d, 0.5)
    rows = risk_profile(QuadraticLoss([[1.0]]), sample_1d, reference_1d, rho + 1e-3, [0.1, 10.0])
    assert rows[0]["status"] == "ok"
    assert rows[1]["status"] == "infeasible"
    assert math.isnan(rows[1]["value"])


def test_wasserstein_objective_is_convex_in_lambda(sample_1d):
    loss = QuadraticLoss([[1.0]])
    lams = np.linspace(1.2, 6.0, 9)
    values = [wasserstein_dual_objective(loss, lam, sample_1d, 0.5) for lam in lams]
    second = np.diff(values, 2)
    assert np.all(second >= -1e-10)


def test_gaussian_grid_weights(reference_1d):
    grid = gaussian_grid(reference_1d, count=401)
    assert grid.weights.sum() == pytest.approx(1.0)
    assert float(grid.weights @ grid.points[:, 0] ** 2) == pytest.approx(1.0, rel=1e-6)


@pytest.mark.solver
@requires_solver
@pytest.mark.parametrize("eps", [0.0, 1.0])
def test_primal_grid_oracle_closes_the_gap(eps, reference_1d):
    samples = SampleSet([[0.5], [-1.0]])
    rho = feasibility_threshold(samples, reference_1d, eps) + 0.5
    grid = gaussian_grid(reference_1d, count=241, width=7.0)
    value = primal_oracle_1d(QuadraticLoss([[1.0]]), samples, grid, rho, eps, ref=reference_1d, tolerance=2e-2)
    dual = worst_case_risk(QuadraticLoss([[1.0]]), samples, reference_1d, rho, eps).value
    assert value <= dual * (1 + 2e-2)


def test_loss_with_known_initial_state():
    rng = np.random.default_rng(5)
    phi = rng.normal(size=(4, 3))
    D = np.diag([1.0, 2.0, 0.5, 0.25])
    x0 = np.array([0.8])
    full = QuadraticLoss.from_map(phi, D)
    reduced = QuadraticLoss.from_map(phi, D, x0)
    assert reduced.dim == 2
    W = rng.normal(size=(6, 2))
    stacked = np.hstack([np.full((6, 1), x0[0]), W])
    np.testing.assert_allclose(reduced.value(W), full.value(stacked), rtol=1e-12)


def test_log_partition_carries_the_constant():
    ref = GaussianReference([0.1, -0.4], [[1.0, 0.3], [0.3, 0.7]])
    Q = np.array([[0.5, 0.1], [0.1, 0.2]])
    base = log_partition(QuadraticLoss(Q, [0.2, 0.1]), 2.0, ref, 0.6, [0.3, 0.9])
    moved = log_partition(QuadraticLoss(Q, [0.2, 0.1], c=1.7), 2.0, ref, 0.6, [0.3, 0.9])
    assert moved - base == pytest.approx(1.7, rel=1e-12)


def gaussian_kl(mean, cov, ref):
    """KL(N(mean, cov) | ref)"""
    diff = ref.mean - mean
    return 0.5 * (np.trace(ref.cov_inv @ cov) + diff @ ref.cov_inv @ diff - ref.dim
                  + ref.logdet - np.linalg.slogdet(cov)[1])


def kernel_budget(samples, kernels, ref, eps):
    """Transport cost plus eps * KL of the coupling P_hat x K against P_hat x nu"""
    costs = [np.sum((w - mean) ** 2) + np.trace(cov) + eps * gaussian_kl(mean, cov, ref)
             for w, (mean, cov) in zip(samples.trajectories, kernels)]
    return float(np.mean(costs))


def test_weak_duality_over_certified_distributions(scalar_samples):
    # each candidate is a mixture of Gaussian kernels K(. | w_i); its coupling with P_hat
    # certifies the Sinkhorn discrepancy from above
    ref = GaussianReference([0.5, -0.2], [[1.0, 0.3], [0.3, 2.0]])
    loss = QuadraticLoss([[1.0, 0.4], [0.4, 2.0]], [0.1, -0.3], c=0.2)
    eps = 0.4
    rho = feasibility_threshold(scalar_samples, ref, eps) + 1.0
    dual = worst_case_risk(loss, scalar_samples, ref, rho, eps).value

    tilts = [feasibility_tilt(w, ref, eps) for w in scalar_samples.trajectories]
    optimal = [(t["mean"], t["cov"]) for t in tilts]
    assert kernel_budget(scalar_samples, optimal, ref, eps) == pytest.approx(rho - 1.0, rel=1e-10)

    rng = np.random.default_rng(21)
    best = -math.inf
    for _ in range(100):
        shifts = rng.normal(size=(scalar_samples.n, 2)) * rng.uniform(0.1, 3.0)
        stretches = [np.eye(2) + rng.normal(scale=0.5, size=(2, 2)) for _ in tilts]
        step = 1.0
        while True:
            kernels = [(t["mean"] + step * shift, (np.eye(2) + step * (L - np.eye(2))) @ t["cov"]
                        @ (np.eye(2) + step * (L - np.eye(2))).T)
                       for t, shift, L in zip(tilts, shifts, stretches)]
            if kernel_budget(scalar_samples, kernels, ref, eps) <= rho:
                break
            step *= 0.5
        expected = np.mean([np.trace(loss.Q @ cov) + loss.value(mean)[0] for mean, cov in kernels])
        assert expected <= dual + 1e-6
        best = max(best, expected)
    assert best > np.mean([np.trace(loss.Q @ cov) + loss.value(mean)[0] for mean, cov in optimal])
