import math

import numpy as np
import pytest
from scipy import optimize

from ambiguity import AmbiguitySpec, GaussianReference, feasibility_threshold, infinite_eps_limit
from conic import solve
from duality import QuadraticLoss, worst_case_risk
from error_handler import InfeasibleRadiusError, ValidationError
from synthesis import (MomentSpec, SynthesisRequest, assemble_sinkhorn_program, synthesize_h2,
                       synthesize_nominal, synthesize_h2_reference, synthesize_wasserstein, synthesize_sinkhorn,
                       evaluate_expected_cost, q_swap_certificate)
from system import CostSpec, SampleSet, SystemSpec, build_stacked, achievability_residual, ClosedLoopMap

from conftest import requires_solver


def test_h2_matches_riccati(scalar_system, scalar_cost):
    # P1 = 1, P0 = 1 + 1 - 1/2; cost = P0 E x0^2 + P1 E w0^2
    bundle = synthesize_h2(scalar_system, scalar_cost, MomentSpec(None, np.eye(2)))
    assert bundle.wc_cost == pytest.approx(2.5)
    assert bundle.map.phi_u[0, 0] == pytest.approx(-0.5)
    np.testing.assert_allclose(bundle.map.phi_u[1], [0.0, 0.0], atol=1e-12)
    assert bundle.achievability_residual < 1e-12


def test_h2_matches_brute_force(scalar_system):
    cost = CostSpec.from_weights(2, [[2.0]], [[0.5]])
    moments = MomentSpec([0.4, -0.3], [[1.0, 0.2], [0.2, 0.6]])
    stacked = build_stacked(scalar_system)
    open_loop = np.array([[1.0, 0.0], [1.0, 1.0]])

    def cost_of(theta):
        phi_u = np.array([[theta[0], 0.0], [theta[1], theta[2]]])
        # Phi_x = (I - ZA)^-1 (E + Z B Phi_u)
        phi_x = open_loop + np.array([[0.0, 0.0], [1.0, 0.0]]) @ phi_u
        return evaluate_expected_cost(ClosedLoopMap(phi_x, phi_u, 1, 1, 1), moments, cost)

    brute = optimize.minimize(cost_of, np.zeros(3), method="Nelder-Mead",
                              options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20_000})
    bundle = synthesize_h2(scalar_system, cost, moments)
    assert bundle.wc_cost == pytest.approx(brute.fun, rel=1e-7)
    assert achievability_residual(stacked, bundle.map) < 1e-12


def test_nominal_uses_empirical_moments(scalar_system, scalar_cost, scalar_samples):
    nominal = synthesize_nominal(scalar_system, scalar_cost, scalar_samples)
    assert nominal.kind == "nominal"
    empirical = float(np.mean(QuadraticLoss.from_map(nominal.phi, scalar_cost.D).value(scalar_samples.trajectories)))
    assert nominal.wc_cost == pytest.approx(empirical, rel=1e-10)
    reference = synthesize_h2_reference(scalar_system, scalar_cost, GaussianReference(None, np.eye(2)))
    assert reference.wc_cost == pytest.approx(2.5)


def test_request_validates_dimensions(scalar_system, scalar_cost, scalar_reference):
    with pytest.raises(ValidationError):
        SynthesisRequest(scalar_system, scalar_cost, SampleSet(np.zeros((3, 3))), scalar_reference,
                         AmbiguitySpec(1.0, 0.1))
    with pytest.raises(ValidationError):
        SynthesisRequest(scalar_system, CostSpec(np.eye(3)), SampleSet(np.zeros((3, 2))), scalar_reference,
                         AmbiguitySpec(1.0, 0.1))
    with pytest.raises(ValidationError):
        SynthesisRequest(scalar_system, scalar_cost, SampleSet(np.zeros((3, 2))), scalar_reference,
                         AmbiguitySpec(1.0, 0.1), strategy="bisection")


def test_program_layout(tiny_request):
    fixed = assemble_sinkhorn_program(tiny_request, lam=5.0)
    labels = [c.label for c in fixed.constraints]
    for label in ("achievability", "causality", "M.strict", "cost.schur", "epigraph", "logdet.psd", "logdet.exp"):
        assert label in labels
    assert sum(label.endswith(".lmi") for label in labels) == tiny_request.samples.n
    assert fixed.metadata["form"] == "fixed-lambda"
    assert "lambda" not in fixed.variables

    perspective = assemble_sinkhorn_program(tiny_request)
    assert perspective.metadata["form"] == "perspective"
    assert "lambda" in perspective.variables

    wasserstein = assemble_sinkhorn_program(tiny_request.with_ambiguity(1.0, 0.0))
    assert not wasserstein.has_exp
    assert wasserstein.metadata["form"] == "wasserstein"


def test_infeasible_radius_reports_threshold(tiny_request):
    eps = tiny_request.amb.eps
    rho_min = feasibility_threshold(tiny_request.samples, tiny_request.ref, eps)
    with pytest.raises(InfeasibleRadiusError) as info:
        synthesize_sinkhorn(tiny_request.with_ambiguity(0.5 * rho_min, eps))
    assert info.value.rho_min == pytest.approx(rho_min)


def test_empirical_wasserstein_ball_is_nominal(tiny_request):
    bundle = synthesize_wasserstein(tiny_request.with_ambiguity(0.0, 0.0))
    nominal = synthesize_nominal(tiny_request.system, tiny_request.cost, tiny_request.samples)
    assert math.isinf(bundle.lambda_star)
    assert bundle.wc_cost == pytest.approx(nominal.wc_cost)
    assert q_swap_certificate(bundle, tiny_request)["passed"]


@pytest.mark.solver
@requires_solver
def test_sinkhorn_solution_is_consistent(tiny_bundle, tiny_request):
    assert tiny_bundle.achievability_residual <= 1e-6
    assert tiny_bundle.risk_check["passed"]
    loss = QuadraticLoss.from_map(tiny_bundle.phi, tiny_request.cost.D)
    risk = worst_case_risk(loss, tiny_request.samples, tiny_request.ref, tiny_request.amb.rho,
                           tiny_request.amb.eps)
    assert tiny_bundle.wc_cost == pytest.approx(risk.value, rel=1e-5)
    assert tiny_bundle.controller() is not None


@pytest.mark.solver
@requires_solver
def test_sinkhorn_beats_nominal_in_the_worst_case(tiny_bundle, tiny_request):
    nominal = synthesize_nominal(tiny_request.system, tiny_request.cost, tiny_request.samples)
    loss = QuadraticLoss.from_map(nominal.phi, tiny_request.cost.D)
    nominal_risk = worst_case_risk(loss, tiny_request.samples, tiny_request.ref, tiny_request.amb.rho,
                                   tiny_request.amb.eps).value
    assert tiny_bundle.wc_cost <= nominal_risk * (1 + 1e-5)


@pytest.mark.solver
@requires_solver
def test_q_swap_certificate(tiny_bundle, tiny_request):
    certificate = q_swap_certificate(tiny_bundle, tiny_request)
    assert certificate["passed"], certificate["worst"]
    broken = q_swap_certificate(tiny_bundle, tiny_request, lam=0.5 * tiny_bundle.lambda_star)
    assert not broken["passed"]


@pytest.mark.solver
@requires_solver
def test_direct_and_outer_agree(tiny_bundle, tiny_request):
    direct = synthesize_sinkhorn(SynthesisRequest(
        tiny_request.system, tiny_request.cost, tiny_request.samples, tiny_request.ref, tiny_request.amb,
        strategy="direct", backend="CLARABEL"))
    assert direct.wc_cost == pytest.approx(tiny_bundle.wc_cost, rel=1e-4)


@pytest.mark.solver
@requires_solver
def test_wasserstein_synthesis(tiny_request):
    req = tiny_request.with_ambiguity(0.5, 0.0)
    bundle = synthesize_wasserstein(req)
    assert bundle.kind == "wasserstein"
    assert np.isfinite(bundle.lambda_star)
    assert bundle.risk_check["passed"]


@pytest.mark.solver
@requires_solver
def test_worst_case_cost_decreases_with_eps(tiny_request):
    grid = [0.05, 0.3, 1.0]
    rho = feasibility_threshold(tiny_request.samples, tiny_request.ref, grid[-1]) + 0.5
    costs = [synthesize_sinkhorn(tiny_request.with_ambiguity(rho, eps)).wc_cost for eps in grid]
    wasserstein = synthesize_wasserstein(tiny_request.with_ambiguity(rho, 0.0)).wc_cost
    assert costs[0] <= wasserstein * (1 + 1e-5)
    assert all(b <= a * (1 + 1e-5) for a, b in zip(costs, costs[1:]))


@pytest.mark.solver
@pytest.mark.slow
@requires_solver
def test_mass_spring_sinkhorn(mass_spring):
    stacked = build_stacked(mass_spring)
    rng = np.random.default_rng(1)
    samples = SampleSet(rng.normal(0.0, 0.3, size=(5, stacked.s)))
    ref = GaussianReference.isotropic(stacked.s, 0.1)
    eps = 0.1
    rho = feasibility_threshold(samples, ref, eps) + 0.5
    req = SynthesisRequest(mass_spring, CostSpec.identity(mass_spring.N, 2, 1), samples, ref,
                           AmbiguitySpec(rho, eps), backend="CLARABEL")
    bundle = synthesize_sinkhorn(req)
    assert bundle.achievability_residual <= 1e-6
    assert q_swap_certificate(bundle, req)["passed"]


def causal_phi(theta):
    """Achievable scalar map from the three free Phi_u entries"""
    phi_u = np.array([[theta[0], 0.0], [theta[1], theta[2]]])
    phi_x = np.array([[1.0, 0.0], [1.0, 1.0]]) + np.array([[0.0, 0.0], [1.0, 0.0]]) @ phi_u
    return np.vstack([phi_x, phi_u])


def brute_force_risk(loss_of, samples, ref, amb, start):
    def objective(theta):
        return worst_case_risk(loss_of(causal_phi(theta)), samples, ref, amb.rho, amb.eps).value

    result = optimize.minimize(objective, start, method="Nelder-Mead",
                               options={"xatol": 1e-8, "fatol": 1e-10, "maxiter": 5_000})
    return result.fun


def test_known_initial_state_request(scalar_system, scalar_cost, scalar_samples):
    ref = GaussianReference([0.0, 0.0], [[1.0, 0.5], [0.5, 1.0]])
    req = SynthesisRequest(scalar_system, scalar_cost, scalar_samples, ref, AmbiguitySpec(5.0, 0.5), x0=[2.0])
    np.testing.assert_array_equal(req.samples.trajectories[:, 0], 2.0)
    np.testing.assert_array_equal(req.noise_samples.trajectories, scalar_samples.trajectories[:, 1:])
    assert req.noise_ref.dim == 1
    np.testing.assert_allclose(req.noise_ref.mean, [1.0])
    np.testing.assert_allclose(req.noise_ref.cov, [[0.75]])

    lifted = np.array([[0.3], [-1.0]])
    np.testing.assert_allclose(req.noise_map() @ lifted, [[2.0], [0.3]])
    phi = causal_phi([-0.5, 0.1, 0.2])
    full = QuadraticLoss.from_map(phi, scalar_cost.D)
    np.testing.assert_allclose(req.loss(phi).value([[0.3]]), full.value([[2.0, 0.3]]))

    program = assemble_sinkhorn_program(req, lam=5.0)
    assert program.variables["Q"].shape == (2, 2)
    assert program.metadata["uncertain_dim"] == 1
    assert program.metadata["known_x0"]
    with pytest.raises(ValidationError):
        SynthesisRequest(scalar_system, scalar_cost, scalar_samples, ref, AmbiguitySpec(5.0, 0.5), x0=[1.0, 2.0])


@pytest.mark.solver
@requires_solver
def test_sinkhorn_matches_brute_force(scalar_system, scalar_cost, scalar_reference):
    samples = SampleSet([[0.8, -0.5]])
    eps = 0.5
    amb = AmbiguitySpec(feasibility_threshold(samples, scalar_reference, eps) + 1.0, eps)
    req = SynthesisRequest(scalar_system, scalar_cost, samples, scalar_reference, amb, backend="CLARABEL")
    bundle = synthesize_sinkhorn(req)
    start = bundle.map.phi_u[[0, 1, 1], [0, 0, 1]]
    brute = brute_force_risk(lambda phi: QuadraticLoss.from_map(phi, scalar_cost.D), samples,
                             scalar_reference, amb, np.zeros(3))
    assert bundle.wc_cost == pytest.approx(brute, rel=1e-3)
    # the solver optimum is a minimum of the same function
    polished = brute_force_risk(lambda phi: QuadraticLoss.from_map(phi, scalar_cost.D), samples,
                                scalar_reference, amb, start)
    assert bundle.wc_cost <= polished * (1 + 1e-4)


@pytest.mark.solver
@requires_solver
def test_known_initial_state_synthesis(scalar_system, scalar_cost):
    ref = GaussianReference([0.0, 0.0], [[1.0, 0.3], [0.3, 1.0]])
    samples = SampleSet([[0.1, 0.8], [-0.4, -0.5], [1.2, 0.3]])
    x0 = [0.6]
    eps = 0.5
    rho = feasibility_threshold(samples.disturbances(1), ref.given_initial_state(x0), eps) + 1.0
    req = SynthesisRequest(scalar_system, scalar_cost, samples, ref, AmbiguitySpec(rho, eps),
                           backend="CLARABEL", x0=x0)
    bundle = synthesize_sinkhorn(req)
    assert bundle.risk_check["passed"]
    assert q_swap_certificate(bundle, req)["passed"]

    brute = brute_force_risk(lambda phi: QuadraticLoss.from_map(phi, scalar_cost.D, x0), req.noise_samples,
                             req.noise_ref, req.amb, np.zeros(3))
    assert bundle.wc_cost == pytest.approx(brute, rel=1e-3)


@pytest.mark.solver
@requires_solver
def test_solver_boundary_matches_threshold(tiny_request):
    # the fixed-lambda value grows like lambda (rho - rho_min); bisect for the rho where it stops falling
    rho_min = feasibility_threshold(tiny_request.samples, tiny_request.ref, tiny_request.amb.eps)
    lams = (1e3, 2e3)
    tails = []
    for lam in lams:
        report, values = solve(assemble_sinkhorn_program(tiny_request, lam), "CLARABEL")
        assert report.ok
        tails.append(float(np.mean(values["s"])))

    def growth(rho):
        return (lams[1] * rho + tails[1]) - (lams[0] * rho + tails[0])

    boundary = optimize.bisect(growth, 0.0, 10.0 * rho_min, xtol=1e-12)
    assert boundary == pytest.approx(rho_min, rel=1e-3)


@pytest.mark.solver
@requires_solver
def test_large_eps_approaches_h2_under_reference(tiny_request):
    # rho above the eps -> infinity threshold: the ball closes in on nu itself
    ref = tiny_request.ref
    rho = infinite_eps_limit(tiny_request.samples, ref) + 0.1
    bundle = synthesize_sinkhorn(tiny_request.with_ambiguity(rho, 1e3))
    h2 = synthesize_h2_reference(tiny_request.system, tiny_request.cost, ref).wc_cost
    assert bundle.wc_cost >= h2 * (1 - 1e-6)
    assert bundle.wc_cost <= h2 * 1.05


@pytest.mark.solver
@pytest.mark.slow
@requires_solver
@pytest.mark.parametrize("rho", [3.5, 4.0, 5.0])
def test_small_eps_matches_wasserstein_on_mass_spring(rho):
    system = SystemSpec.mass_spring(10)
    stacked = build_stacked(system)
    rng = np.random.default_rng(0)
    samples = SampleSet(rng.normal(0.0, math.sqrt(0.5), size=(20, stacked.s)))
    ref = GaussianReference.isotropic(stacked.s, 0.1)
    req = SynthesisRequest(system, CostSpec.identity(system.N, 2, 1), samples, ref, AmbiguitySpec(rho, 1e-4),
                           backend="CLARABEL")
    wasserstein = synthesize_wasserstein(req.with_ambiguity(rho, 0.0)).wc_cost
    sinkhorn = synthesize_sinkhorn(req).wc_cost
    assert abs(sinkhorn - wasserstein) <= 1e-2 * wasserstein
