# synthesis.py - Distributionally Robust Controller Synthesis Module
import math
import logging
from typing import Any, Dict, Optional, Union

import numpy as np
import scipy.linalg as sla

import config
from ambiguity import GaussianReference, AmbiguitySpec, feasibility_threshold
from conic import AffineExpr, ConicProgram, SolverReport, bmat, encode_logdet_hypograph, solve
from duality import QuadraticLoss, worst_case_risk, spectral_bound
from error_handler import (DRCError, ValidationError, InfeasibleRadiusError, SolverFailureError,
                           UnboundedDualError, UnsupportedRecoveryError)
from line_search import bracket_around, golden_section
from system import (SystemSpec, StackedSystem, CostSpec, ClosedLoopMap, ControllerRealization,
                    SampleSet, build_stacked, achievability_residual, recover_controller, condition_gaussian)

logger = logging.getLogger(__name__)

STRATEGIES = ("outer", "direct")


class MomentSpec:
    """First and second moments of the stacked disturbance"""

    def __init__(self, mean, cov):
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        mean = np.zeros(cov.shape[0]) if mean is None else np.ravel(np.asarray(mean, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValidationError(f"covariance shape {cov.shape} does not match mean length {mean.size}")
        scale = max(1.0, float(np.abs(cov).max()))
        if not np.allclose(cov, cov.T, atol=1e-12 * scale):
            raise ValidationError("moment covariance must be symmetric")
        cov = 0.5 * (cov + cov.T)
        if np.linalg.eigvalsh(cov).min() < -1e-10 * scale:
            raise ValidationError("moment covariance must be PSD")
        self.mean = mean
        self.cov = cov

    @property
    def second_moment(self) -> np.ndarray:
        return self.cov + np.outer(self.mean, self.mean)

    @classmethod
    def from_samples(cls, samples: SampleSet) -> "MomentSpec":
        return cls(samples.mean(), samples.covariance())

    @classmethod
    def from_reference(cls, ref: GaussianReference) -> "MomentSpec":
        return cls(ref.mean, ref.cov)

    def given_initial_state(self, x0) -> "MomentSpec":
        """x_0 pinned to x0 (zero variance), disturbance block conditioned on it"""
        x0 = np.ravel(np.asarray(x0, dtype=float))
        mean_w, cov_w = condition_gaussian(self.mean, self.cov, x0)
        d = x0.size
        cov = np.zeros_like(self.cov)
        cov[d:, d:] = cov_w
        return MomentSpec(np.concatenate([x0, mean_w]), cov)


class SynthesisRequest:
    """
    Everything one synthesis solve needs.

    With x0 given the initial state is known: the samples get x0 in their
    first block and the ambiguity set (samples, reference, ball) lives on the
    disturbance block w alone, with nu conditioned on x0.
    """

    def __init__(self, system: SystemSpec, cost: CostSpec, samples: SampleSet, ref: GaussianReference,
                 amb: AmbiguitySpec, strategy: Optional[str] = None, backend: Optional[str] = None,
                 tolerances: Optional[Dict[str, float]] = None, x0=None):
        self.system = system
        self.cost = cost
        self.samples = samples
        self.ref = ref
        self.amb = amb
        self.strategy = strategy or config.STRATEGY
        self.backend = backend
        self.tolerances = dict(tolerances or {})
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"unknown strategy '{self.strategy}', choose from {STRATEGIES}")

        self.stacked: StackedSystem = build_stacked(system)
        cost.check_against(self.stacked)
        samples.check_against(self.stacked)
        if ref.dim != self.stacked.s:
            raise ValidationError(f"reference has dimension {ref.dim}, expected s = {self.stacked.s}")

        self.x0: Optional[np.ndarray] = None
        self.noise_samples, self.noise_ref = samples, ref
        if x0 is not None:
            self.x0 = np.ravel(np.asarray(x0, dtype=float))
            if self.x0.size != system.d:
                raise ValidationError(f"x0 has length {self.x0.size}, expected d = {system.d}")
            self.samples = samples.with_fixed_initial_state(self.x0)
            self.noise_samples = self.samples.disturbances(system.d)
            self.noise_ref = ref.given_initial_state(self.x0)

    def with_ambiguity(self, rho: float, eps: float) -> "SynthesisRequest":
        return SynthesisRequest(self.system, self.cost, self.samples, self.ref, AmbiguitySpec(rho, eps),
                                self.strategy, self.backend, self.tolerances, self.x0)

    def noise_map(self) -> np.ndarray:
        """
        Stacked disturbance in terms of the uncertain vector.

        Identity when x_0 is uncertain; otherwise [[0, -x0], [I, 0]] so that
        Phi @ noise_map() @ [w; -1] = Phi @ [x0; w].
        """
        s = self.stacked.s
        if self.x0 is None:
            return np.eye(s)
        d = self.system.d
        T = np.zeros((s, s - d + 1))
        T[d:, :s - d] = np.eye(s - d)
        T[:d, s - d] = -self.x0
        return T

    def loss(self, phi: np.ndarray) -> QuadraticLoss:
        """Closed-loop cost as a function of the uncertain vector"""
        return QuadraticLoss.from_map(phi, self.cost.D, self.x0)


class SolutionBundle:
    """Synthesized closed-loop map with its certificate variables"""

    def __init__(self, kind: str, closed_loop: ClosedLoopMap, wc_cost: float, lambda_star: float,
                 s: np.ndarray, zeta: np.ndarray, Q_star: np.ndarray, solver_report: SolverReport,
                 rho: float = math.nan, eps: float = math.nan, rho_min: float = math.nan,
                 residual: float = 0.0):
        self.kind = kind
        self.map = closed_loop
        self.wc_cost = wc_cost
        self.lambda_star = lambda_star
        self.s = s
        self.zeta = zeta
        self.Q_star = Q_star
        self.solver_report = solver_report
        self.rho = rho
        self.eps = eps
        self.rho_min = rho_min
        self.achievability_residual = residual
        self.risk_check: Optional[Dict[str, Any]] = None
        self.boundary = bool(np.isfinite(rho_min) and rho - rho_min <= config.BOUNDARY_REL_TOL * (1.0 + abs(rho)))

    @property
    def phi(self) -> np.ndarray:
        return self.map.phi

    def controller(self) -> Optional[ControllerRealization]:
        """K = Phi_u Phi_x^-1, None when Phi_x is not square"""
        try:
            return recover_controller(self.map)
        except UnsupportedRecoveryError as error:
            logger.info(f"No state-feedback realization: {error}")
            return None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "rho": self.rho,
            "eps": self.eps,
            "rho_min": self.rho_min,
            "wc_cost": self.wc_cost,
            "lambda_star": self.lambda_star,
            "boundary": self.boundary,
            "achievability_residual": self.achievability_residual,
            "risk_check": self.risk_check,
            "solver": self.solver_report.to_dict(),
        }


def _metric(ref: GaussianReference, eps: float) -> np.ndarray:
    """I + (eps/2) Sigma^-1"""
    return np.eye(ref.dim) + 0.5 * eps * ref.cov_inv


def _check_radius(req: SynthesisRequest) -> float:
    rho_min = feasibility_threshold(req.noise_samples, req.noise_ref, req.amb.eps)
    if req.amb.rho < rho_min:
        raise InfeasibleRadiusError(req.amb.rho, rho_min, req.amb.eps)
    if req.amb.rho - rho_min <= config.BOUNDARY_REL_TOL * (1.0 + abs(req.amb.rho)):
        logger.warning(f"rho={req.amb.rho:.6g} sits on the feasibility boundary rho_min={rho_min:.6g}")
    return rho_min


def assemble_sinkhorn_program(req: SynthesisRequest, lam: Optional[float] = None) -> ConicProgram:
    """
    Conic form of the Sinkhorn DR synthesis problem.

    lam=None makes lambda a variable (perspective log-det form when eps > 0);
    a fixed lam gives the inner program of the outer lambda search. eps = 0
    drops every log-det row and leaves the Wasserstein SDP.

    With a known x0, Q is the (k+1) x (k+1) lifted loss matrix
    [[Q_w, -q], [-q^T, c]] over the k disturbance coordinates.
    """
    rho_min = _check_radius(req)
    stacked, samples, ref = req.stacked, req.noise_samples, req.noise_ref
    rho, eps = req.amb.rho, req.amb.eps
    s, k, n = stacked.s, ref.dim, samples.n
    lifted = req.x0 is not None
    if lam is not None and not lam > 0:
        raise ValidationError(f"fixed lambda must be > 0, got {lam}")
    form = "wasserstein" if eps == 0 else ("fixed-lambda" if lam is not None else "perspective")

    program = ConicProgram(f"sinkhorn[rho={rho:g},eps={eps:g},{form}]")
    phi = program.add_variable("Phi", (stacked.phi_rows, s))
    Q = program.add_variable("Q", (k + lifted, k + lifted), kind="symmetric")
    Q_w = Q[:k, :k] if lifted else Q
    s_var = program.add_variable("s", (n, 1))
    zeta = program.add_variable("zeta", (n, 1))
    if lam is None:
        lam_expr = program.add_variable("lambda", (1, 1))
        program.nonneg(lam_expr, "lambda.nonneg")
    else:
        lam_expr = AffineExpr.constant(lam)

    # SLS achievability and causal sparsity
    program.equal(phi.lmul(stacked.achievability_operator), stacked.bigE, "achievability")
    outside = np.flatnonzero(~stacked.phi_mask().ravel(order="F"))
    if outside.size:
        program.equal(phi.vec()[outside, 0], 0.0, "causality")

    metric = _metric(ref, eps)
    M = lam_expr.times(metric) - Q_w
    delta = config.STRICT_PSD_DELTA
    program.psd(lam_expr.times(metric - delta * np.eye(k)) - Q_w - delta * np.eye(k), "M.strict")

    # per-sample epigraph of the log-partition quadratic part
    h = 0.5 * eps
    shift = h * (ref.cov_inv @ ref.mean)
    mean_term = h * ref.mean_norm_sq if eps > 0 else 0.0
    for i, w in enumerate(samples.trajectories):
        vector = lam_expr.times((w + shift).reshape(-1, 1))
        corner = zeta[i, 0] + lam_expr * (float(w @ w) + mean_term)
        if lifted:
            vector = vector - Q[:k, k]
            corner = corner - Q[k, k]
        program.psd(bmat([[M, vector], [vector.T, corner]]), f"sample[{i}].lmi")

    D_half_phi = phi.rmul(req.noise_map()).lmul(req.cost.Dhalf)
    program.psd(bmat([[Q, D_half_phi.T], [D_half_phi, np.eye(stacked.phi_rows)]]), "cost.schur")

    if eps == 0:
        program.leq(zeta, s_var, "epigraph")
    elif lam is not None:
        t = encode_logdet_hypograph(program, M, "logdet")
        half = 0.5 * lam * eps
        offset = half * k * math.log(half) - half * ref.logdet
        program.leq(zeta + offset - (t * half).repeat((n, 1)), s_var, "epigraph")
    else:
        # t <= lambda log|M / lambda|
        t = encode_logdet_hypograph(program, M, "logdet", scale=lam_expr)
        per_lambda = h * k * math.log(h) - h * ref.logdet
        program.leq(zeta - (t * h).repeat((n, 1)) + (lam_expr * per_lambda).repeat((n, 1)), s_var, "epigraph")

    program.minimize(lam_expr * rho + s_var.sum() / n)
    program.metadata = {"rho": rho, "eps": eps, "rho_min": rho_min, "form": form,
                        "lambda": lam, "n": n, "s": s, "uncertain_dim": k, "known_x0": lifted}
    logger.debug(f"Assembled {program.name}: {program.num_vars} variables, rows {program.cone_counts()}")
    return program


def _bundle_from_values(req: SynthesisRequest, values: Dict[str, np.ndarray], report: SolverReport,
                        kind: str, lam: float, rho_min: float) -> SolutionBundle:
    stacked = req.stacked
    phi = np.array(values["Phi"])
    mask = stacked.phi_mask()
    # entries outside the pattern are zero up to solver accuracy
    if (~mask).any():
        logger.debug(f"Zeroing non-causal solver residue of size {np.abs(phi[~mask]).max():.2e}")
    phi[~mask] = 0.0
    closed_loop = ClosedLoopMap.from_stacked(phi, stacked)
    residual = achievability_residual(stacked, closed_loop)
    if residual > config.ACHIEVABILITY_TOL:
        logger.warning(f"Achievability residual {residual:.3e} exceeds {config.ACHIEVABILITY_TOL:.0e}")

    s_vals = np.ravel(values["s"])
    wc_cost = float(lam * req.amb.rho + s_vals.mean())
    return SolutionBundle(kind, closed_loop, wc_cost, float(lam), s_vals, np.ravel(values["zeta"]),
                          values["Q"], report, rho=req.amb.rho, eps=req.amb.eps, rho_min=rho_min,
                          residual=residual)


def _cross_check(bundle: SolutionBundle, req: SynthesisRequest) -> SolutionBundle:
    """Worst-case risk of the returned map, recomputed through the closed-form dual"""
    loss = req.loss(bundle.phi)
    try:
        risk = worst_case_risk(loss, req.noise_samples, req.noise_ref, req.amb.rho, req.amb.eps).value
    except DRCError as error:
        logger.warning(f"Risk cross-check skipped: {error}")
        bundle.risk_check = {"risk": math.nan, "relative_gap": math.nan, "passed": False}
        return bundle
    gap = abs(bundle.wc_cost - risk) / max(1.0, abs(risk))
    passed = gap <= config.RISK_CHECK_REL_TOL
    if not passed:
        logger.warning(f"wc_cost {bundle.wc_cost:.10g} differs from the closed-form risk {risk:.10g} "
                       f"(relative gap {gap:.2e})")
    bundle.risk_check = {"risk": risk, "relative_gap": gap, "passed": bool(passed)}
    return bundle


def _solve_program(req: SynthesisRequest, program: ConicProgram):
    report, values = solve(program, req.backend)
    if report.status == "infeasible":
        raise InfeasibleRadiusError(req.amb.rho, program.metadata["rho_min"], req.amb.eps)
    if not report.ok:
        raise SolverFailureError(f"{program.name} did not solve", report)
    return report, values


def synthesize_wasserstein(req: SynthesisRequest) -> SolutionBundle:
    """eps = 0 specialization: one SDP with lambda as a variable"""
    if req.amb.eps != 0:
        req = req.with_ambiguity(req.amb.rho, 0.0)
    if req.amb.rho == 0:
        # the ball is the empirical distribution itself
        bundle = synthesize_nominal(req.system, req.cost, req.samples)
        loss = req.loss(bundle.phi)
        per_sample = loss.value(req.noise_samples.trajectories)
        bundle.kind = "wasserstein"
        bundle.lambda_star = math.inf
        bundle.s = bundle.zeta = per_sample
        bundle.rho, bundle.eps, bundle.rho_min = 0.0, 0.0, 0.0
        bundle.wc_cost = float(per_sample.mean())
        return bundle

    program = assemble_sinkhorn_program(req)
    report, values = _solve_program(req, program)
    lam = float(np.ravel(values["lambda"])[0])
    bundle = _bundle_from_values(req, values, report, "wasserstein", lam, 0.0)
    logger.info(f"Wasserstein synthesis rho={req.amb.rho:g}: wc_cost={bundle.wc_cost:.10g}, lambda*={lam:.6g}")
    return _cross_check(bundle, req)


def synthesize_sinkhorn(req: SynthesisRequest) -> SolutionBundle:
    """
    Sinkhorn DR synthesis.

    "outer": golden-section search over lambda, each step a fixed-lambda
    log-det conic solve (the value function is convex in lambda).
    "direct": one solve of the perspective form.
    """
    if req.amb.eps == 0:
        return synthesize_wasserstein(req)
    rho_min = _check_radius(req)

    if req.strategy == "direct":
        program = assemble_sinkhorn_program(req)
        report, values = _solve_program(req, program)
        lam = float(np.ravel(values["lambda"])[0])
        bundle = _bundle_from_values(req, values, report, "sinkhorn", lam, rho_min)
        logger.info(f"Sinkhorn (direct) rho={req.amb.rho:g}, eps={req.amb.eps:g}: wc_cost={bundle.wc_cost:.10g}")
        return _cross_check(bundle, req)

    solved: Dict[float, SolutionBundle] = {}

    def inner(lam: float) -> float:
        if lam <= 0:
            return math.inf
        program = assemble_sinkhorn_program(req, lam)
        report, values = solve(program, req.backend)
        if not report.ok:
            if report.status != "infeasible":
                logger.warning(f"Inner solve at lambda={lam:.6g} ended with status {report.status}")
            return math.inf
        solved[lam] = _bundle_from_values(req, values, report, "sinkhorn", lam, rho_min)
        return solved[lam].wc_cost

    start = _initial_lambda(req)
    bracket = bracket_around(inner, start, floor=0.0, cap=config.LAMBDA_CAP)
    if not bracket["feasible"]:
        raise SolverFailureError(f"no lambda up to {config.LAMBDA_CAP:g} gives a feasible inner program")
    if bracket["decreasing"]:
        raise UnboundedDualError(f"outer value still decreasing at lambda={bracket['best'][0]:.3e}")
    golden_section(inner, bracket["a"], bracket["b"], rel_tol=config.SYNTHESIS_LAMBDA_REL_TOL)
    # best inner solve seen; ties toward smaller lambda
    best_value = min(b.wc_cost for b in solved.values())
    lam = min(l for l, b in solved.items() if b.wc_cost <= best_value)
    bundle = solved[lam]
    logger.info(f"Sinkhorn (outer) rho={req.amb.rho:g}, eps={req.amb.eps:g}: wc_cost={bundle.wc_cost:.10g}, "
                f"lambda*={lam:.8g} after {len(solved)} inner solves")
    return _cross_check(bundle, req)


def _initial_lambda(req: SynthesisRequest) -> float:
    """Wasserstein multiplier: lambda I - Q > 0 implies lambda (I + eps/2 Sigma^-1) - Q > 0"""
    try:
        wasserstein = synthesize_wasserstein(req.with_ambiguity(req.amb.rho, 0.0))
        if np.isfinite(wasserstein.lambda_star) and wasserstein.lambda_star > 0:
            return float(wasserstein.lambda_star)
    except DRCError as error:
        logger.warning(f"Wasserstein warm start failed ({error}); starting from a spectral guess")
    h2 = synthesize_h2_reference(req.system, req.cost, req.ref)
    return max(2.0 * spectral_bound(req.loss(h2.phi), req.noise_ref, req.amb.eps), 1.0)


def synthesize_h2(system: SystemSpec, cost: CostSpec, moments: MomentSpec) -> SolutionBundle:
    """
    Minimizes tr(Phi^T D Phi S), S = Sigma + mu mu^T, over causal Phi_u.

    Phi_x = (I - Z A)^-1 (E + Z B Phi_u) eliminates achievability, leaving a
    linear least-squares problem in the free entries of Phi_u.
    """
    stacked = build_stacked(system)
    cost.check_against(stacked)
    if moments.mean.size != stacked.s:
        raise ValidationError(f"moments have dimension {moments.mean.size}, expected s = {stacked.s}")
    Nd, Nm = stacked.N * stacked.d, stacked.N * stacked.m
    resolvent = np.eye(Nd) - stacked.Z @ stacked.bigA
    open_loop = sla.solve_triangular(resolvent, stacked.bigE, lower=True, unit_diagonal=True)
    gain = sla.solve_triangular(resolvent, stacked.Z @ stacked.bigB, lower=True, unit_diagonal=True)

    eigvals, eigvecs = np.linalg.eigh(moments.second_moment)
    S_half = (eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T

    lifted = cost.Dhalf @ np.vstack([gain, np.eye(Nm)])
    offset = cost.Dhalf @ np.vstack([open_loop, np.zeros((Nm, stacked.s))]) @ S_half
    free = np.flatnonzero(stacked.phi_mask()[Nd:].ravel(order="F"))
    design = np.kron(S_half.T, lifted)[:, free]
    theta = sla.lstsq(design, -offset.ravel(order="F"))[0]

    # free indexes the column-major vec of Phi_u
    flat = np.zeros(Nm * stacked.s)
    flat[free] = theta
    phi_u = flat.reshape((Nm, stacked.s), order="F")
    phi_x = open_loop + gain @ phi_u
    closed_loop = ClosedLoopMap(phi_x, phi_u, stacked.d, stacked.m, stacked.p)

    value = evaluate_expected_cost(closed_loop, moments, cost)
    report = SolverReport("lstsq", "optimal", objective=value, primal_residual=0.0, dual_residual=0.0)
    return SolutionBundle("h2", closed_loop, value, math.nan, np.zeros(0), np.zeros(0),
                          closed_loop.phi.T @ cost.D @ closed_loop.phi, report,
                          residual=achievability_residual(stacked, closed_loop))


def synthesize_nominal(system: SystemSpec, cost: CostSpec, samples: SampleSet) -> SolutionBundle:
    """H2 controller for the empirical (1/n) mean and covariance of the samples"""
    bundle = synthesize_h2(system, cost, MomentSpec.from_samples(samples))
    bundle.kind = "nominal"
    return bundle


def synthesize_h2_reference(system: SystemSpec, cost: CostSpec, ref: GaussianReference) -> SolutionBundle:
    """H2 controller under the reference measure's moments"""
    bundle = synthesize_h2(system, cost, MomentSpec.from_reference(ref))
    bundle.kind = "h2-reference"
    return bundle


def evaluate_expected_cost(closed_loop: Union[ClosedLoopMap, np.ndarray], moments: MomentSpec,
                           cost: Optional[CostSpec] = None) -> float:
    """tr(Phi^T D Phi Sigma) + mu^T Phi^T D Phi mu; D defaults to the identity"""
    phi = closed_loop.phi if isinstance(closed_loop, ClosedLoopMap) else np.asarray(closed_loop, dtype=float)
    if phi.shape[1] != moments.mean.size:
        raise ValidationError(f"map has {phi.shape[1]} columns, moments have dimension {moments.mean.size}")
    D = np.eye(phi.shape[0]) if cost is None else cost.D
    if D.shape[0] != phi.shape[0]:
        raise ValidationError(f"D has size {D.shape[0]}, map has {phi.shape[0]} rows")
    weighted = phi.T @ D @ phi
    return float(np.trace(weighted @ moments.cov) + moments.mean @ weighted @ moments.mean)


def q_swap_certificate(bundle: SolutionBundle, req: SynthesisRequest, Q: Optional[np.ndarray] = None,
                       lam: Optional[float] = None) -> Dict[str, Any]:
    """
    Replaces Q* by the loss matrix of Phi* (lifted when x0 is known) and re-checks
    the constraints at (lambda*, s, zeta).

    Violations are relative to the size of each block; the objective must stay
    unchanged. Q and lam override the swapped values for sensitivity checks.
    """
    lam = bundle.lambda_star if lam is None else lam
    phi = bundle.phi
    D_half_phi = req.cost.Dhalf @ phi @ req.noise_map()
    Q = D_half_phi.T @ D_half_phi if Q is None else np.asarray(Q, dtype=float)
    if not np.isfinite(lam):
        return {"passed": True, "violations": {}, "worst": None, "objective_change": 0.0,
                "note": "empirical ball (lambda* = inf): nothing to certify"}

    ref, eps, samples = req.noise_ref, req.amb.eps, req.noise_samples
    k = ref.dim
    lifted = req.x0 is not None
    tol = config.CERTIFICATE_TOL
    violations: Dict[str, float] = {}

    def psd_violation(block: np.ndarray) -> float:
        scale = 1.0 + np.abs(block).max()
        return max(-np.linalg.eigvalsh(0.5 * (block + block.T)).min(), 0.0) / scale

    M = lam * _metric(ref, eps) - Q[:k, :k]
    violations["M.strict"] = psd_violation(M)

    h = 0.5 * eps
    shift = h * (ref.cov_inv @ ref.mean)
    mean_term = h * ref.mean_norm_sq if eps > 0 else 0.0
    for i, w in enumerate(samples.trajectories):
        vector = lam * (w + shift)
        corner = bundle.zeta[i] + lam * (float(w @ w) + mean_term)
        if lifted:
            vector = vector - Q[:k, k]
            corner = corner - Q[k, k]
        block = np.block([[M, vector[:, None]], [vector[None, :], np.array([[corner]])]])
        violations[f"sample[{i}].lmi"] = psd_violation(block)

    schur = np.block([[Q, D_half_phi.T], [D_half_phi, np.eye(phi.shape[0])]])
    violations["cost.schur"] = psd_violation(schur)

    if eps == 0:
        epigraph = bundle.zeta - bundle.s
    else:
        sign, logdet_M = np.linalg.slogdet(M)
        if sign <= 0:
            logdet_M = -math.inf
        half = 0.5 * lam * eps
        epigraph = half * k * math.log(half) - half * ref.logdet - half * logdet_M + bundle.zeta - bundle.s
    violations["epigraph"] = float(max(np.max(epigraph) / (1.0 + np.abs(bundle.s).max()), 0.0))

    objective = lam * req.amb.rho + float(np.mean(bundle.s))
    objective_change = abs(objective - bundle.wc_cost) / max(1.0, abs(bundle.wc_cost))
    worst = max(violations.items(), key=lambda item: item[1])
    passed = worst[1] <= tol and objective_change <= tol
    if not passed:
        logger.warning(f"Q-swap certificate failed: worst violation {worst[0]}={worst[1]:.3e}, "
                       f"objective change {objective_change:.3e}")
    return {
        "passed": bool(passed),
        "violations": violations,
        "worst": worst,
        "objective_change": objective_change,
    }
