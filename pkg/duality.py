# duality.py - Worst-Case Risk (Strong Dual) Module
import math
import logging
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import scipy.linalg as sla
from scipy.special import logsumexp

import config
from ambiguity import GaussianReference, DiscreteMeasure, feasibility_threshold
from conic import ConicProgram, solve
from error_handler import (ValidationError, DivergentIntegralError, InfeasibleRadiusError,
                           UnboundedDualError, GridResolutionError, SolverFailureError)
from line_search import TracedFunction, bracket_from_lower, golden_section
from system import SampleSet

logger = logging.getLogger(__name__)


class QuadraticLoss:
    """l(z) = z^T Q z + 2 q^T z + c"""

    def __init__(self, Q, q=None, c: float = 0.0):
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        if Q.shape[0] != Q.shape[1]:
            raise ValidationError(f"Q must be square, got {Q.shape}")
        if not np.allclose(Q, Q.T, atol=1e-10 * max(1.0, np.abs(Q).max())):
            raise ValidationError("Q must be symmetric")
        self.Q = 0.5 * (Q + Q.T)
        self.q = np.zeros(Q.shape[0]) if q is None else np.ravel(np.asarray(q, dtype=float))
        if self.q.size != Q.shape[0]:
            raise ValidationError(f"q has length {self.q.size}, expected {Q.shape[0]}")
        self.c = float(c)

    @property
    def dim(self) -> int:
        return self.Q.shape[0]

    @classmethod
    def from_map(cls, phi: np.ndarray, D: np.ndarray, x0=None) -> "QuadraticLoss":
        """Closed-loop cost z -> ||D^1/2 Phi z||^2

        With a known initial state the loss is a function of the disturbance
        block only: z = [x0; w] and l(w) keeps x0 in q and c.
        """
        weighted = phi.T @ D @ phi
        if x0 is None:
            return cls(weighted)
        x0 = np.ravel(np.asarray(x0, dtype=float))
        d = x0.size
        return cls(weighted[d:, d:], weighted[d:, :d] @ x0, float(x0 @ weighted[:d, :d] @ x0))

    def value(self, points) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(points, dtype=float))
        if Z.shape[1] != self.dim and Z.shape[0] == self.dim:
            Z = Z.T
        return np.einsum("ij,jk,ik->i", Z, self.Q, Z) + 2.0 * Z @ self.q + self.c


class DualEvaluation:
    """Minimizer of the dual objective over lambda"""

    def __init__(self, lambda_star: float, value: float, per_sample: np.ndarray,
                 bracket: Optional[tuple], rho: float, eps: float, rho_min: float,
                 boundary: bool = False, evaluations: int = 0):
        self.lambda_star = lambda_star
        self.value = value
        self.per_sample = per_sample
        self.bracket = bracket
        self.rho = rho
        self.eps = eps
        self.rho_min = rho_min
        self.boundary = boundary
        self.evaluations = evaluations

    def to_dict(self) -> Dict[str, Any]:
        return {
            "lambda_star": self.lambda_star,
            "value": self.value,
            "rho": self.rho,
            "eps": self.eps,
            "rho_min": self.rho_min,
            "boundary": self.boundary,
            "bracket": list(self.bracket) if self.bracket else None,
            "evaluations": self.evaluations,
        }


def multiplier_matrix(loss: QuadraticLoss, lam: float, ref: GaussianReference, eps: float) -> np.ndarray:
    """M = lambda (I + eps/2 Sigma^-1) - Q"""
    return lam * (np.eye(loss.dim) + 0.5 * eps * ref.cov_inv) - loss.Q


def spectral_bound(loss: QuadraticLoss, ref: Optional[GaussianReference], eps: float) -> float:
    """Smallest lambda >= 0 with M > 0: top generalized eigenvalue of (Q, I + eps/2 Sigma^-1)"""
    if eps == 0 or ref is None:
        top = np.linalg.eigvalsh(loss.Q).max()
    else:
        metric = np.eye(loss.dim) + 0.5 * eps * ref.cov_inv
        top = sla.eigh(loss.Q, metric, eigvals_only=True).max()
    return max(float(top), 0.0)


def _partition_terms(loss: QuadraticLoss, lam: float, ref: GaussianReference, eps: float,
                     W: np.ndarray) -> np.ndarray:
    """Closed-form lambda eps log E_nu exp((l(z) - lambda ||w - z||^2) / (lambda eps)) per row of W"""
    if lam <= 0 or eps <= 0:
        raise ValidationError(f"log-partition needs lambda > 0 and eps > 0, got {lam}, {eps}")
    if W.shape[1] != loss.dim or ref.dim != loss.dim:
        raise ValidationError(f"dimension mismatch: loss {loss.dim}, reference {ref.dim}, samples {W.shape[1]}")
    half = 0.5 * lam * eps
    M = multiplier_matrix(loss, lam, ref, eps)
    try:
        # (lam eps s/2) log(lam eps/2) - (lam eps/2) log|M| == -(lam eps/2) log|M / (lam eps/2)|
        chol_scaled = np.linalg.cholesky(M / half)
    except np.linalg.LinAlgError:
        raise DivergentIntegralError(f"M is not positive definite at lambda={lam:.6g} (eps={eps:g})")
    logdet_scaled = 2.0 * np.log(np.diag(chol_scaled)).sum()

    shift = 0.5 * eps * (ref.cov_inv @ ref.mean)
    beta = loss.q + lam * (W + shift)
    solved = sla.cho_solve((chol_scaled, True), beta.T) / half
    quad = np.einsum("ij,ji->i", beta, solved)
    sq_norms = np.einsum("ij,ij->i", W, W)
    return -half * (ref.logdet + logdet_scaled) + quad - lam * sq_norms - half * ref.mean_norm_sq + loss.c


def log_partition(loss: QuadraticLoss, lam: float, ref: GaussianReference, eps: float, sample) -> float:
    sample = np.atleast_2d(np.asarray(sample, dtype=float)).reshape(1, -1)
    return float(_partition_terms(loss, lam, ref, eps, sample)[0])


def _wasserstein_terms(loss: QuadraticLoss, lam: float, W: np.ndarray) -> np.ndarray:
    """sup_z l(z) - lambda ||w - z||^2 = (q + lambda w)^T (lambda I - Q)^-1 (q + lambda w) - lambda ||w||^2"""
    shifted = lam * np.eye(loss.dim) - loss.Q
    try:
        chol = np.linalg.cholesky(shifted)
    except np.linalg.LinAlgError:
        raise DivergentIntegralError(f"lambda I - Q is not positive definite at lambda={lam:.6g}")
    beta = loss.q + lam * W
    quad = np.einsum("ij,ji->i", beta, sla.cho_solve((chol, True), beta.T))
    return quad - lam * np.einsum("ij,ij->i", W, W) + loss.c


def wasserstein_dual_objective(loss: QuadraticLoss, lam: float, samples: SampleSet, rho: float) -> float:
    return float(lam * rho + _wasserstein_terms(loss, lam, samples.trajectories).mean())


def dual_objective(loss: QuadraticLoss, lam: float, samples: SampleSet, ref: GaussianReference,
                   rho: float, eps: float) -> float:
    """lambda rho + (1/n) sum_i log_partition(w_i); eps = 0 uses the Wasserstein closed form"""
    if eps == 0:
        return wasserstein_dual_objective(loss, lam, samples, rho)
    return float(lam * rho + _partition_terms(loss, lam, ref, eps, samples.trajectories).mean())


def worst_case_risk(loss: QuadraticLoss, samples: SampleSet, ref: GaussianReference,
                    rho: float, eps: float) -> DualEvaluation:
    """
    Worst-case expected loss over the Sinkhorn ball of radius rho.

    Minimizes the (convex) dual objective over lambda in (lambda_lb, inf):
    doubling bracket from the spectral bound, then golden section.
    """
    if rho < 0 or eps < 0:
        raise ValidationError(f"rho and eps must be >= 0, got {rho}, {eps}")
    rho_min = feasibility_threshold(samples, ref, eps)
    if rho < rho_min:
        raise InfeasibleRadiusError(rho, rho_min, eps)
    boundary = rho - rho_min <= config.BOUNDARY_REL_TOL * (1.0 + abs(rho))
    if boundary:
        logger.warning(f"rho={rho:.6g} is within tolerance of rho_min={rho_min:.6g}; attainment not guaranteed")

    if eps == 0 and rho == 0:
        per_sample = loss.value(samples.trajectories)
        return DualEvaluation(math.inf, float(per_sample.mean()), per_sample, None, rho, eps, rho_min,
                              boundary=True)

    lam_lb = spectral_bound(loss, ref, eps)
    floor = lam_lb * (1.0 + config.LAMBDA_MARGIN)

    def objective(lam: float) -> float:
        if lam <= floor:
            return math.inf
        try:
            return dual_objective(loss, lam, samples, ref, rho, eps)
        except DivergentIntegralError:
            return math.inf

    traced = TracedFunction(objective)
    offset = max(lam_lb * config.LAMBDA_START_OFFSET, 1e-8)
    bracket = bracket_from_lower(traced, lam_lb, offset, config.LAMBDA_CAP)
    if bracket["decreasing"]:
        lam_star, value = bracket["best"]
        if not boundary:
            raise UnboundedDualError(f"dual objective still decreasing at lambda={lam_star:.3e} "
                                     f"(rho={rho:g}, eps={eps:g})")
        logger.warning(f"Dual infimum approached only as lambda -> inf; reporting value at lambda={lam_star:.3e}")
    else:
        lam_star, value = golden_section(traced, bracket["a"], bracket["b"], rel_tol=config.LAMBDA_REL_TOL)

    if eps == 0:
        per_sample = _wasserstein_terms(loss, lam_star, samples.trajectories)
    else:
        per_sample = _partition_terms(loss, lam_star, ref, eps, samples.trajectories)
    logger.debug(f"worst_case_risk: lambda*={lam_star:.10g}, value={value:.10g}, "
                 f"{len(traced.trace)} evaluations")
    return DualEvaluation(float(lam_star), float(value), per_sample, (bracket["a"], bracket["b"]),
                          rho, eps, rho_min, boundary=boundary, evaluations=len(traced.trace))


def risk_profile(loss: QuadraticLoss, samples: SampleSet, ref: GaussianReference, rho: float,
                 eps_grid: Sequence[float]) -> List[Dict[str, Any]]:
    """Worst-case risk of a fixed loss along an eps grid; infeasible cells are kept with status"""
    rows = []
    for eps in sorted(float(e) for e in eps_grid):
        try:
            result = worst_case_risk(loss, samples, ref, rho, eps)
            rows.append({"eps": eps, "status": "ok", "value": result.value,
                         "lambda_star": result.lambda_star, "rho_min": result.rho_min})
        except InfeasibleRadiusError as error:
            rows.append({"eps": eps, "status": "infeasible", "value": math.nan,
                         "lambda_star": math.nan, "rho_min": error.rho_min})
    return rows


def gaussian_grid(ref: GaussianReference, count: int = 2001, width: float = 8.0) -> DiscreteMeasure:
    """Uniform grid over mean +/- width std of a 1-D reference, weights from the density"""
    if ref.dim != 1:
        raise ValidationError("grid discretization is one-dimensional")
    sigma = math.sqrt(ref.cov[0, 0])
    points = np.linspace(ref.mean[0] - width * sigma, ref.mean[0] + width * sigma, count)
    log_density = ref.logpdf(points.reshape(-1, 1))
    weights = np.exp(log_density - logsumexp(log_density))
    return DiscreteMeasure(points.reshape(-1, 1), weights / weights.sum())


def primal_oracle_1d(loss: QuadraticLoss, samples: SampleSet, nu_grid: DiscreteMeasure, rho: float,
                     eps: float, ref: Optional[GaussianReference] = None, tolerance: float = 1e-2,
                     backend=None) -> float:
    """
    Best expected loss over discrete distributions on the grid inside the
    discretized Sinkhorn ball (one-dimensional noise only).

    Solved as an exponential-cone program over the coupling gamma (n x J) with
    entropy epigraph r. When ref is given the relative gap to the closed-form
    dual is checked against tolerance.
    """
    if samples.s != 1 or loss.dim != 1 or nu_grid.points.shape[1] != 1:
        raise ValidationError("the primal grid oracle is one-dimensional")
    n = samples.n
    P = np.full(n, 1.0 / n)
    points = nu_grid.points[:, 0]
    nu_weights = nu_grid.weights
    if eps == 0:
        points = np.union1d(points, samples.trajectories[:, 0])
    J = points.size

    C = (samples.trajectories[:, 0][:, None] - points[None, :]) ** 2
    ell = loss.value(points.reshape(-1, 1))

    if eps > 0:
        keep = nu_weights > 0
        rho_min_grid = float(np.mean(-eps * logsumexp(-C[:, keep] / eps, b=nu_weights[keep], axis=1)))
        if rho < rho_min_grid:
            raise InfeasibleRadiusError(rho, rho_min_grid, eps)

    program = ConicProgram("primal_oracle_1d")
    gamma = program.add_variable("gamma", (n, J))
    program.nonneg(gamma, "coupling.nonneg")
    program.equal(gamma @ np.ones((J, 1)), P.reshape(-1, 1), "coupling.marginal")
    budget = gamma.vec().lmul(C.ravel(order="F")[None, :])
    if eps > 0:
        r = program.add_variable("r", (n, J))
        reference_mass = np.outer(P, nu_weights).ravel(order="F")
        # r >= gamma log(gamma / (P x nu))
        program.exp_cone(-r.vec(), gamma.vec(), np.maximum(reference_mass, 0.0), "coupling.entropy")
        budget = budget + eps * r.sum()
    program.leq(budget, rho, "radius")
    program.maximize(gamma.vec().lmul(np.tile(ell, (n, 1)).ravel(order="F")[None, :]))

    report, _ = solve(program, backend)
    if report.status == "infeasible":
        raise InfeasibleRadiusError(rho, feasibility_threshold(samples, ref, eps) if ref else math.nan, eps)
    if not report.ok:
        raise SolverFailureError("primal grid oracle did not solve", report)
    value = float(report.objective)

    if ref is not None:
        dual = worst_case_risk(loss, samples, ref, rho, eps).value
        gap = (dual - value) / max(1.0, abs(dual))
        if abs(gap) > tolerance:
            raise GridResolutionError(gap, tolerance)
        logger.info(f"Primal grid oracle {value:.8g} vs dual {dual:.8g} (relative gap {gap:.2e})")
    return value
