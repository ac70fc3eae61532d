# ambiguity.py - Sinkhorn Ambiguity Set Module
import logging
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
import ot
import scipy.linalg as sla
from scipy.special import logsumexp, rel_entr
from scipy.stats import multivariate_normal

import config
from error_handler import ValidationError, AbsoluteContinuityError, SinkhornConvergenceError
from system import SampleSet, condition_gaussian

logger = logging.getLogger(__name__)


class GaussianReference:
    """Reference measure nu = N(m, Sigma) with cached factorizations"""

    def __init__(self, mean, cov):
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        s = cov.shape[0]
        mean = np.zeros(s) if mean is None else np.ravel(np.asarray(mean, dtype=float))
        if cov.shape != (s, s) or mean.size != s:
            raise ValidationError(f"reference mean length {mean.size} and covariance {cov.shape} disagree")
        if not np.allclose(cov, cov.T, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise ValidationError("reference covariance must be symmetric")
        cov = 0.5 * (cov + cov.T)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValidationError("reference covariance must be positive definite")

        self.mean = mean
        self.cov = cov
        self.chol = chol
        self.cov_inv = sla.cho_solve((chol, True), np.eye(s))
        self.logdet = float(2.0 * np.log(np.diag(chol)).sum())
        for array in (self.mean, self.cov, self.chol, self.cov_inv):
            array.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def mean_norm_sq(self) -> float:
        """||m||^2 in the Sigma^-1 metric"""
        return float(self.mean @ self.cov_inv @ self.mean)

    @classmethod
    def isotropic(cls, s: int, scale: float, mean=None) -> "GaussianReference":
        return cls(mean, scale * np.eye(s))

    def given_initial_state(self, x0) -> "GaussianReference":
        """Reference over the disturbance block once x_0 is known (Gaussian conditional)"""
        mean, cov = condition_gaussian(self.mean, self.cov, x0)
        return GaussianReference(mean, cov)

    def logpdf(self, points: np.ndarray) -> np.ndarray:
        return multivariate_normal(self.mean, self.cov).logpdf(points)


class AmbiguitySpec:
    """S-set radius and regularization; transport cost is ||x - y||^2"""

    def __init__(self, rho: float, eps: float):
        if rho < 0:
            raise ValidationError(f"rho must be >= 0, got {rho}")
        if eps < 0:
            raise ValidationError(f"eps must be >= 0, got {eps}")
        self.rho = float(rho)
        self.eps = float(eps)

    @property
    def is_wasserstein(self) -> bool:
        return self.eps == 0.0


class DiscreteMeasure:
    """Finitely supported probability measure"""

    def __init__(self, points, weights=None):
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            points = points.reshape(-1, 1)
        k = points.shape[0]
        weights = np.full(k, 1.0 / k) if weights is None else np.ravel(np.asarray(weights, dtype=float))
        if weights.size != k:
            raise ValidationError(f"{weights.size} weights for {k} atoms")
        if np.any(weights < 0):
            raise ValidationError("weights must be nonnegative")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValidationError(f"weights sum to {weights.sum():.15g}, expected 1")
        self.points = points
        self.weights = weights

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @classmethod
    def dirac(cls, point) -> "DiscreteMeasure":
        return cls(np.atleast_2d(np.asarray(point, dtype=float)), [1.0])

    @classmethod
    def from_samples(cls, samples: SampleSet) -> "DiscreteMeasure":
        return cls(np.array(samples.trajectories))


class Coupling:
    """Transport plan between two discrete measures"""

    def __init__(self, plan, first: DiscreteMeasure, second: DiscreteMeasure):
        plan = np.asarray(plan, dtype=float)
        if plan.shape != (first.size, second.size):
            raise ValidationError(f"plan shape {plan.shape} does not match marginals ({first.size}, {second.size})")
        if np.any(plan < -1e-15):
            raise ValidationError("plan must be nonnegative")
        row_err = np.abs(plan.sum(axis=1) - first.weights).max()
        col_err = np.abs(plan.sum(axis=0) - second.weights).max()
        if max(row_err, col_err) > 1e-9:
            raise ValidationError(f"plan marginals off by {max(row_err, col_err):.3e}")
        self.plan = np.maximum(plan, 0.0)


def feasibility_threshold(samples: SampleSet, ref: GaussianReference, eps: float) -> float:
    """
    Smallest radius for which the Sinkhorn ball around the empirical
    distribution is nonempty.

    Uses the per-sample Gaussian integral (the ||w||^2 term is averaged with
    the quadratic term).
    """
    if eps < 0:
        raise ValidationError(f"eps must be >= 0, got {eps}")
    if samples.s != ref.dim:
        raise ValidationError(f"samples have {samples.s} columns, reference has dimension {ref.dim}")
    if eps == 0:
        return 0.0

    h = eps / 2.0
    # (eps/2) log|Sigma + (eps/2) I| - (eps s / 2) log(eps/2) == (eps/2) log|I + (2/eps) Sigma|
    sigma_eig = np.linalg.eigvalsh(ref.cov)
    logdet_term = h * float(np.log1p(sigma_eig / h).sum())

    B = np.eye(ref.dim) + h * ref.cov_inv
    V = samples.trajectories + h * (ref.cov_inv @ ref.mean)
    quad = np.einsum("ij,ji->i", V, np.linalg.solve(B, V.T))
    sq_norms = np.einsum("ij,ij->i", samples.trajectories, samples.trajectories)

    return float(logdet_term + h * ref.mean_norm_sq + np.mean(sq_norms - quad))


def infinite_eps_limit(samples: SampleSet, ref: GaussianReference) -> float:
    """(1/n) sum ||w_i - m||^2 + tr(Sigma): expected cost under P x nu"""
    centred = samples.trajectories - ref.mean
    return float(np.mean(np.einsum("ij,ij->i", centred, centred)) + np.trace(ref.cov))


def feasibility_tilt(sample, ref: GaussianReference, eps: float) -> Dict[str, np.ndarray]:
    """Gaussian proportional to nu(z) exp(-||w - z||^2 / eps); attains rho_min for one sample"""
    if eps <= 0:
        raise ValidationError("the tilt needs eps > 0")
    sample = np.ravel(np.asarray(sample, dtype=float))
    precision = ref.cov_inv + (2.0 / eps) * np.eye(ref.dim)
    cov = np.linalg.inv(precision)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (ref.cov_inv @ ref.mean + (2.0 / eps) * sample)
    return {"mean": mean, "cov": cov}


def _hermite_grid(dim: int, nodes: int) -> Tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss-Hermite nodes and log-weights for E_{N(0, I/2)}-style integrals"""
    x, w = np.polynomial.hermite.hermgauss(nodes)
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    points = np.stack([g.ravel() for g in grids], axis=1)
    log_w = sum(np.log(wg).ravel() for wg in np.meshgrid(*([w] * dim), indexing="ij"))
    return points, log_w - 0.5 * dim * np.log(np.pi)


def feasibility_oracle(samples: SampleSet, ref: GaussianReference, eps: float,
                       draws: Optional[int] = None, seed: int = 0,
                       tolerance: Optional[float] = None) -> Dict[str, Any]:
    """
    -eps * E_P[log E_nu exp(-c(w, z) / eps)] evaluated numerically.

    Integrates the definition against an importance proposal centred at the
    mode of the integrand (inflated covariance): tensor Gauss-Hermite when
    s <= QUADRATURE_MAX_DIM, seeded Monte Carlo otherwise.
    """
    if eps <= 0:
        raise ValidationError(f"the oracle needs eps > 0, got {eps}")
    if samples.s != ref.dim:
        raise ValidationError(f"samples have {samples.s} columns, reference has dimension {ref.dim}")
    draws = draws or config.MC_SAMPLES
    tolerance = config.ORACLE_REL_TOL if tolerance is None else tolerance
    s = ref.dim
    use_quadrature = s <= config.QUADRATURE_MAX_DIM
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    if use_quadrature:
        unit_nodes, log_weights = _hermite_grid(s, config.QUADRATURE_NODES)

    per_sample = np.zeros(samples.n)
    stderr_sq = np.zeros(samples.n)
    for i, w_hat in enumerate(samples.trajectories):
        tilt = feasibility_tilt(w_hat, ref, eps)
        proposal_cov = 1.5 * tilt["cov"]
        proposal = multivariate_normal(tilt["mean"], proposal_cov)
        if use_quadrature:
            L = np.linalg.cholesky(proposal_cov)
            z = tilt["mean"] + np.sqrt(2.0) * unit_nodes @ L.T
            log_terms = log_weights
        else:
            z = proposal.rvs(size=draws, random_state=rng).reshape(draws, s)
            log_terms = np.full(draws, -np.log(draws))

        log_ratio = ref.logpdf(z) - proposal.logpdf(z) - np.sum((z - w_hat) ** 2, axis=1) / eps
        log_expectation = logsumexp(log_terms + log_ratio)
        per_sample[i] = -eps * log_expectation

        if not use_quadrature:
            ratios = np.exp(log_ratio - log_ratio.max())
            rel_se = ratios.std(ddof=1) / (ratios.mean() * np.sqrt(draws))
            stderr_sq[i] = (eps * rel_se) ** 2

    rho_min = float(per_sample.mean())
    stderr = float(np.sqrt(stderr_sq.sum()) / samples.n)
    within = stderr <= tolerance * max(abs(rho_min), 1e-12)
    if not within:
        logger.warning(f"Oracle standard error {stderr:.3e} exceeds requested tolerance; increase draws")
    return {
        "rho_min": rho_min,
        "stderr": stderr,
        "method": "quadrature" if use_quadrature else "monte-carlo",
        "draws": int(config.QUADRATURE_NODES ** s) if use_quadrature else int(draws),
        "within_tolerance": bool(within),
        "per_sample": per_sample,
    }


def discrete_ot(P: DiscreteMeasure, Q: DiscreteMeasure) -> Tuple[float, Coupling]:
    """Exact OT value for squared Euclidean cost (network-simplex LP)"""
    C = ot.dist(P.points, Q.points, metric="sqeuclidean")
    plan = ot.emd(P.weights, Q.weights, C)
    return float(np.sum(plan * C)), Coupling(plan, P, Q)


def _match_atoms(Q: DiscreteMeasure, nu: DiscreteMeasure) -> np.ndarray:
    """Index of the nu-atom carrying each Q-atom (-1 when none)"""
    C = ot.dist(Q.points, nu.points, metric="sqeuclidean")
    nearest = C.argmin(axis=1)
    found = C[np.arange(Q.size), nearest] <= config.ATOM_MATCH_TOL ** 2
    return np.where(found, nearest, -1)


def discrete_sinkhorn(P: DiscreteMeasure, Q: DiscreteMeasure, nu: DiscreteMeasure,
                      eps: float) -> Tuple[float, Coupling]:
    """
    Sinkhorn discrepancy <C, gamma> + eps * KL(gamma | P x nu) over couplings of (P, Q).

    Scaling iterations on the kernel P_i nu_j exp(-C_ij / eps); log-domain
    below SINKHORN_LOG_DOMAIN_BELOW. eps = 0 is plain OT.
    """
    if eps < 0:
        raise ValidationError(f"eps must be >= 0, got {eps}")
    if eps == 0:
        return discrete_ot(P, Q)

    carrier = _match_atoms(Q, nu)
    rows = np.flatnonzero(P.weights > 0)
    cols = np.flatnonzero(Q.weights > 0)
    missing = [j for j in cols if carrier[j] < 0 or nu.weights[carrier[j]] <= 0]
    if missing:
        raise AbsoluteContinuityError(f"Q-atom {missing[0]} at {Q.points[missing[0]].tolist()} has no nu mass")

    a = P.weights[rows]
    b = Q.weights[cols]
    ref_mass = np.outer(a, nu.weights[carrier[cols]])
    C = ot.dist(P.points[rows], Q.points[cols], metric="sqeuclidean")
    M = C - eps * np.log(ref_mass)
    method = "sinkhorn_log" if eps < config.SINKHORN_LOG_DOMAIN_BELOW else "sinkhorn"

    plan, log = ot.sinkhorn(a, b, M, eps, method=method, numItermax=config.SINKHORN_MAX_ITER,
                            stopThr=config.SINKHORN_STOP_THRESHOLD, log=True, warn=False)
    plan = np.asarray(plan)
    residual = float(np.abs(plan.sum(axis=1) - a).sum() + np.abs(plan.sum(axis=0) - b).sum())
    if not np.isfinite(residual) or residual > config.SINKHORN_ACCEPT_RESIDUAL:
        raise SinkhornConvergenceError(residual, int(log.get("niter", config.SINKHORN_MAX_ITER)))

    # exact projection of the tiny remaining row error before building the coupling
    plan = plan * (a / plan.sum(axis=1))[:, None]
    value = float(np.sum(plan * C) + eps * np.sum(rel_entr(plan, ref_mass)))

    full = np.zeros((P.size, Q.size))
    full[np.ix_(rows, cols)] = plan
    return value, Coupling(full, P, Q)


def ball_nesting_check(P: DiscreteMeasure, Q: DiscreteMeasure, nu: DiscreteMeasure,
                       rho: float, eps_grid: Sequence[float]) -> Dict[str, Any]:
    """Membership of Q in B_{rho,eps}(P) along an increasing eps grid"""
    eps_values = sorted(set(float(e) for e in eps_grid))
    ot_value, _ = discrete_ot(P, Q)
    ot_member = ot_value <= rho

    rows = []
    for eps in eps_values:
        value = ot_value if eps == 0 else discrete_sinkhorn(P, Q, nu, eps)[0]
        rows.append({
            "eps": eps,
            "value": value,
            "member": bool(value <= rho),
            "boundary": bool(abs(value - rho) <= config.BOUNDARY_REL_TOL * (1.0 + rho)),
        })

    members = [row["member"] for row in rows]
    # once excluded, never re-included
    monotone = all(not (later and not earlier) for earlier, later in zip(members, members[1:]))
    implies_ot = all((not member) or ot_member for member in members)
    if not (monotone and implies_ot):
        logger.warning(f"Nesting check failed: monotone={monotone}, implies_ot={implies_ot}")
    return {
        "rho": rho,
        "ot_value": ot_value,
        "ot_member": bool(ot_member),
        "rows": rows,
        "monotone": bool(monotone),
        "implies_ot_membership": bool(implies_ot),
        "passed": bool(monotone and implies_ot),
    }
