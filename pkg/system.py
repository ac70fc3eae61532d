# system.py - Stacked Plant and Closed-Loop Map Module
import logging
from typing import List, Optional, Sequence, Tuple, Union, Dict, Any

import numpy as np
import scipy.linalg as sla

import config
from error_handler import ValidationError, CausalityError, UnsupportedRecoveryError

logger = logging.getLogger(__name__)

MatrixLike = Union[np.ndarray, Sequence[Sequence[float]]]


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


class SystemSpec:
    """Finite-horizon LTV plant x_{t+1} = A_t x_t + B_t u_t + E_t w_t"""

    def __init__(self, horizon: int, A, B, E):
        if int(horizon) != horizon or horizon < 2:
            raise ValidationError(f"horizon must be an integer >= 2, got {horizon}")
        self.N = int(horizon)
        self.A = self._expand("A", A)
        self.B = self._expand("B", B)
        self.E = self._expand("E", E)

        self.d = self.A[0].shape[0]
        self.m = self.B[0].shape[1]
        self.p = self.E[0].shape[1]

        # हर time index पर dimensions check करें
        for t in range(self.N - 1):
            if self.A[t].shape != (self.d, self.d):
                raise ValidationError(f"A[{t}] has shape {self.A[t].shape}, expected ({self.d}, {self.d})")
            if self.B[t].shape != (self.d, self.m):
                raise ValidationError(f"B[{t}] has shape {self.B[t].shape}, expected ({self.d}, {self.m})")
            if self.E[t].shape != (self.d, self.p):
                raise ValidationError(f"E[{t}] has shape {self.E[t].shape}, expected ({self.d}, {self.p})")

    def _expand(self, name: str, value) -> List[np.ndarray]:
        """Time-invariant shorthand को N-1 copies में expand करता है

        0-d: scalar plant, repeated; 1-d: one scalar per step; 2-d: one matrix,
        repeated; 3-d: one matrix per step.
        """
        try:
            array = np.asarray(value, dtype=float)
        except ValueError:
            raise ValidationError(f"{name} must be a matrix or a list of equally shaped matrices")
        if array.ndim == 0:
            return [_frozen(array.reshape(1, 1)) for _ in range(self.N - 1)]
        if array.ndim == 2:
            return [_frozen(array) for _ in range(self.N - 1)]
        if array.ndim == 1:
            array = array.reshape(-1, 1, 1)
        if array.ndim != 3:
            raise ValidationError(f"{name} has {array.ndim} dimensions")
        if array.shape[0] != self.N - 1:
            raise ValidationError(f"{name} lists {array.shape[0]} matrices, expected N-1 = {self.N - 1}")
        return [_frozen(mat) for mat in array]

    @property
    def s(self) -> int:
        return self.d + (self.N - 1) * self.p

    @classmethod
    def mass_spring(cls, horizon: int, mass: float = 1.0, spring: float = 1.0,
                    damping: float = 1.0, sampling_time: float = 1.0) -> "SystemSpec":
        """Discrete-time stochastic mass-spring-damper (E_t = I)"""
        Ts = sampling_time
        A = np.array([[1.0, Ts], [-spring * Ts / mass, 1.0 - damping * Ts / mass]])
        B = np.array([[0.0], [Ts / mass]])
        return cls(horizon, A, B, np.eye(2))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "horizon": self.N,
            "A": [a.tolist() for a in self.A],
            "B": [b.tolist() for b in self.B],
            "E": [e.tolist() for e in self.E],
        }


class StackedSystem:
    """Block-stacked operators of x = Z A x + Z B u + E w"""

    def __init__(self, spec: SystemSpec, Z, bigA, bigB, bigE):
        self.spec = spec
        self.N, self.d, self.m, self.p = spec.N, spec.d, spec.m, spec.p
        self.s = spec.s
        self.Z = _frozen(Z)
        self.bigA = _frozen(bigA)
        self.bigB = _frozen(bigB)
        self.bigE = _frozen(bigE)
        self.achievability_operator = _frozen(
            np.hstack([np.eye(self.N * self.d) - self.Z @ self.bigA, -self.Z @ self.bigB]))

    @property
    def phi_rows(self) -> int:
        return self.N * (self.d + self.m)

    def phi_mask(self) -> np.ndarray:
        """Causal sparsity pattern of the stacked map [Phi_x; Phi_u]"""
        return np.vstack([causal_mask(self.N, self.d, self.d, self.p),
                          causal_mask(self.N, self.m, self.d, self.p)])


def build_stacked(spec: SystemSpec) -> StackedSystem:
    """Z, bigA, bigB, bigE बनाता है"""
    N, d, m, p = spec.N, spec.d, spec.m, spec.p
    Z = np.kron(np.eye(N, k=-1), np.eye(d))
    bigA = sla.block_diag(*spec.A, np.zeros((d, d)))
    bigB = sla.block_diag(*spec.B, np.zeros((d, m)))
    bigE = sla.block_diag(np.eye(d), *spec.E)
    return StackedSystem(spec, Z, bigA, bigB, bigE)


def causal_mask(N: int, row_block: int, first_col_block: int, col_block: int) -> np.ndarray:
    """Row-block t may only touch column blocks 0..t (first block wide first_col_block)"""
    cols = first_col_block + (N - 1) * col_block
    mask = np.zeros((N * row_block, cols), dtype=bool)
    for t in range(N):
        allowed = first_col_block + t * col_block
        mask[t * row_block:(t + 1) * row_block, :allowed] = True
    return mask


def _enforce_pattern(name: str, matrix: np.ndarray, mask: np.ndarray) -> np.ndarray:
    matrix = np.array(matrix, dtype=float)
    if matrix.shape != mask.shape:
        raise ValidationError(f"{name} has shape {matrix.shape}, expected {mask.shape}")
    outside = np.abs(matrix[~mask])
    scale = 1.0 + (np.abs(matrix).max() if matrix.size else 0.0)
    if outside.size and outside.max() > config.CAUSALITY_TOL * scale:
        raise CausalityError(f"{name} has a non-causal entry of size {outside.max():.3e}")
    matrix[~mask] = 0.0
    return _frozen(matrix)


class CostSpec:
    """Quadratic stage-stacked cost [x; u]^T D [x; u]"""

    def __init__(self, D: MatrixLike):
        D = np.atleast_2d(np.asarray(D, dtype=float))
        if D.shape[0] != D.shape[1]:
            raise ValidationError(f"D must be square, got {D.shape}")
        scale = max(1.0, float(np.abs(D).max()))
        if not np.allclose(D, D.T, atol=1e-12 * scale):
            raise ValidationError("D must be symmetric")
        D = 0.5 * (D + D.T)
        eigvals, eigvecs = np.linalg.eigh(D)
        norm = float(np.abs(eigvals).max()) if eigvals.size else 0.0
        if eigvals.min() < -config.PSD_CLIP_REL * max(norm, 1.0):
            raise ValidationError(f"D must be PSD, smallest eigenvalue {eigvals.min():.3e}")
        eigvals = np.where(eigvals < config.PSD_CLIP_REL * norm, 0.0, eigvals)
        self.D = _frozen(D)
        self.Dhalf = _frozen((eigvecs * np.sqrt(eigvals)) @ eigvecs.T)

    @property
    def size(self) -> int:
        return self.D.shape[0]

    @classmethod
    def identity(cls, N: int, d: int, m: int) -> "CostSpec":
        return cls(np.eye(N * (d + m)))

    @classmethod
    def from_weights(cls, N: int, state_weight: MatrixLike, input_weight: MatrixLike) -> "CostSpec":
        """Per-step weights को block-diagonal D में assemble करता है"""
        Qx = np.atleast_2d(np.asarray(state_weight, dtype=float))
        R = np.atleast_2d(np.asarray(input_weight, dtype=float))
        return cls(sla.block_diag(np.kron(np.eye(N), Qx), np.kron(np.eye(N), R)))

    def check_against(self, stacked: StackedSystem):
        if self.size != stacked.phi_rows:
            raise ValidationError(f"D has size {self.size}, expected N(d+m) = {stacked.phi_rows}")


class ClosedLoopMap:
    """SLS response Phi = [Phi_x; Phi_u] with causal sparsity"""

    def __init__(self, phi_x: MatrixLike, phi_u: MatrixLike, d: int, m: int, p: int):
        phi_x = np.atleast_2d(np.asarray(phi_x, dtype=float))
        phi_u = np.atleast_2d(np.asarray(phi_u, dtype=float))
        if phi_x.shape[0] % d:
            raise ValidationError(f"Phi_x has {phi_x.shape[0]} rows, not a multiple of d={d}")
        self.d, self.m, self.p = d, m, p
        self.N = phi_x.shape[0] // d
        self.s = d + (self.N - 1) * p
        self.phi_x = _enforce_pattern("Phi_x", phi_x, causal_mask(self.N, d, d, p))
        self.phi_u = _enforce_pattern("Phi_u", phi_u, causal_mask(self.N, m, d, p))

    @property
    def phi(self) -> np.ndarray:
        return np.vstack([self.phi_x, self.phi_u])

    @classmethod
    def from_stacked(cls, phi: np.ndarray, stacked: StackedSystem) -> "ClosedLoopMap":
        split = stacked.N * stacked.d
        return cls(phi[:split], phi[split:], stacked.d, stacked.m, stacked.p)


class ControllerRealization:
    """Causal state feedback u = K x"""

    def __init__(self, K: MatrixLike, N: int, d: int, m: int,
                 condition_number: Optional[float] = None):
        self.N, self.d, self.m = N, d, m
        self.K = _enforce_pattern("K", np.atleast_2d(np.asarray(K, dtype=float)), causal_mask(N, m, d, d))
        self.condition_number = condition_number
        self.ill_conditioned = bool(condition_number is not None and condition_number > config.CONDITION_WARN)


class SampleSet:
    """n noise trajectories, one per row: x_0 block then w_0 ... w_{N-2}"""

    def __init__(self, trajectories: MatrixLike):
        trajectories = np.atleast_2d(np.asarray(trajectories, dtype=float))
        if trajectories.shape[0] < 1:
            raise ValidationError("a sample set needs at least one trajectory")
        if not np.all(np.isfinite(trajectories)):
            raise ValidationError("sample trajectories contain non-finite values")
        self.trajectories = _frozen(trajectories)

    @property
    def n(self) -> int:
        return self.trajectories.shape[0]

    @property
    def s(self) -> int:
        return self.trajectories.shape[1]

    def check_against(self, stacked: StackedSystem):
        if self.s != stacked.s:
            raise ValidationError(f"samples have {self.s} columns, expected s = {stacked.s}")

    def mean(self) -> np.ndarray:
        return self.trajectories.mean(axis=0)

    def covariance(self) -> np.ndarray:
        """Empirical (1/n) covariance"""
        centred = self.trajectories - self.mean()
        return centred.T @ centred / self.n

    def second_moment(self) -> np.ndarray:
        return self.trajectories.T @ self.trajectories / self.n

    def with_fixed_initial_state(self, x0: MatrixLike) -> "SampleSet":
        """Known initial state: x_0 block को हर trajectory में replace करता है

        Only the stored trajectories change; SynthesisRequest(x0=...) is what
        takes x_0 out of the ambiguity set.
        """
        x0 = np.ravel(np.asarray(x0, dtype=float))
        if x0.size >= self.s:
            raise ValidationError(f"x0 has length {x0.size}, trajectories only {self.s}")
        data = np.array(self.trajectories)
        data[:, :x0.size] = x0
        return SampleSet(data)

    def disturbances(self, d: int) -> "SampleSet":
        """w_0 ... w_{N-2} columns only"""
        if not 0 < d < self.s:
            raise ValidationError(f"cannot drop {d} leading columns of {self.s}")
        return SampleSet(self.trajectories[:, d:])


def condition_gaussian(mean: MatrixLike, cov: MatrixLike, x0: MatrixLike) -> Tuple[np.ndarray, np.ndarray]:
    """Moments of the trailing block of a Gaussian given its leading block equals x0"""
    x0 = np.ravel(np.asarray(x0, dtype=float))
    mean = np.ravel(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    d = x0.size
    if not 0 < d < mean.size:
        raise ValidationError(f"x0 has length {d}, the vector has {mean.size} entries")
    S_xx, S_wx = cov[:d, :d], cov[d:, :d]
    # least-squares gain: a deterministic x_0 block is allowed
    gain = sla.lstsq(S_xx, S_wx.T)[0].T
    mean_w = mean[d:] + gain @ (x0 - mean[:d])
    cov_w = cov[d:, d:] - gain @ S_wx.T
    return mean_w, 0.5 * (cov_w + cov_w.T)


class GaussianSampler:
    """Seeded N(mean, cov) draws of stacked disturbance vectors"""

    def __init__(self, mean: MatrixLike, cov: MatrixLike, seed: int = 0):
        self.mean = np.ravel(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        if cov.shape != (self.mean.size, self.mean.size):
            raise ValidationError(f"covariance shape {cov.shape} does not match mean length {self.mean.size}")
        scale = max(1.0, float(np.abs(cov).max()))
        if not np.allclose(cov, cov.T, atol=1e-12 * scale):
            raise ValidationError("invalid covariance: not symmetric")
        if np.linalg.eigvalsh(0.5 * (cov + cov.T)).min() < -1e-10 * scale:
            raise ValidationError("invalid covariance: not positive semidefinite")
        self.cov = 0.5 * (cov + cov.T)
        self.seed = seed
        self.rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))

    def draw(self, count: int) -> np.ndarray:
        return self.rng.multivariate_normal(self.mean, self.cov, size=count, method="eigh")

    def sample_set(self, n: int) -> SampleSet:
        return SampleSet(self.draw(n))


def achievability_residual(stacked: StackedSystem, closed_loop: ClosedLoopMap) -> float:
    """Frobenius norm of [I - Z A, -Z B][Phi_x; Phi_u] - E"""
    phi = closed_loop.phi
    if phi.shape != (stacked.phi_rows, stacked.s):
        raise ValidationError(f"map has shape {phi.shape}, expected {(stacked.phi_rows, stacked.s)}")
    return float(np.linalg.norm(stacked.achievability_operator @ phi - stacked.bigE, "fro"))


def closed_loop_from_controller(stacked: StackedSystem, controller: ControllerRealization) -> ClosedLoopMap:
    """Phi_x = (I - Z(A + B K))^-1 E, Phi_u = K Phi_x"""
    K = controller.K
    if K.shape != (stacked.N * stacked.m, stacked.N * stacked.d):
        raise ValidationError(f"K has shape {K.shape}, expected {(stacked.N * stacked.m, stacked.N * stacked.d)}")
    # unit lower triangular, always invertible
    resolvent = np.eye(stacked.N * stacked.d) - stacked.Z @ (stacked.bigA + stacked.bigB @ K)
    phi_x = sla.solve_triangular(resolvent, stacked.bigE, lower=True, unit_diagonal=True)
    return ClosedLoopMap(phi_x, K @ phi_x, stacked.d, stacked.m, stacked.p)


def recover_controller(closed_loop: ClosedLoopMap) -> ControllerRealization:
    """K = Phi_u Phi_x^-1 (only when Phi_x is square)"""
    phi_x, phi_u = closed_loop.phi_x, closed_loop.phi_u
    if phi_x.shape[0] != phi_x.shape[1]:
        raise UnsupportedRecoveryError(
            f"Phi_x is {phi_x.shape[0]}x{phi_x.shape[1]} (p={closed_loop.p} != d={closed_loop.d}); "
            "use the map itself for simulation")
    condition = float(np.linalg.cond(phi_x))
    if not np.isfinite(condition):
        raise UnsupportedRecoveryError("Phi_x is singular (some E_t is not invertible)")
    K = sla.solve(phi_x.T, phi_u.T).T
    controller = ControllerRealization(K, closed_loop.N, closed_loop.d, closed_loop.m, condition_number=condition)
    if controller.ill_conditioned:
        logger.warning(f"Phi_x condition number {condition:.3e} exceeds {config.CONDITION_WARN:.1e}")
    return controller


Policy = Union[ControllerRealization, ClosedLoopMap]


def unobservable_response(spec: SystemSpec, closed_loop: ClosedLoopMap) -> float:
    """Largest entry of Phi_u restricted to null(E_t) directions of w_t"""
    d, p = spec.d, spec.p
    worst = 0.0
    for t in range(spec.N - 1):
        null = sla.null_space(spec.E[t])
        if null.size:
            block = closed_loop.phi_u[:, d + t * p:d + (t + 1) * p] @ null
            worst = max(worst, float(np.abs(block).max()))
    return worst


def _simulate(spec: SystemSpec, policy: Policy, W: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Batch simulation; W has one disturbance vector per row"""
    N, d, m, p = spec.N, spec.d, spec.m, spec.p
    k = W.shape[0]
    X = np.zeros((k, N, d))
    U = np.zeros((k, N, m))
    X[:, 0, :] = W[:, :d]

    if isinstance(policy, ControllerRealization):
        for t in range(N):
            gains = policy.K[t * m:(t + 1) * m, :(t + 1) * d]
            U[:, t, :] = X[:, :t + 1, :].reshape(k, -1) @ gains.T
            if t < N - 1:
                w_t = W[:, d + t * p:d + (t + 1) * p]
                X[:, t + 1, :] = X[:, t, :] @ spec.A[t].T + U[:, t, :] @ spec.B[t].T + w_t @ spec.E[t].T
        return X, U

    # map-based policy: disturbance reconstructed from the observed states
    gap = unobservable_response(spec, policy)
    if gap > config.CAUSALITY_TOL * (1.0 + np.abs(policy.phi_u).max()):
        raise UnsupportedRecoveryError(
            f"Phi_u responds to disturbance directions in the null space of some E_t (size {gap:.3e}); "
            "states do not reveal them, so the map cannot be simulated")
    W_hat = np.zeros_like(W)
    W_hat[:, :d] = X[:, 0, :]
    for t in range(N):
        cols = d + t * p
        U[:, t, :] = W_hat[:, :cols] @ policy.phi_u[t * m:(t + 1) * m, :cols].T
        if t < N - 1:
            w_t = W[:, cols:cols + p]
            drift = X[:, t, :] @ spec.A[t].T + U[:, t, :] @ spec.B[t].T
            X[:, t + 1, :] = drift + w_t @ spec.E[t].T
            W_hat[:, cols:cols + p] = (X[:, t + 1, :] - drift) @ np.linalg.pinv(spec.E[t]).T
    return X, U


def _quadratic_costs(X: np.ndarray, U: np.ndarray, cost: CostSpec) -> np.ndarray:
    z = np.hstack([X.reshape(X.shape[0], -1), U.reshape(U.shape[0], -1)])
    return np.einsum("ki,ij,kj->k", z, cost.D, z)


def rollout(spec: SystemSpec, cost: CostSpec, policy: Policy, noise: MatrixLike) -> Dict[str, Any]:
    """एक disturbance vector के साथ closed loop simulate करता है"""
    noise = np.ravel(np.asarray(noise, dtype=float))
    if noise.size != spec.s:
        raise ValidationError(f"noise has length {noise.size}, expected s = {spec.s}")
    X, U = _simulate(spec, policy, noise[None, :])
    return {
        "states": X[0],
        "inputs": U[0],
        "cost": float(_quadratic_costs(X, U, cost)[0]),
    }


def monte_carlo_cost(spec: SystemSpec, cost: CostSpec, policy: Policy, sampler, count: int,
                     batch_size: int = 10_000) -> Dict[str, float]:
    """Realized cost का sample mean और standard error"""
    if count < 1:
        raise ValidationError("count must be >= 1")
    total = 0.0
    total_sq = 0.0
    remaining = int(count)
    while remaining > 0:
        size = min(batch_size, remaining)
        W = np.atleast_2d(sampler.draw(size))
        X, U = _simulate(spec, policy, W)
        costs = _quadratic_costs(X, U, cost)
        total += costs.sum()
        total_sq += np.square(costs).sum()
        remaining -= size

    mean = total / count
    if count > 1:
        variance = max(total_sq / count - mean ** 2, 0.0) * count / (count - 1)
        stderr = float(np.sqrt(variance / count))
    else:
        stderr = 0.0
    logger.info(f"Monte-Carlo cost over {count} rollouts: {mean:.6g} +/- {stderr:.2g}")
    return {"mean": float(mean), "stderr": stderr, "count": int(count)}
