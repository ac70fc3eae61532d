# backends.py - Conic Solver Backend Adapters
import math
import time
import logging
from abc import ABC, abstractmethod
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import cvxpy as cp

import config
from conic import ConicProgram, SolverReport, _widen
from error_handler import ConfigError, ConicTranslationError

logger = logging.getLogger(__name__)

STATUS_MAP = {
    cp.OPTIMAL: "optimal",
    cp.OPTIMAL_INACCURATE: "inaccurate",
    cp.INFEASIBLE: "infeasible",
    cp.INFEASIBLE_INACCURATE: "infeasible",
    cp.UNBOUNDED: "unbounded",
    cp.UNBOUNDED_INACCURATE: "unbounded",
}


class ConicBackend(ABC):
    """
    Adapter contract: translate a frozen ConicProgram, solve it, and hand back
    the flat variable vector plus a SolverReport.

    Backends without exponential-cone support set supports_exp = False and are
    only used for eps = 0 programs.
    """
    name: str = "abstract"
    supports_exp: bool = True

    @abstractmethod
    def solve(self, program: ConicProgram) -> Tuple[Optional[np.ndarray], SolverReport]:
        ...


def _solver_options(solver: str) -> Dict[str, Any]:
    tol = config.SOLVER_FEAS_TOL
    max_iter = config.SOLVER_MAX_ITER
    if solver == "CLARABEL":
        return {"tol_feas": tol, "tol_gap_abs": tol, "tol_gap_rel": tol, "max_iter": max_iter}
    if solver == "SCS":
        return {"eps_abs": tol, "eps_rel": tol, "max_iters": max(max_iter, 100_000)}
    if solver == "CVXOPT":
        return {"feastol": tol, "abstol": tol, "reltol": tol, "max_iters": max_iter}
    return {}


def _dual_residual(extra: Any) -> float:
    """Backend-specific dual residual, NaN when the backend does not expose one"""
    if extra is None:
        return math.nan
    if hasattr(extra, "r_dual"):
        return float(extra.r_dual)
    if isinstance(extra, dict):
        info = extra.get("info", extra)
        for key in ("res_dual", "dual infeasibility", "dres"):
            if key in info:
                return float(info[key])
    return math.nan


class CvxpyBackend(ConicBackend):
    """Any cvxpy-registered conic solver"""

    def __init__(self, solver: str, supports_exp: bool = True, **options):
        self.name = solver
        self.solver = solver
        self.supports_exp = supports_exp
        self.options = {**_solver_options(solver), **options}

    def translate(self, program: ConicProgram) -> Tuple[cp.Problem, cp.Variable]:
        x = cp.Variable(program.num_vars, name="x")
        constraints = []
        for c in program.constraints:
            try:
                A = _widen(c.expr.coeffs, program.num_vars)
                flat = A @ x + c.expr.const
                if c.cone == "zero":
                    constraints.append(flat == 0)
                elif c.cone == "nonneg":
                    constraints.append(flat >= 0)
                elif c.cone == "psd":
                    k = c.expr.shape[0]
                    # symmetric by construction; tie it to a PSD-typed matrix
                    S = cp.Variable((k, k), PSD=True)
                    constraints.append(cp.reshape(flat, (k, k), order="F") == S)
                else:
                    rows = cp.reshape(flat, c.expr.shape, order="F")
                    constraints.append(cp.constraints.ExpCone(rows[0, :], rows[1, :], rows[2, :]))
            except Exception as error:
                raise ConicTranslationError(c.label, str(error)) from error

        if program.objective is None:
            objective = cp.Minimize(0)
        else:
            c_row = _widen(program.objective.coeffs, program.num_vars).toarray().ravel()
            objective = cp.Minimize(c_row @ x + float(program.objective.const[0]))
        return cp.Problem(objective, constraints), x

    def solve(self, program: ConicProgram) -> Tuple[Optional[np.ndarray], SolverReport]:
        problem, x = self.translate(program)
        start = time.perf_counter()
        try:
            problem.solve(solver=self.solver, verbose=False, **self.options)
        except cp.error.SolverError as error:
            elapsed = time.perf_counter() - start
            logger.error(f"{self.name} failed on '{program.name}': {error}")
            return None, SolverReport(self.name, "failed", solve_time=elapsed, message=str(error))
        elapsed = time.perf_counter() - start

        status = STATUS_MAP.get(problem.status, "failed")
        stats = problem.solver_stats
        report = SolverReport(
            self.name, status,
            objective=float(problem.value) if status in ("optimal", "inaccurate") else math.nan,
            dual_residual=_dual_residual(getattr(stats, "extra_stats", None)),
            iterations=int(getattr(stats, "num_iters", 0) or 0),
            solve_time=float(getattr(stats, "solve_time", None) or elapsed),
            message=str(problem.status),
        )
        if status == "inaccurate":
            logger.warning(f"{self.name} returned an inaccurate solution for '{program.name}'")
        if x.value is None or status not in ("optimal", "inaccurate"):
            return None, report
        return np.asarray(x.value, dtype=float), report


BACKENDS = {
    "CLARABEL": lambda: CvxpyBackend("CLARABEL"),
    "SCS": lambda: CvxpyBackend("SCS"),
    "MOSEK": lambda: CvxpyBackend("MOSEK"),
    "CVXOPT": lambda: CvxpyBackend("CVXOPT", supports_exp=False),
}


def available_backends() -> List[str]:
    installed = set(cp.installed_solvers())
    return [name for name in BACKENDS if name in installed]


def get_backend(name: Optional[str] = None) -> ConicBackend:
    """Fresh backend instance; one per solve call chain"""
    name = (name or config.BACKEND).upper()
    if name not in BACKENDS:
        raise ConfigError(f"unknown backend '{name}', choose from {', '.join(BACKENDS)}")
    if name not in cp.installed_solvers():
        raise ConfigError(f"backend '{name}' is not installed (installed: {', '.join(cp.installed_solvers())})")
    return BACKENDS[name]()
