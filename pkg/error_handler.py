# error_handler.py - Error Handling Module
import logging
import traceback
from typing import Optional

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_INFEASIBLE = 2
EXIT_SOLVER_FAILURE = 3
EXIT_CONFIG_ERROR = 4


class DRCError(Exception):
    """Base class for all errors raised by the toolkit"""
    exit_code = EXIT_UNEXPECTED


class ValidationError(DRCError, ValueError):
    """Dimension, symmetry or definiteness check failed"""
    exit_code = EXIT_CONFIG_ERROR


class ConfigError(DRCError):
    exit_code = EXIT_CONFIG_ERROR


class CausalityError(DRCError):
    exit_code = EXIT_CONFIG_ERROR


class AbsoluteContinuityError(DRCError):
    exit_code = EXIT_CONFIG_ERROR


class UnsupportedRecoveryError(DRCError):
    """K = Phi_u Phi_x^-1 needs a square Phi_x (p == d)"""


class InfeasibleRadiusError(DRCError):
    exit_code = EXIT_INFEASIBLE

    def __init__(self, rho: float, rho_min: float, eps: Optional[float] = None):
        self.rho = rho
        self.rho_min = rho_min
        self.eps = eps
        where = f" at eps={eps:g}" if eps is not None else ""
        super().__init__(f"radius rho={rho:.6g} is below rho_min={rho_min:.12g}{where}")


class DivergentIntegralError(DRCError):
    """M = lambda (I + eps/2 Sigma^-1) - Q is not positive definite"""
    exit_code = EXIT_SOLVER_FAILURE


class UnboundedDualError(DRCError):
    exit_code = EXIT_SOLVER_FAILURE


class SinkhornConvergenceError(DRCError):
    exit_code = EXIT_SOLVER_FAILURE

    def __init__(self, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"Sinkhorn scaling stopped at marginal residual {residual:.3e} "
                         f"after {iterations} iterations")


class GridResolutionError(DRCError):
    exit_code = EXIT_SOLVER_FAILURE

    def __init__(self, gap: float, tolerance: float):
        self.gap = gap
        self.tolerance = tolerance
        super().__init__(f"primal grid oracle gap {gap:.3e} exceeds tolerance {tolerance:.1e}; refine the grid")


class ConicTranslationError(DRCError):
    exit_code = EXIT_SOLVER_FAILURE

    def __init__(self, label: str, reason: str):
        self.label = label
        super().__init__(f"constraint '{label}': {reason}")


class SolverFailureError(DRCError):
    exit_code = EXIT_SOLVER_FAILURE

    def __init__(self, message: str, report=None):
        self.report = report
        if report is not None:
            message = f"{message} (backend={report.backend}, status={report.status})"
        super().__init__(message)


def handle_cli_error(error: BaseException) -> int:
    """CLI का global error handler: log करता है और exit code return करता है"""
    tb_string = ''.join(traceback.format_exception(type(error), error, error.__traceback__))
    logger.debug(f"Traceback (last 1000 chars):\n{tb_string[-1000:]}")

    if isinstance(error, InfeasibleRadiusError):
        logger.error(f"Infeasible: {error}")
        print(f"infeasible: rho_min={error.rho_min:.12g}")
        return error.exit_code

    if isinstance(error, DRCError):
        logger.error(f"{type(error).__name__}: {error}")
        print(f"error: {error}")
        return error.exit_code

    if isinstance(error, (OSError, ValueError, KeyError)):
        logger.error(f"Configuration or I/O error: {error}")
        print(f"error: {error}")
        return EXIT_CONFIG_ERROR

    logger.error(msg="Unexpected exception:", exc_info=error)
    print(f"Fatal error: {error}")
    return EXIT_UNEXPECTED
