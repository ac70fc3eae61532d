# conic.py - Conic Program Intermediate Representation Module
import json
import math
import logging
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from error_handler import ValidationError, ConicTranslationError

logger = logging.getLogger(__name__)

CONES = ("zero", "nonneg", "psd", "exp")
SQRT2 = math.sqrt(2.0)
SYMMETRY_TOL = 1e-12

Operand = Union["AffineExpr", np.ndarray, float, int]


def _widen(matrix: sp.spmatrix, ncols: int) -> sp.csr_matrix:
    """Pad a coefficient matrix with zero columns for variables added later"""
    matrix = sp.csr_matrix(matrix)
    if matrix.shape[1] == ncols:
        return matrix
    return sp.csr_matrix((matrix.data, matrix.indices, matrix.indptr), shape=(matrix.shape[0], ncols))


def _scatter(index: np.ndarray, total: int) -> sp.csr_matrix:
    """0/1 matrix sending entry k to position index[k]"""
    k = len(index)
    return sp.csr_matrix((np.ones(k), (index, np.arange(k))), shape=(total, k))


class AffineExpr:
    """
    Matrix-valued affine function of the program's flat variable vector.

    Entries are stored column-major: vec(expr) = coeffs @ x + const.
    """
    __array_ufunc__ = None  # numpy defers `array @ expr` to __rmatmul__

    def __init__(self, coeffs, const, shape: Tuple[int, int]):
        self.shape = (int(shape[0]), int(shape[1]))
        self.coeffs = sp.csr_matrix(coeffs)
        self.const = np.ravel(np.asarray(const, dtype=float))
        if self.coeffs.shape[0] != self.size or self.const.size != self.size:
            raise ValidationError(f"expression data does not match shape {self.shape}")

    @property
    def size(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def num_vars(self) -> int:
        return self.coeffs.shape[1]

    @property
    def is_scalar(self) -> bool:
        return self.shape == (1, 1)

    @classmethod
    def constant(cls, value, shape: Optional[Tuple[int, int]] = None) -> "AffineExpr":
        array = np.asarray(value, dtype=float)
        if shape is not None:
            array = np.broadcast_to(array, shape)
        elif array.ndim == 0:
            array = array.reshape(1, 1)
        elif array.ndim == 1:
            array = array.reshape(-1, 1)
        return cls(sp.csr_matrix((array.size, 0)), array.ravel(order="F"), array.shape)

    @staticmethod
    def lift(value: Operand, shape: Optional[Tuple[int, int]] = None) -> "AffineExpr":
        if isinstance(value, AffineExpr):
            return value
        return AffineExpr.constant(value, shape)

    # algebra

    def _combine(self, other: Operand, sign: float) -> "AffineExpr":
        other = AffineExpr.lift(other, self.shape if np.ndim(other) == 0 else None)
        if self.is_scalar and not other.is_scalar:
            return other._combine(self, sign)._scaled_if(sign)
        if other.is_scalar and not self.is_scalar:
            other = other.repeat(self.shape)
        if other.shape != self.shape:
            raise ValidationError(f"shape mismatch {self.shape} vs {other.shape}")
        ncols = max(self.num_vars, other.num_vars)
        return AffineExpr(_widen(self.coeffs, ncols) + sign * _widen(other.coeffs, ncols),
                          self.const + sign * other.const, self.shape)

    def _scaled_if(self, sign: float) -> "AffineExpr":
        # other._combine(self, -1) computes other - self; flip back for self - other
        return self if sign > 0 else -self

    def __add__(self, other: Operand) -> "AffineExpr":
        return self._combine(other, 1.0)

    def __radd__(self, other: Operand) -> "AffineExpr":
        return self._combine(other, 1.0)

    def __sub__(self, other: Operand) -> "AffineExpr":
        return self._combine(other, -1.0)

    def __rsub__(self, other: Operand) -> "AffineExpr":
        return (-self)._combine(other, 1.0)

    def __neg__(self) -> "AffineExpr":
        return AffineExpr(-self.coeffs, -self.const, self.shape)

    def __mul__(self, scalar) -> "AffineExpr":
        if isinstance(scalar, AffineExpr) or np.ndim(scalar) != 0:
            raise TypeError("AffineExpr can only be multiplied by a scalar; use @ or times()")
        scalar = float(scalar)
        return AffineExpr(scalar * self.coeffs, scalar * self.const, self.shape)

    __rmul__ = __mul__

    def __truediv__(self, scalar) -> "AffineExpr":
        return self * (1.0 / float(scalar))

    def lmul(self, L) -> "AffineExpr":
        """L @ self, vec(LX) = (I kron L) vec(X)"""
        L = np.atleast_2d(np.asarray(L, dtype=float))
        if L.shape[1] != self.shape[0]:
            raise ValidationError(f"cannot multiply {L.shape} by {self.shape}")
        op = sp.kron(sp.eye(self.shape[1]), sp.csr_matrix(L), format="csr")
        return AffineExpr(op @ self.coeffs, op @ self.const, (L.shape[0], self.shape[1]))

    def rmul(self, R) -> "AffineExpr":
        """self @ R, vec(XR) = (R^T kron I) vec(X)"""
        R = np.atleast_2d(np.asarray(R, dtype=float))
        if R.shape[0] != self.shape[1]:
            raise ValidationError(f"cannot multiply {self.shape} by {R.shape}")
        op = sp.kron(sp.csr_matrix(R.T), sp.eye(self.shape[0]), format="csr")
        return AffineExpr(op @ self.coeffs, op @ self.const, (self.shape[0], R.shape[1]))

    def __matmul__(self, R) -> "AffineExpr":
        if isinstance(R, AffineExpr):
            raise TypeError("product of two expressions is not affine")
        return self.rmul(R)

    def __rmatmul__(self, L) -> "AffineExpr":
        return self.lmul(L)

    def times(self, matrix) -> "AffineExpr":
        """Scalar expression times a constant matrix"""
        if not self.is_scalar:
            raise ValidationError(f"times() needs a scalar expression, got {self.shape}")
        matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        column = sp.csr_matrix(matrix.ravel(order="F").reshape(-1, 1))
        return AffineExpr(column @ self.coeffs, matrix.ravel(order="F") * self.const[0], matrix.shape)

    # structure

    def _take(self, index: np.ndarray, shape: Tuple[int, int]) -> "AffineExpr":
        index = np.asarray(index, dtype=int)
        return AffineExpr(self.coeffs[index], self.const[index], shape)

    def __getitem__(self, key) -> "AffineExpr":
        if not isinstance(key, tuple):
            key = (key, slice(None))
        rows = np.atleast_1d(np.arange(self.shape[0])[key[0]])
        cols = np.atleast_1d(np.arange(self.shape[1])[key[1]])
        index = (cols[None, :] * self.shape[0] + rows[:, None]).ravel(order="F")
        return self._take(index, (rows.size, cols.size))

    @property
    def T(self) -> "AffineExpr":
        r, c = self.shape
        index = (np.arange(c)[:, None] * r + np.arange(r)[None, :]).ravel(order="F")
        return self._take(index, (c, r))

    def vec(self) -> "AffineExpr":
        return AffineExpr(self.coeffs, self.const, (self.size, 1))

    def row(self) -> "AffineExpr":
        return AffineExpr(self.coeffs, self.const, (1, self.size))

    def repeat(self, shape: Tuple[int, int]) -> "AffineExpr":
        if not self.is_scalar:
            raise ValidationError("only scalar expressions broadcast")
        return self._take(np.zeros(shape[0] * shape[1], dtype=int), shape)

    def sum(self) -> "AffineExpr":
        ones = sp.csr_matrix(np.ones((1, self.size)))
        return AffineExpr(ones @ self.coeffs, [self.const.sum()], (1, 1))

    def diag(self) -> "AffineExpr":
        k = min(self.shape)
        return self._take(np.arange(k) * (self.shape[0] + 1), (k, 1))

    def trace(self) -> "AffineExpr":
        return self.diag().sum()

    def value(self, x: np.ndarray) -> np.ndarray:
        x = np.ravel(x)
        flat = _widen(self.coeffs, x.size) @ x + self.const
        return flat.reshape(self.shape, order="F")


def bmat(blocks: Sequence[Sequence[Optional[Operand]]]) -> AffineExpr:
    """Block matrix of expressions/constants; None is a zero block"""
    heights = [None] * len(blocks)
    widths = [None] * len(blocks[0])
    for i, block_row in enumerate(blocks):
        for j, block in enumerate(block_row):
            if block is None:
                continue
            shape = AffineExpr.lift(block).shape
            heights[i] = heights[i] or shape[0]
            widths[j] = widths[j] or shape[1]
            if (heights[i], widths[j]) != shape:
                raise ValidationError(f"block ({i}, {j}) has shape {shape}, expected {(heights[i], widths[j])}")
    if None in heights or None in widths:
        raise ValidationError("every block row and column needs at least one non-empty block")

    R, C = sum(heights), sum(widths)
    row_offsets = np.concatenate([[0], np.cumsum(heights)])
    col_offsets = np.concatenate([[0], np.cumsum(widths)])
    parts = []
    for i, block_row in enumerate(blocks):
        for j, block in enumerate(block_row):
            if block is None:
                continue
            block = AffineExpr.lift(block)
            rows = row_offsets[i] + np.arange(heights[i])
            cols = col_offsets[j] + np.arange(widths[j])
            index = (cols[None, :] * R + rows[:, None]).ravel(order="F")
            parts.append((_scatter(index, R * C), block))

    ncols = max(block.num_vars for _, block in parts)
    coeffs = sp.csr_matrix((R * C, ncols))
    const = np.zeros(R * C)
    for scatter, block in parts:
        coeffs = coeffs + scatter @ _widen(block.coeffs, ncols)
        const = const + scatter @ block.const
    return AffineExpr(coeffs, const, (R, C))


def hstack(items: Sequence[Operand]) -> AffineExpr:
    return bmat([list(items)])


def vstack(items: Sequence[Operand]) -> AffineExpr:
    return bmat([[item] for item in items])


def diag_matrix(vector: AffineExpr) -> AffineExpr:
    """k-vector expression on the diagonal of a k x k expression"""
    k = vector.size
    scatter = _scatter(np.arange(k) * (k + 1), k * k)
    return AffineExpr(scatter @ vector.coeffs, scatter @ vector.const, (k, k))


class Variable:
    """Block of the flat variable vector; symmetric blocks live in scaled svec form"""

    def __init__(self, name: str, shape: Tuple[int, int], kind: str, offset: int):
        if kind not in ("dense", "symmetric", "lower"):
            raise ValidationError(f"unknown variable kind '{kind}'")
        if kind != "dense" and shape[0] != shape[1]:
            raise ValidationError(f"{kind} variable '{name}' must be square")
        self.name = name
        self.shape = (int(shape[0]), int(shape[1]))
        self.kind = kind
        self.offset = offset
        k = self.shape[0]
        self.size = self.shape[0] * self.shape[1] if kind == "dense" else k * (k + 1) // 2

    def _entries(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(position in vec(matrix), position in the flat block, coefficient)"""
        r, c = self.shape
        if self.kind == "dense":
            k = np.arange(self.size)
            return k, k, np.ones(self.size)
        positions, slots, values = [], [], []
        slot = 0
        for j in range(c):
            for i in range(j, r):
                if i == j:
                    positions.append(j * r + i)
                    slots.append(slot)
                    values.append(1.0)
                elif self.kind == "symmetric":
                    positions += [j * r + i, i * r + j]
                    slots += [slot, slot]
                    values += [1.0 / SQRT2, 1.0 / SQRT2]
                else:
                    positions.append(j * r + i)
                    slots.append(slot)
                    values.append(1.0)
                slot += 1
        return np.array(positions), np.array(slots), np.array(values)

    def expression(self, num_vars: int) -> AffineExpr:
        positions, slots, values = self._entries()
        rows = self.shape[0] * self.shape[1]
        coeffs = sp.csr_matrix((values, (positions, self.offset + slots)), shape=(rows, num_vars))
        return AffineExpr(coeffs, np.zeros(rows), self.shape)

    def unpack(self, x: np.ndarray) -> np.ndarray:
        return self.expression(self.offset + self.size).value(x[:self.offset + self.size])

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "shape": list(self.shape), "kind": self.kind,
                "offset": self.offset, "size": self.size}


class Constraint:
    def __init__(self, cone: str, expr: AffineExpr, label: str):
        self.cone = cone
        self.expr = expr
        self.label = label

    @property
    def rows(self) -> int:
        if self.cone == "psd":
            k = self.expr.shape[0]
            return k * (k + 1) // 2
        return self.expr.size


class ConicProgram:
    """
    Linear objective over zero, nonnegative, PSD and exponential cones.

    exp rows are (3, k) expressions; column j is (x, y, z) with y exp(x / y) <= z.
    psd rows hold the full k x k expression. Immutable after freeze().
    """

    def __init__(self, name: str = "program"):
        self.name = name
        self.variables: Dict[str, Variable] = {}
        self.num_vars = 0
        self.constraints: List[Constraint] = []
        self.objective: Optional[AffineExpr] = None
        self.sense = "minimize"
        self.metadata: Dict[str, Any] = {}
        self.frozen = False

    def _check_open(self):
        if self.frozen:
            raise ValidationError(f"program '{self.name}' is frozen")

    def add_variable(self, name: str, shape: Union[int, Tuple[int, int]] = 1,
                     kind: str = "dense") -> AffineExpr:
        self._check_open()
        if name in self.variables:
            raise ValidationError(f"variable '{name}' already exists")
        if isinstance(shape, int):
            shape = (shape, 1)
        variable = Variable(name, shape, kind, self.num_vars)
        self.variables[name] = variable
        self.num_vars += variable.size
        return variable.expression(self.num_vars)

    def var(self, name: str) -> AffineExpr:
        return self.variables[name].expression(self.num_vars)

    def add_constraint(self, cone: str, expr: Operand, label: str):
        self._check_open()
        if cone not in CONES:
            raise ValidationError(f"unknown cone '{cone}'")
        if any(c.label == label for c in self.constraints):
            raise ValidationError(f"duplicate constraint label '{label}'")
        self.constraints.append(Constraint(cone, AffineExpr.lift(expr), label))

    def equal(self, lhs: Operand, rhs: Operand, label: str):
        self.add_constraint("zero", AffineExpr.lift(lhs) - rhs, label)

    def nonneg(self, expr: Operand, label: str):
        self.add_constraint("nonneg", expr, label)

    def leq(self, lhs: Operand, rhs: Operand, label: str):
        """lhs <= rhs entrywise"""
        self.add_constraint("nonneg", AffineExpr.lift(rhs) - lhs, label)

    def psd(self, expr: AffineExpr, label: str):
        self.add_constraint("psd", expr, label)

    def exp_cone(self, x: Operand, y: Operand, z: Operand, label: str):
        """y_j exp(x_j / y_j) <= z_j for every j; scalars broadcast"""
        parts = [AffineExpr.lift(part) for part in (x, y, z)]
        k = max(part.size for part in parts)
        rows = [part.repeat((1, k)) if part.size == 1 and k > 1 else part.row() for part in parts]
        self.add_constraint("exp", vstack(rows), label)

    def minimize(self, expr: Operand):
        self._check_open()
        self.objective = AffineExpr.lift(expr)
        self.sense = "minimize"

    def maximize(self, expr: Operand):
        self._check_open()
        self.objective = -AffineExpr.lift(expr)
        self.sense = "maximize"

    def freeze(self) -> "ConicProgram":
        self.frozen = True
        return self

    @property
    def has_exp(self) -> bool:
        return any(c.cone == "exp" for c in self.constraints)

    def cone_counts(self) -> Dict[str, int]:
        counts = {cone: 0 for cone in CONES}
        for c in self.constraints:
            counts[c.cone] += c.rows
        return counts

    def objective_value(self, x: np.ndarray) -> float:
        if self.objective is None:
            return 0.0
        value = float(self.objective.value(x)[0, 0])
        return -value if self.sense == "maximize" else value

    def unpack(self, x: np.ndarray) -> Dict[str, np.ndarray]:
        x = np.ravel(x)
        return {name: variable.unpack(x) for name, variable in self.variables.items()}

    def to_dict(self) -> Dict[str, Any]:
        """Documented dump layout: variables, objective and per-constraint COO triplets"""
        def triplets(expr: AffineExpr) -> Dict[str, Any]:
            coo = _widen(expr.coeffs, self.num_vars).tocoo()
            return {"shape": list(expr.shape), "rows": coo.row.tolist(), "cols": coo.col.tolist(),
                    "vals": coo.data.tolist(), "const": expr.const.tolist()}

        return {
            "name": self.name,
            "sense": self.sense,
            "num_vars": self.num_vars,
            "variables": [v.to_dict() for v in self.variables.values()],
            "objective": triplets(self.objective) if self.objective is not None else None,
            "constraints": [{"label": c.label, "cone": c.cone, **triplets(c.expr)} for c in self.constraints],
            "metadata": self.metadata,
        }

    def to_json(self, path: str):
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(self.to_dict(), handle, indent=1)
        logger.info(f"IR dump of '{self.name}' written to {path}")


def validate(program: ConicProgram) -> Dict[str, Any]:
    """Dimension, symmetry and cone checks; lists unreferenced variables"""
    errors: List[str] = []
    warnings: List[str] = []
    referenced = np.zeros(program.num_vars, dtype=bool)

    def mark(expr: AffineExpr):
        cols = _widen(expr.coeffs, program.num_vars).tocoo().col
        referenced[cols] = True

    if program.objective is None:
        warnings.append("empty objective")
    else:
        if not program.objective.is_scalar:
            errors.append(f"objective has shape {program.objective.shape}")
        mark(program.objective)

    for c in program.constraints:
        expr = c.expr
        if expr.num_vars > program.num_vars:
            errors.append(f"{c.label}: references unknown variables")
            continue
        if not c.label:
            errors.append("constraint without a label")
        if c.cone == "psd":
            if expr.shape[0] != expr.shape[1]:
                errors.append(f"{c.label}: PSD block is {expr.shape}, not square")
            else:
                gap = _widen(expr.coeffs, program.num_vars) - _widen(expr.T.coeffs, program.num_vars)
                const_gap = np.abs(expr.const - expr.T.const).max() if expr.size else 0.0
                if (abs(gap).max() if gap.nnz else 0.0) > SYMMETRY_TOL or const_gap > SYMMETRY_TOL:
                    errors.append(f"{c.label}: PSD block is not symmetric")
        if c.cone == "exp" and expr.shape[0] != 3:
            errors.append(f"{c.label}: exponential cone rows must have 3 rows, got {expr.shape[0]}")
        mark(expr)

    unreferenced = [name for name, v in program.variables.items()
                    if not referenced[v.offset:v.offset + v.size].any()]
    if unreferenced:
        warnings.append(f"unreferenced variables: {', '.join(unreferenced)}")
    return {
        "valid": not errors,
        "errors": errors,
        "warnings": warnings,
        "unreferenced": unreferenced,
        "num_vars": program.num_vars,
        "rows": program.cone_counts(),
    }


def _exp_violation(block: np.ndarray) -> float:
    x, y, z = block
    worst = 0.0
    for xi, yi, zi in zip(x, y, z):
        if yi > 0 and zi > 0:
            worst = max(worst, xi - yi * math.log(zi / yi))
        elif yi > 0:
            worst = max(worst, -zi + yi)
        else:
            # closure of the cone at y = 0: x <= 0, z >= 0
            worst = max(worst, -yi, xi, -zi)
    return max(worst, 0.0)


def constraint_violation(program: ConicProgram, x: np.ndarray) -> Dict[str, float]:
    """Worst violation of every labelled constraint at the point x"""
    violations = {}
    for c in program.constraints:
        value = c.expr.value(x)
        if c.cone == "zero":
            violations[c.label] = float(np.abs(value).max())
        elif c.cone == "nonneg":
            violations[c.label] = float(max(-value.min(), 0.0))
        elif c.cone == "psd":
            sym = 0.5 * (value + value.T)
            violations[c.label] = float(max(-np.linalg.eigvalsh(sym).min(), 0.0))
        else:
            violations[c.label] = _exp_violation(value)
    return violations


def encode_logdet_hypograph(program: ConicProgram, M: AffineExpr, label: str = "logdet",
                            scale: Optional[AffineExpr] = None) -> AffineExpr:
    """
    Returns t with t <= log|M| (or t <= scale * log|M / scale| when scale is given).

    [[M, Z], [Z^T, diag(Z)]] >= 0 with Z lower triangular, plus one exp row
    u_i <= log Z_ii per diagonal entry; t = sum(u).
    """
    k = M.shape[0]
    if k < 1 or M.shape != (k, k):
        raise ValidationError(f"log-det block must be square, got {M.shape}")
    Z = program.add_variable(f"{label}.Z", (k, k), kind="lower")
    u = program.add_variable(f"{label}.u", (k, 1))
    program.psd(bmat([[M, Z], [Z.T, diag_matrix(Z.diag())]]), f"{label}.psd")
    y = 1.0 if scale is None else scale
    program.exp_cone(u, y, Z.diag(), f"{label}.exp")
    return u.sum()


class SolverReport:
    """Outcome of one backend solve"""

    STATUSES = ("optimal", "inaccurate", "infeasible", "unbounded", "failed")

    def __init__(self, backend: str, status: str, objective: float = math.nan,
                 primal_residual: float = math.nan, dual_residual: float = math.nan,
                 iterations: int = 0, solve_time: float = 0.0, message: str = ""):
        if status not in self.STATUSES:
            raise ValidationError(f"unknown solver status '{status}'")
        self.backend = backend
        self.status = status
        self.objective = objective
        self.primal_residual = primal_residual
        self.dual_residual = dual_residual
        self.iterations = iterations
        self.solve_time = solve_time
        self.message = message

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "inaccurate")

    def to_dict(self) -> Dict[str, Any]:
        return dict(vars(self))


def solve(program: ConicProgram, backend=None) -> Tuple[SolverReport, Dict[str, np.ndarray]]:
    """Validate, translate and solve; values are keyed by variable name"""
    from backends import ConicBackend, get_backend

    diagnostics = validate(program)
    if diagnostics["errors"]:
        first = diagnostics["errors"][0]
        raise ConicTranslationError(first.split(":")[0], first)
    for warning in diagnostics["warnings"]:
        logger.debug(f"{program.name}: {warning}")

    if not isinstance(backend, ConicBackend):
        backend = get_backend(backend)
    if program.has_exp and not backend.supports_exp:
        label = next(c.label for c in program.constraints if c.cone == "exp")
        raise ConicTranslationError(label, f"backend {backend.name} has no exponential cone (eps = 0 programs only)")

    program.freeze()
    x, report = backend.solve(program)
    values: Dict[str, np.ndarray] = {}
    if x is not None:
        violations = constraint_violation(program, x)
        report.primal_residual = max(violations.values(), default=0.0)
        report.objective = program.objective_value(x)
        values = program.unpack(x)
        values["__x__"] = np.asarray(x)
    logger.info(f"Solved '{program.name}' with {backend.name}: status={report.status}, "
                f"objective={report.objective:.10g}, time={report.solve_time:.2f}s")
    return report, values
