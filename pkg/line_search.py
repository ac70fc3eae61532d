# line_search.py - One-dimensional Convex Search Module
import math
import logging
from typing import Callable, Dict, Any, List, Tuple

logger = logging.getLogger(__name__)

INV_PHI = (math.sqrt(5) - 1) / 2  # 1 / phi
INV_PHI_SQUARE = (3 - math.sqrt(5)) / 2  # 1 / phi^2


class TracedFunction:
    """Wraps f and remembers every (x, f(x)) it was asked for"""

    def __init__(self, f: Callable[[float], float]):
        self.f = f
        self.trace: List[Tuple[float, float]] = []

    def __call__(self, x: float) -> float:
        value = self.f(x)
        self.trace.append((x, value))
        return value


def bracket_from_lower(f: Callable[[float], float], lower: float, offset: float,
                       cap: float) -> Dict[str, Any]:
    """
    Doubling bracket for a convex f on (lower, inf).

    Steps lower + offset * 2^k until f stops decreasing. Returns the interval
    [a, b] holding the minimizer, or decreasing=True when f is still
    decreasing at lower + cap.
    """
    step = offset
    x_prev = lower
    x_cur = lower + step
    f_cur = f(x_cur)
    while True:
        step *= 2.0
        x_next = lower + step
        if step > cap:
            return {"a": x_prev, "b": x_cur, "decreasing": True, "best": (x_cur, f_cur)}
        f_next = f(x_next)
        if not f_next < f_cur:
            return {"a": x_prev, "b": x_next, "decreasing": False, "best": (x_cur, f_cur)}
        x_prev = x_cur
        x_cur, f_cur = x_next, f_next


def bracket_around(f: Callable[[float], float], start: float, floor: float = 0.0,
                   cap: float = 1e12, growth: float = 2.0) -> Dict[str, Any]:
    """
    Bracket for a convex f on [floor, inf) that may be +inf near the floor.

    Doubles upward until f increases, otherwise halves the distance to the
    floor while f keeps decreasing. Infeasible points (f = inf) count as
    "not smaller".
    """
    x0 = start
    f0 = f(x0)
    while math.isinf(f0):
        x0 = floor + (x0 - floor) * growth
        if x0 - floor > cap:
            return {"a": floor, "b": x0, "feasible": False, "best": (x0, f0)}
        f0 = f(x0)

    x_up = floor + (x0 - floor) * growth
    f_up = f(x_up)
    if f_up < f0:
        x_lo, x_mid, f_mid = x0, x_up, f_up
        while True:
            x_next = floor + (x_mid - floor) * growth
            if x_next - floor > cap:
                return {"a": x_lo, "b": x_next, "feasible": True, "decreasing": True, "best": (x_mid, f_mid)}
            f_next = f(x_next)
            if not f_next < f_mid:
                return {"a": x_lo, "b": x_next, "feasible": True, "decreasing": False, "best": (x_mid, f_mid)}
            x_lo, x_mid, f_mid = x_mid, x_next, f_next

    x_hi, x_mid, f_mid = x_up, x0, f0
    while True:
        x_down = floor + (x_mid - floor) / growth
        if x_down - floor <= 1e-12 * (1.0 + abs(floor)):
            return {"a": floor, "b": x_hi, "feasible": True, "decreasing": False, "best": (x_mid, f_mid)}
        f_down = f(x_down)
        if not f_down < f_mid:
            return {"a": x_down, "b": x_hi, "feasible": True, "decreasing": False, "best": (x_mid, f_mid)}
        x_hi, x_mid, f_mid = x_mid, x_down, f_down


def golden_section(f: Callable[[float], float], a: float, b: float, rel_tol: float = 1e-9,
                   abs_tol: float = 1e-14) -> Tuple[float, float]:
    """
    Golden-section search.

    Given a convex f on [a, b] returns (x, f(x)) with the minimizer located
    to within rel_tol * |x| + abs_tol. Ties go to the smaller x; f may be
    +inf on part of the interval.
    """
    a, b = min(a, b), max(a, b)
    h = b - a
    c = a + INV_PHI_SQUARE * h
    d = a + INV_PHI * h
    yc = f(c)
    yd = f(d)

    while h > rel_tol * max(abs(c), abs(d)) + abs_tol:
        if yc <= yd and not math.isinf(yc):
            b = d
            d, yd = c, yc
            h = INV_PHI * h
            c = a + INV_PHI_SQUARE * h
            yc = f(c)
        else:
            a = c
            c, yc = d, yd
            h = INV_PHI * h
            d = a + INV_PHI * h
            yd = f(d)

    if yc <= yd:
        return c, yc
    return d, yd
