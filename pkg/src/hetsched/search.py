"""Bisection driver for quasi-convex objectives and the linear-fractional
reduction (Charnes-Cooper) used by ratio-maximizing policies."""

from __future__ import annotations

import numpy as np

from .lp import LinearProgram, Relation, SolveResult, Status, solve_lp

DEFAULT_REL_TOL = 1e-3
MAX_BISECT_ITERS = 64


class BracketError(ValueError):
    """The supplied bracket does not straddle the feasibility threshold."""


class RatioUnboundedError(ValueError):
    """The denominator can reach zero with positive numerator: the ratio has
    no finite maximum."""


def bisect(feasible, lo: float, hi: float, rel_tol: float = DEFAULT_REL_TOL,
           increasing: bool = True, max_iters: int = MAX_BISECT_ITERS):
    """Find the feasibility threshold of a monotone predicate.

    `feasible(v)` returns (bool, witness).  With `increasing=True` the
    predicate is infeasible below the answer and feasible above (the search
    returns the smallest feasible value); `increasing=False` mirrors that.
    Returns (value, witness) where witness comes from the last feasible probe.
    """
    if not lo < hi:
        raise BracketError(f"need lo < hi, got [{lo}, {hi}]")
    if not increasing:
        inner = lambda v: feasible(-v)
        value, witness = bisect(inner, -hi, -lo, rel_tol, True, max_iters)
        return -value, witness

    ok_lo, wit_lo = feasible(lo)
    if ok_lo:
        # Answer is at or below the lower bracket; lo is already a valid
        # lower bound, so it is the threshold.
        return lo, wit_lo
    ok_hi, witness = feasible(hi)
    if not ok_hi:
        raise BracketError(f"upper bracket {hi} is not feasible")

    for _ in range(max_iters):
        if hi - lo <= rel_tol * max(1.0, abs(hi)):
            break
        mid = 0.5 * (lo + hi)
        ok, wit = feasible(mid)
        if ok:
            hi, witness = mid, wit
        else:
            lo = mid
    return hi, witness


def maximize_ratio(num_coeffs, den_coeffs, constraints, num_vars: int,
                   num_const: float = 0.0, den_const: float = 0.0,
                   lower=None, upper=None) -> SolveResult:
    """Maximize (num'x + num_const) / (den'x + den_const) over a polytope.

    Uses the Charnes-Cooper substitution y = t*x, den'y + den_const*t = 1,
    t >= 0, which turns the linear-fractional program into a single LP.  The
    denominator must stay strictly positive on the feasible set; if it can
    vanish while the numerator stays positive the LP is unbounded and a
    RatioUnboundedError is raised.
    """
    num_coeffs = np.asarray(num_coeffs, dtype=float)
    den_coeffs = np.asarray(den_coeffs, dtype=float)
    lower = np.zeros(num_vars) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full(num_vars, np.inf) if upper is None else np.asarray(upper, dtype=float)

    # Variables: y_0..y_{n-1}, t.  All bound constraints on x become rows
    # against t so y can be left free.
    n = num_vars
    obj = np.concatenate([num_coeffs, [num_const]])
    cc = LinearProgram(n + 1, obj, maximize=True,
                       lower=np.concatenate([np.full(n, -np.inf), [0.0]]),
                       upper=np.full(n + 1, np.inf))
    for coeffs, rel, rhs in constraints:
        row = np.concatenate([np.asarray(coeffs, dtype=float), [-float(rhs)]])
        cc.add_constraint(row, rel, 0.0)
    for i in range(n):
        if np.isfinite(upper[i]):
            row = np.zeros(n + 1)
            row[i], row[n] = 1.0, -upper[i]
            cc.add_constraint(row, Relation.LE, 0.0)
        if np.isfinite(lower[i]):
            row = np.zeros(n + 1)
            row[i], row[n] = 1.0, -lower[i]
            cc.add_constraint(row, Relation.GE, 0.0)
    den_row = np.concatenate([den_coeffs, [den_const]])
    cc.add_constraint(den_row, Relation.EQ, 1.0)

    res = solve_lp(cc)
    if res.status is Status.UNBOUNDED:
        raise RatioUnboundedError("denominator can reach zero on the feasible set")
    if not res.optimal:
        # Distinguish an empty polytope from a denominator that cannot
        # reach the normalization plane (identically zero, say).
        probe = LinearProgram(n, np.zeros(n), maximize=True,
                              lower=lower, upper=upper)
        for coeffs, rel, rhs in constraints:
            probe.add_constraint(coeffs, rel, rhs)
        if solve_lp(probe).optimal:
            raise RatioUnboundedError(
                "denominator cannot be normalized on the feasible set")
        return SolveResult(res.status)
    t = res.x[n]
    if t <= 1e-9:
        raise RatioUnboundedError("ratio maximized only in the limit (t = 0)")
    x = res.x[:n] / t
    x = np.clip(x, lower, upper)
    value = (float(num_coeffs @ x) + num_const) / (float(den_coeffs @ x) + den_const)
    return SolveResult(Status.OPTIMAL, x, value)
