"""Branch-and-bound solver for LPs with binary variables.

Best-first search on the LP relaxation bound, branching on the most
fractional binary.  Ties between equally good incumbents are broken toward
the lexicographically smallest binary vector, which keeps results
reproducible across runs.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .lp import LinearProgram, SolveResult, Status, solve_lp

INT_TOL = 1e-6


@dataclass
class MixedIntegerProgram:
    base: LinearProgram
    binary_vars: set = field(default_factory=set)

    def __post_init__(self):
        self.binary_vars = set(int(v) for v in self.binary_vars)
        for v in self.binary_vars:
            if not (0 <= v < self.base.num_vars):
                raise ValueError(f"binary var {v} out of range")
            # Binary variables live in [0,1]; tighten whatever was given.
            self.base.lower[v] = max(self.base.lower[v], 0.0)
            self.base.upper[v] = min(self.base.upper[v], 1.0)


def solve_milp(mip: MixedIntegerProgram, node_limit: int = 200_000,
               lex_tie_break: bool = True) -> SolveResult:
    """Globally optimal solve over the binary assignments.

    With `lex_tie_break` the returned binary vector is the lexicographically
    smallest one attaining the optimum, found by re-solving with a prefix of
    binaries pinned to zero wherever that preserves the objective.
    """
    result = _branch_and_bound(mip, node_limit)
    if not (lex_tie_break and result.optimal):
        return result
    return _lex_refine(mip, result, node_limit)


def _lex_refine(mip: MixedIntegerProgram, best: SolveResult,
                node_limit: int) -> SolveResult:
    lp = mip.base
    binaries = sorted(mip.binary_vars)
    target = best.objective_value
    sense = 1.0 if lp.maximize else -1.0
    fixed: dict[int, float] = {}
    current = best
    for v in binaries:
        if int(round(current.x[v])) == 0 and all(
                int(round(current.x[u])) == fixed[u] for u in fixed):
            fixed[v] = 0.0
            continue
        lo = lp.lower.copy()
        hi = lp.upper.copy()
        for u, val in fixed.items():
            lo[u] = hi[u] = val
        lo[v] = hi[v] = 0.0
        sub_lp = LinearProgram(lp.num_vars, lp.objective, lp.maximize,
                               list(lp.constraints), lo, hi)
        sub = _branch_and_bound(
            MixedIntegerProgram(sub_lp, mip.binary_vars - set(fixed) - {v}),
            node_limit)
        if sub.optimal and sense * (sub.objective_value - target) >= -1e-9:
            fixed[v] = 0.0
            current = sub
        else:
            fixed[v] = 1.0
    if any(int(round(current.x[u])) != fixed[u] for u in fixed):
        lo = lp.lower.copy()
        hi = lp.upper.copy()
        for u, val in fixed.items():
            lo[u] = hi[u] = val
        sub_lp = LinearProgram(lp.num_vars, lp.objective, lp.maximize,
                               list(lp.constraints), lo, hi)
        current = _branch_and_bound(
            MixedIntegerProgram(sub_lp, mip.binary_vars - set(fixed)), node_limit)
    return current


def _branch_and_bound(mip: MixedIntegerProgram, node_limit: int) -> SolveResult:
    lp = mip.base
    binaries = sorted(mip.binary_vars)
    if not binaries:
        return solve_lp(lp)

    sense = 1.0 if lp.maximize else -1.0

    def better(a: float, b: float) -> bool:
        return sense * (a - b) > 1e-9

    incumbent: SolveResult | None = None
    incumbent_key: tuple | None = None

    def binary_key(x: np.ndarray) -> tuple:
        return tuple(int(round(x[v])) for v in binaries)

    def relax(fixed: dict) -> SolveResult:
        lo = lp.lower.copy()
        hi = lp.upper.copy()
        for v, val in fixed.items():
            lo[v] = hi[v] = float(val)
        sub = LinearProgram(lp.num_vars, lp.objective, lp.maximize,
                            list(lp.constraints), lo, hi)
        return solve_lp(sub)

    root = relax({})
    if root.status is Status.UNBOUNDED:
        return SolveResult(Status.UNBOUNDED)
    heap = []
    counter = 0
    if root.optimal:
        heapq.heappush(heap, (-sense * root.objective_value, counter, {}, root))

    explored = 0
    while heap:
        _, _, fixed, res = heapq.heappop(heap)
        bound = res.objective_value
        explored += 1
        if explored > node_limit:
            break
        if incumbent is not None and not better(bound, incumbent.objective_value) \
                and abs(bound - incumbent.objective_value) > 1e-9:
            continue  # bound strictly worse than incumbent

        frac = {v: res.x[v] for v in binaries
                if min(res.x[v], 1.0 - res.x[v]) > INT_TOL}
        if not frac:
            # Validate the leaf with binaries pinned to their rounded values:
            # a variable sitting just inside the integrality tolerance can
            # make the rounded vector infeasible.
            pinned = {v: float(round(res.x[v])) for v in binaries}
            cand = relax(pinned)
            if cand.optimal:
                key = binary_key(cand.x)
                if incumbent is None or better(cand.objective_value,
                                               incumbent.objective_value) \
                        or (abs(cand.objective_value - incumbent.objective_value) <= 1e-9
                            and key < incumbent_key):
                    incumbent, incumbent_key = cand, key
                continue
            frac = {v: res.x[v] for v in binaries if v not in fixed
                    and min(res.x[v], 1.0 - res.x[v]) > 1e-12}
            if not frac:
                continue

        # Most fractional binary, lowest index on ties.
        branch_var = min(frac, key=lambda v: (abs(frac[v] - 0.5), v))
        for val in (0, 1):
            child_fixed = dict(fixed)
            child_fixed[branch_var] = val
            child = relax(child_fixed)
            if not child.optimal:
                continue
            if incumbent is not None \
                    and not better(child.objective_value, incumbent.objective_value) \
                    and abs(child.objective_value - incumbent.objective_value) > 1e-9:
                continue
            counter += 1
            heapq.heappush(heap, (-sense * child.objective_value, counter,
                                  child_fixed, child))

    if incumbent is None:
        return SolveResult(Status.INFEASIBLE)
    return incumbent
