"""Hierarchical max-min fairness via water filling.

Each iteration splits every entity's weight across its still-active jobs
according to the entity's internal policy, raises all active jobs' scaled
normalized throughputs at rates proportional to those weights, then freezes
the jobs that have hit a bottleneck (detected with a mixed-integer program).
Frozen jobs keep their achieved throughput through carry-over constraints
while the remaining jobs keep rising, so the final allocation is Pareto
efficient at every level of the hierarchy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cluster import ClusterSpec
from .jobs import Entity, EntityPolicy, Job
from .lp import LinearProgram, Relation, solve_lp
from .matrices import AllocationMatrix, ThroughputMatrix, effective_throughput
from .milp import MixedIntegerProgram, solve_milp
from .policies import PolicyInfeasibleError, ProblemSpace

# Strictness slack for "can improve" as a fraction of each job's largest
# throughput (LPs cannot express strict inequalities).  The constraint
# geometry can attenuate a slack violation by two orders of magnitude before
# it reaches the solver's feasibility test, so this must sit well above the
# 1e-7 solver tolerance; 1e-4 means "improvable by at least 0.01% of the
# job's best rate", which is far below any scheduling-relevant difference.
DELTA_FRACTION = 1e-4


@dataclass
class WaterfillIteration:
    weights: dict
    level: float
    allocation: AllocationMatrix
    normalized: dict
    scaled: dict
    bottlenecks: set


@dataclass
class WaterfillResult:
    allocation: AllocationMatrix
    iterations: list = field(default_factory=list)

    @property
    def objective(self) -> float:
        # First-iteration water level: the max-min value of the most
        # constrained job group.
        return self.iterations[0].level if self.iterations else 0.0

    @property
    def normalized(self) -> dict:
        return self.iterations[-1].normalized if self.iterations else {}


def assign_job_weights(entities, jobs, done: set) -> dict:
    """Distribute each entity's weight over its active members.

    Fairness splits the weight equally; FIFO gives it all to the
    earliest-arrived active member.  Jobs already bottlenecked get weight 0.
    """
    by_entity: dict[int, list] = {}
    for j in jobs:
        by_entity.setdefault(j.entity_id, []).append(j)
    weights = {j.id: 0.0 for j in jobs}
    for ent in entities:
        members = [j for j in by_entity.get(ent.id, []) if j.id not in done]
        if not members:
            continue
        if ent.internal_policy is EntityPolicy.FAIRNESS:
            share = ent.weight / len(members)
            for j in members:
                weights[j.id] = share
        else:
            first = min(members, key=lambda j: (j.arrival_time, j.id))
            weights[first.id] = ent.weight
    return weights


def _scaled_coeff(space: ProblemSpace, job: Job) -> np.ndarray:
    return job.scale_factor / space.equal_norm[job.id] * space.coeffs[job.id]


def _level_lp(space: ProblemSpace, weights: dict, t_prev: dict,
              thr_prev: dict) -> tuple:
    """Max-min LP of one water-filling iteration: raise every weighted job's
    scaled normalized throughput above its previous level, without letting
    any job's raw throughput drop."""
    n = space.n_cells + 1
    lam = space.n_cells
    obj = np.zeros(n)
    obj[lam] = 1.0
    lower, upper = space.cell_bounds(extra=1)
    lower[lam] = -np.inf
    lp = LinearProgram(n, obj, maximize=True, lower=lower, upper=upper)
    for j in space.jobs:
        w = weights[j.id]
        if w > 0:
            row = space.pad(_scaled_coeff(space, j) / w, extra=1)
            row[lam] = -1.0
            lp.add_constraint(row, Relation.GE, t_prev[j.id] / w)
        if thr_prev[j.id] > 0:
            lp.add_constraint(space.pad(space.coeffs[j.id], extra=1),
                              Relation.GE, thr_prev[j.id])
    space.add_validity(lp, extra=1)
    res = solve_lp(lp)
    if not res.optimal:
        raise PolicyInfeasibleError(f"water-filling LP returned {res.status}")
    return res.objective_value, res.x


def _tighten_lp(space: ProblemSpace, weights: dict, t_prev: dict,
                thr_prev: dict, level: float) -> AllocationMatrix:
    """Re-solve at the found water level, minimizing total allocated time.

    The max-min LP can return a vertex that hands surplus throughput to
    non-bottlenecked jobs; the lean re-solve pins every weighted job at
    exactly the water level so bottleneck detection sees the true frontier.
    """
    obj = np.ones(space.n_cells)
    lower, upper = space.cell_bounds()
    lp = LinearProgram(space.n_cells, obj, maximize=False, lower=lower, upper=upper)
    for j in space.jobs:
        w = weights[j.id]
        if w > 0:
            lp.add_constraint(_scaled_coeff(space, j), Relation.GE,
                              t_prev[j.id] + w * level - 1e-9)
        if thr_prev[j.id] > 0:
            lp.add_constraint(space.coeffs[j.id], Relation.GE,
                              thr_prev[j.id] - 1e-9)
    space.add_validity(lp)
    res = solve_lp(lp)
    if not res.optimal:
        raise PolicyInfeasibleError(f"tightening LP returned {res.status}")
    return space.allocation(res.x)


def max_gain(space: ProblemSpace, thr_prev: dict, job_id: int) -> float:
    """Largest throughput increase available to one job while every job keeps
    at least its previous throughput."""
    lower, upper = space.cell_bounds()
    lp = LinearProgram(space.n_cells, space.coeffs[job_id], maximize=True,
                       lower=lower, upper=upper)
    for j in space.jobs:
        lp.add_constraint(space.coeffs[j.id], Relation.GE, thr_prev[j.id])
    space.add_validity(lp)
    res = solve_lp(lp)
    if not res.optimal:
        return 0.0
    return res.objective_value - thr_prev[job_id]


def find_bottlenecks(jobs, X_prev: AllocationMatrix, T: ThroughputMatrix,
                     active_weights: dict) -> set:
    """Jobs whose effective throughput cannot rise without lowering another's.

    Solves a MILP with a binary flag per weighted job that is 1 exactly when
    the job's throughput can strictly improve while every job keeps at least
    its previous throughput; the bottlenecks are the flags left at 0.  Each
    improvable claim is then re-verified with a single-objective LP: the
    big-M rows can attenuate a sub-slack violation below the solver's
    feasibility tolerance, so a claim is kept only if the job's directly
    computed gain clears half the strictness slack.
    """
    space = ProblemSpace(jobs, T)
    active = [j for j in space.jobs if active_weights.get(j.id, 0.0) > 0]
    n_z = len(active)
    n = space.n_cells + n_z
    obj = np.zeros(n)
    obj[space.n_cells:] = 1.0
    lower, upper = space.cell_bounds(extra=n_z)
    upper[space.n_cells:] = 1.0
    lp = LinearProgram(n, obj, maximize=True, lower=lower, upper=upper)

    thr_prev = {j.id: effective_throughput(j.id, X_prev, T) for j in space.jobs}
    for j in space.jobs:
        lp.add_constraint(space.pad(space.coeffs[j.id], extra=n_z),
                          Relation.GE, thr_prev[j.id])
    for k, j in enumerate(active):
        Y = T.max_throughput(j.id)
        delta = DELTA_FRACTION * Y
        z_col = space.n_cells + k
        # z=1 forces a strict improvement of delta; z=0 caps the job at its
        # previous throughput (combined with the carry row above).
        row = space.pad(space.coeffs[j.id], extra=n_z)
        row[z_col] = -(Y + delta)
        lp.add_constraint(row, Relation.GE, thr_prev[j.id] - Y)
        row = space.pad(space.coeffs[j.id], extra=n_z)
        row[z_col] = -Y
        lp.add_constraint(row, Relation.LE, thr_prev[j.id])
    space.add_validity(lp, extra=n_z)

    res = solve_milp(MixedIntegerProgram(lp, set(range(space.n_cells, n))))
    assert res.optimal, "bottleneck MILP must be feasible (X_prev is a witness)"
    stuck = {j.id for k, j in enumerate(active)
             if round(res.x[space.n_cells + k]) == 0}
    for j in active:
        if j.id in stuck:
            continue
        delta = DELTA_FRACTION * T.max_throughput(j.id)
        if max_gain(space, thr_prev, j.id) < 0.5 * delta:
            stuck.add(j.id)
    return stuck


def hierarchical_waterfill(entities, jobs, cluster: ClusterSpec,
                           T: ThroughputMatrix) -> WaterfillResult:
    """Iterate level LPs and bottleneck detection until every job is frozen."""
    jobs = list(jobs)
    if entities is None:
        raise PolicyInfeasibleError("hierarchical policy requires entities")
    space = ProblemSpace(jobs, T)
    done: set = set()
    t_prev = {j.id: 0.0 for j in jobs}
    thr_prev = {j.id: 0.0 for j in jobs}
    X = None
    iterations = []

    for _ in range(len(jobs) + 1):
        weights = assign_job_weights(entities, jobs, done)
        if all(w <= 0 for w in weights.values()):
            break
        level, x = _level_lp(space, weights, t_prev, thr_prev)
        X = _tighten_lp(space, weights, t_prev, thr_prev, level)
        thr = space.throughputs(X)
        normalized = {j.id: thr[j.id] / space.equal_norm[j.id] for j in jobs}
        scaled = {j.id: normalized[j.id] * j.scale_factor for j in jobs}
        bottlenecks = find_bottlenecks(jobs, X, T, weights)
        if not bottlenecks:
            # Numerically possible only when every weighted job can still
            # move; freeze them all to guarantee termination.
            bottlenecks = {j.id for j in jobs
                           if weights[j.id] > 0 and j.id not in done}
        iterations.append(WaterfillIteration(weights, level, X, normalized,
                                             scaled, bottlenecks))
        done |= bottlenecks
        t_prev = dict(scaled)
        thr_prev = dict(thr)
        if all(j.id in done for j in jobs):
            break

    assert X is not None
    result = WaterfillResult(X, iterations)
    return result


def single_level_waterfill(jobs, cluster: ClusterSpec,
                           T: ThroughputMatrix) -> WaterfillResult:
    """Water filling for flat max-min fairness: each job is its own entity
    carrying the job's weight."""
    entities = [Entity(id=j.id, weight=j.weight,
                       internal_policy=EntityPolicy.FAIRNESS) for j in jobs]
    shadowed = [Job(id=j.id, name=j.name, num_steps=j.num_steps,
                    steps_done=j.steps_done, scale_factor=j.scale_factor,
                    weight=j.weight, entity_id=j.id,
                    slo_seconds=j.slo_seconds, arrival_time=j.arrival_time,
                    elapsed_time=j.elapsed_time,
                    isolated_elapsed_time=j.isolated_elapsed_time)
                for j in jobs]
    return hierarchical_waterfill(entities, shadowed, cluster, T)
