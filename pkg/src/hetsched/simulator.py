"""Round-driven cluster simulator.

The clock advances one scheduling round at a time.  Arrivals and completions
are applied at round boundaries; either kind of reset event (or a periodic
timer) triggers a policy re-solve on a snapshot of the active jobs.  The
mechanism realizes the solved allocation round by round, charging a fixed
checkpoint overhead whenever a job's worker set or colocation partner
changes.  Jobs that finish mid-round record their exact completion time but
hold their workers until the round ends.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .cluster import ClusterSpec, Placement
from .estimator import OnlineEstimates, ReferenceSet, fingerprint_and_match
from .jobs import Job, JobCombination
from .matrices import AllocationMatrix, ThroughputMatrix, prune_combinations
from .mechanism import (RoundLedger, compute_priorities, place, plan_round,
                        settle_round)
from .policies import PolicyKind, PolicySpec, solve_policy
from .traces import JobTemplate, Trace, colocation_factor

PREEMPTION_OVERHEAD = 5.0  # seconds to restore + checkpoint around a switch
STEADY_STATE_WINDOW = 0.10


@dataclass
class EstimatorConfig:
    reference_names: list
    profile_fraction: float = 0.2
    rank: int = 3
    reg: float = 1e-2
    iters: int = 50


@dataclass
class SimConfig:
    cluster: ClusterSpec
    policy: PolicySpec
    round_duration: float = 360.0
    recompute_every: int | None = None  # rounds; None = on reset events only
    preemption_overhead: float = PREEMPTION_OVERHEAD
    work_conserving: bool = True
    agnostic: bool = False
    estimator: EstimatorConfig | None = None
    seed: int = 0
    steady_state_window: float = STEADY_STATE_WINDOW
    max_rounds: int = 500_000
    collect_round_log: bool = False


@dataclass
class JobRecord:
    job_id: int
    template: str
    arrival: float
    completion: float
    num_steps: int
    scale_factor: int
    slo_seconds: float | None
    isolated_duration: float

    @property
    def jct(self) -> float:
        return self.completion - self.arrival

    @property
    def slo_violated(self) -> bool:
        return self.slo_seconds is not None and self.jct > self.slo_seconds

    @property
    def ftf_rho(self) -> float:
        return self.jct / self.isolated_duration if self.isolated_duration > 0 \
            else float("nan")


@dataclass
class MetricsReport:
    records: list
    makespan: float
    total_cost: float
    utilization: float
    rounds: int
    policy_solves: int
    solve_seconds: float  # wall clock; excluded from deterministic outputs

    @property
    def avg_jct(self) -> float:
        return float(np.mean([r.jct for r in self.records])) if self.records else 0.0

    def steady_state_jcts(self, window: float = STEADY_STATE_WINDOW) -> list:
        return steady_state_filter([r.jct for r in
                                    sorted(self.records, key=lambda r: r.completion)],
                                   window)

    @property
    def avg_steady_jct(self) -> float:
        jcts = self.steady_state_jcts()
        return float(np.mean(jcts)) if jcts else 0.0

    @property
    def slo_violation_fraction(self) -> float:
        with_slo = [r for r in self.records if r.slo_seconds is not None]
        if not with_slo:
            return 0.0
        return sum(1 for r in with_slo if r.slo_violated) / len(with_slo)

    def summary(self) -> dict:
        return {
            "jobs_completed": len(self.records),
            "avg_jct_seconds": self.avg_jct,
            "avg_steady_state_jct_seconds": self.avg_steady_jct,
            "makespan_seconds": self.makespan,
            "total_cost_dollars": self.total_cost,
            "mean_utilization": self.utilization,
            "slo_violation_fraction": self.slo_violation_fraction,
            "rounds": self.rounds,
            "policy_solves": self.policy_solves,
        }


def steady_state_filter(values: list, window: float = STEADY_STATE_WINDOW) -> list:
    """Drop the first and last `window` fraction of completions."""
    if window < 0 or window >= 0.5:
        raise ValueError("window must lie in [0, 0.5)")
    n = len(values)
    k = int(n * window)
    out = values[k: n - k if k else n]
    if not out:
        raise ValueError("steady-state window empties the completion set")
    return out


class _ActiveJob:
    def __init__(self, job: Job, template: JobTemplate):
        self.job = job
        self.template = template
        self.prev_workers: tuple = ()
        self.prev_partner: tuple = ()
        self.completion: float | None = None
        self.isolated_duration: float = 0.0
        self.match: int | None = None  # estimator: matched reference index


class Simulation:
    def __init__(self, config: SimConfig, trace: Trace, templates: list):
        self.cfg = config
        self.trace = trace
        self.templates = {t.name: t for t in templates}
        self.tier_of_type = {t.id: min(t.id, 2) for t in config.cluster.types}
        self.entities = list(trace.entities)
        self.rng = np.random.default_rng(config.seed)
        self.estimates = OnlineEstimates()
        self.refs: ReferenceSet | None = None
        if config.estimator is not None:
            names = config.estimator.reference_names
            ref_templates = [self.templates[n] for n in names]
            R = np.array([[colocation_factor(a, b) for b in ref_templates]
                          for a in ref_templates])
            self.refs = ReferenceSet(list(names), R)
        self.round_log: list = []

    # -- throughput construction ------------------------------------------

    def _singleton_cell(self, state: _ActiveJob, cfg) -> tuple | None:
        t = self.cfg.cluster.types[cfg.type_id]
        sf = state.job.scale_factor
        if sf > t.num_workers:
            return None
        consolidated = cfg.placement in (Placement.SOLE, Placement.CONSOLIDATED)
        thr = state.template.isolated_throughput(self.tier_of_type[t.id], sf,
                                                 consolidated)
        return (thr,)

    def _pair_factor(self, a: _ActiveJob, b: _ActiveJob) -> float:
        """Normalized throughput of a when colocated with b (oracle or
        estimated, with online-refined observations taking precedence)."""
        key = (a.job.id, b.job.id)
        observed = self.estimates.get(key)
        if observed is not None:
            return observed
        if self.refs is not None and a.match is not None and b.match is not None:
            return float(self.refs.R[a.match, b.match])
        return colocation_factor(a.template, b.template)

    def _true_pair_factor(self, a: _ActiveJob, b: _ActiveJob) -> float:
        return colocation_factor(a.template, b.template)

    def build_matrix(self, states: list, estimated: bool,
                     prune: bool = True) -> ThroughputMatrix:
        rows = []
        entries = []
        configs = self.cfg.cluster.configurations
        cells = {}
        for st in states:
            row = []
            for cfg in configs:
                row.append(self._singleton_cell(st, cfg))
            rows.append(JobCombination.of(st.job.id))
            entries.append(row)
            cells[st.job.id] = row
        if self.cfg.policy.space_sharing:
            for i, a in enumerate(states):
                for b in states[i + 1:]:
                    if a.job.scale_factor != b.job.scale_factor:
                        continue
                    fa = self._pair_factor(a, b) if estimated \
                        else self._true_pair_factor(a, b)
                    fb = self._pair_factor(b, a) if estimated \
                        else self._true_pair_factor(b, a)
                    row = []
                    for c, cfg in enumerate(configs):
                        ca, cb = cells[a.job.id][c], cells[b.job.id][c]
                        if ca is None or cb is None:
                            row.append(None)
                        else:
                            pair = {a.job.id: ca[0] * fa, b.job.id: cb[0] * fb}
                            combo = JobCombination.of(a.job.id, b.job.id)
                            row.append(tuple(pair[m] for m in combo.members))
                    rows.append(JobCombination.of(a.job.id, b.job.id))
                    entries.append(row)
        T = ThroughputMatrix(self.cfg.cluster, rows, entries)
        if self.cfg.policy.space_sharing and prune:
            T = prune_combinations(T)
        return T

    def _spread_agnostic(self, X: AllocationMatrix) -> AllocationMatrix:
        """Rebalance each row's time uniformly over its feasible cells,
        weighted by worker counts.

        An agnostic scheduler has no basis for preferring one accelerator
        type over another; without this, the LP solver's deterministic column
        order would silently hand the baseline near-optimal placements.
        Row totals are preserved and per-type capacity stays satisfied.
        """
        T = X.T
        values = np.zeros_like(X.values)
        for r in range(T.num_rows):
            total = X.values[r].sum()
            if total <= 0:
                continue
            weights = np.array([
                T.cluster.types[cfg.type_id].num_workers if T.feasible(r, c) else 0.0
                for c, cfg in enumerate(T.configs)])
            per_type_cols = {}
            for c, cfg in enumerate(T.configs):
                if T.feasible(r, c):
                    per_type_cols.setdefault(cfg.type_id, []).append(c)
            for cols in per_type_cols.values():
                for c in cols:
                    weights[c] /= len(cols)
            values[r] = total * weights / weights.sum()
        return AllocationMatrix(T, values)

    def _agnostic_matrix(self, T: ThroughputMatrix) -> ThroughputMatrix:
        """Rank-1 view for heterogeneity-agnostic baselines: each job's worst
        feasible singleton throughput replicated across all configurations."""
        worst = {}
        for combo in T.rows:
            if combo.is_pair:
                continue
            r = T.row_index(combo)
            vals = [T.value(r, c, combo.members[0])
                    for c in range(T.num_configs) if T.feasible(r, c)]
            worst[combo.members[0]] = min(vals) if vals else 0.0
        entries = []
        for r, combo in enumerate(T.rows):
            row = []
            for c in range(T.num_configs):
                if not T.feasible(r, c):
                    row.append(None)
                else:
                    row.append(tuple(worst[m] for m in combo.members))
            entries.append(row)
        return ThroughputMatrix(T.cluster, list(T.rows), entries)

    # -- estimator hooks ---------------------------------------------------

    def _profile_new_job(self, state: _ActiveJob):
        est = self.cfg.estimator
        n = self.refs.size
        budget = max(2, int(math.ceil(est.profile_fraction * n)))
        picks = sorted(self.rng.choice(n, size=min(budget, n), replace=False).tolist())
        truth = np.array([colocation_factor(state.template,
                                            self.templates[self.refs.names[k]])
                          for k in range(n)])
        observed = np.zeros(n, dtype=bool)
        observed[picks] = True
        match, _ = fingerprint_and_match(np.where(observed, truth, 0.0), observed,
                                         self.refs, rank=est.rank, reg=est.reg,
                                         iters=est.iters,
                                         seed=self.cfg.seed + state.job.id)
        state.match = match

    # -- main loop ---------------------------------------------------------

    def run(self) -> MetricsReport:
        cfg = self.cfg
        pending = sorted(self.trace.entries, key=lambda e: (e.arrival_time,))
        pending_idx = 0
        active: dict[int, _ActiveJob] = {}
        ledger = RoundLedger(cfg.round_duration)
        records: list[JobRecord] = []
        now = 0.0
        round_idx = 0
        need_resolve = True
        allocation: AllocationMatrix | None = None
        T_exec: ThroughputMatrix | None = None
        cost_total = 0.0
        busy_worker_rounds = 0
        total_worker_rounds = 0
        solves = 0
        solve_seconds = 0.0
        prev_makespan: float | None = None

        def activate(entry, job_id):
            template = self.templates[entry.template]
            job = Job(id=job_id, name=entry.template, num_steps=entry.num_steps,
                      scale_factor=entry.scale_factor, weight=entry.weight,
                      entity_id=entry.entity_id, slo_seconds=entry.slo_seconds,
                      arrival_time=entry.arrival_time)
            st = _ActiveJob(job, template)
            # Isolated 1/n share of the equal-share mix at arrival time; used
            # only as the denominator of the reported finish-time fairness.
            n_active = len(active) + 1
            total = cfg.cluster.total_workers
            equal_thr = sum(
                t.num_workers / total
                * template.isolated_throughput(self.tier_of_type[t.id],
                                               job.scale_factor, True)
                for t in cfg.cluster.types)
            iso_thr = equal_thr / n_active
            st.isolated_duration = job.num_steps / iso_thr if iso_thr > 0 else 0.0
            if all(job.scale_factor > t.num_workers for t in cfg.cluster.types):
                raise ValueError(
                    f"job {job_id} requests {job.scale_factor} workers but no "
                    "accelerator type has that many")
            if self.refs is not None:
                self._profile_new_job(st)
            active[job_id] = st

        total_jobs = len(pending)
        while (pending_idx < total_jobs or active) and round_idx < cfg.max_rounds:
            arrived = False
            while pending_idx < total_jobs and \
                    pending[pending_idx].arrival_time <= now + 1e-9:
                activate(pending[pending_idx], pending_idx)
                pending_idx += 1
                arrived = True
            if arrived:
                need_resolve = True
            if not active:
                # Fast-forward an idle cluster to the next arrival boundary.
                next_arrival = pending[pending_idx].arrival_time
                gap_rounds = max(1, math.ceil((next_arrival - now) / cfg.round_duration))
                now += gap_rounds * cfg.round_duration
                continue

            if cfg.recompute_every is not None:
                # Periodic mode: reset events wait for the next timer tick.
                resolve_now = (round_idx % cfg.recompute_every == 0
                               or allocation is None)
            else:
                resolve_now = need_resolve or allocation is None
            if resolve_now:
                states = [active[k] for k in sorted(active)]
                if cfg.estimator is not None:
                    # The policy sees estimated pair rates; execution runs the
                    # same rows at their true rates.
                    T_policy = self.build_matrix(states, estimated=True)
                    T_full = self.build_matrix(states, estimated=False, prune=False)
                    T_exec = T_full.with_rows(T_policy.rows)
                elif cfg.agnostic:
                    T_exec = self.build_matrix(states, estimated=False)
                    T_policy = self._agnostic_matrix(T_exec)
                else:
                    T_exec = self.build_matrix(states, estimated=False)
                    T_policy = T_exec
                snapshot = []
                for st in states:
                    j = st.job
                    j.elapsed_time = now - j.arrival_time
                    j.isolated_elapsed_time = j.elapsed_time
                    snapshot.append(j)
                t0 = time.perf_counter()
                bracket = None
                if cfg.policy.kind is PolicyKind.MIN_MAKESPAN and prev_makespan:
                    bracket = (0.0, prev_makespan * 1.05)
                result = solve_policy(cfg.policy, snapshot, cfg.cluster, T_policy,
                                      entities=self.entities or None,
                                      n_active=len(snapshot),
                                      makespan_bracket=bracket)
                solve_seconds += time.perf_counter() - t0
                solves += 1
                if cfg.agnostic:
                    result.allocation = self._spread_agnostic(result.allocation)
                if cfg.policy.kind is PolicyKind.MIN_MAKESPAN:
                    prev_makespan = result.objective
                # Allocation rows come from the policy matrix; map onto the
                # execution matrix (identical rows unless space sharing was
                # disabled inside the policy).
                allocation = AllocationMatrix(T_exec, np.zeros((T_exec.num_rows,
                                                                T_exec.num_configs)))
                exec_rows = set(T_exec.rows)
                for r, combo in enumerate(result.allocation.rows):
                    if combo in exec_rows:
                        allocation.values[T_exec.row_index(combo)] = \
                            result.allocation.values[r]
                need_resolve = False

            jobs_by_id = {st.job.id: st.job for st in active.values()}
            priorities = compute_priorities(allocation, ledger)
            plan = plan_round(priorities, jobs_by_id, cfg.cluster, ledger, T_exec,
                              work_conserving=cfg.work_conserving)
            place(plan, cfg.cluster, jobs_by_id)

            completions = []
            busy = 0
            for a in plan.assignments:
                r = T_exec.row_index(a.combo)
                # A pair shares one worker set, so it counts once.
                sf = jobs_by_id[a.combo.members[0]].scale_factor
                busy += sf
                for m in a.combo.members:
                    st = active[m]
                    partner = tuple(x for x in a.combo.members if x != m)
                    switched = (tuple(a.worker_ids) != st.prev_workers
                                or partner != st.prev_partner)
                    overhead = cfg.preemption_overhead if switched else 0.0
                    effective = max(cfg.round_duration - overhead, 0.0)
                    thr = T_exec.value(r, a.config_index, m)
                    if self.cfg.estimator is not None and a.combo.is_pair:
                        # Online refinement: observe the true colocation rate.
                        other = active[partner[0]]
                        iso = self._singleton_cell(st, T_exec.configs[a.config_index])
                        if iso and iso[0] > 0:
                            self.estimates.observe((m, partner[0]), thr / iso[0])
                    job = st.job
                    gained = thr * effective
                    if job.steps_done + gained >= job.num_steps - 1e-9 and thr > 0:
                        need = job.num_steps - job.steps_done
                        finish = now + overhead + need / thr
                        job.steps_done = job.num_steps
                        st.completion = min(finish, now + cfg.round_duration)
                        completions.append(m)
                    else:
                        job.steps_done += gained
                    st.prev_workers = tuple(a.worker_ids)
                    st.prev_partner = partner

            scheduled_ids = plan.jobs_scheduled()
            for st in active.values():
                if st.job.id not in scheduled_ids:
                    st.prev_workers = ()
                    st.prev_partner = ()

            for t in cfg.cluster.types:
                total_worker_rounds += t.num_workers
            busy_worker_rounds += busy
            for a in plan.assignments:
                t = cfg.cluster.types[T_exec.configs[a.config_index].type_id]
                sf = jobs_by_id[a.combo.members[0]].scale_factor
                cost_total += t.cost_per_hour * sf * cfg.round_duration / 3600.0

            if cfg.collect_round_log:
                self.round_log.append(plan.to_json(T_exec, round_idx))

            settle_round(plan, ledger, cfg.round_duration, cfg.cluster, T_exec)
            now += cfg.round_duration
            round_idx += 1

            if completions:
                for m in completions:
                    st = active.pop(m)
                    records.append(JobRecord(
                        job_id=m, template=st.template.name,
                        arrival=st.job.arrival_time, completion=st.completion,
                        num_steps=st.job.num_steps,
                        scale_factor=st.job.scale_factor,
                        slo_seconds=st.job.slo_seconds,
                        isolated_duration=st.isolated_duration))
                ledger.drop_jobs(completions)
                need_resolve = True
                if cfg.recompute_every is not None and allocation is not None:
                    # Periodic mode keeps the stale allocation but must stop
                    # scheduling departed jobs: drop their rows.
                    gone = set(completions)
                    survivors = [combo for combo in T_exec.rows
                                 if not (set(combo.members) & gone)]
                    if survivors:
                        idx = [T_exec.row_index(c) for c in survivors]
                        T_exec = T_exec.with_rows(survivors)
                        allocation = AllocationMatrix(T_exec,
                                                      allocation.values[idx])
                    else:
                        allocation = None

        self.final_states = active
        makespan = max((r.completion for r in records), default=0.0)
        utilization = busy_worker_rounds / total_worker_rounds \
            if total_worker_rounds else 0.0
        return MetricsReport(records=sorted(records, key=lambda r: r.job_id),
                             makespan=makespan, total_cost=cost_total,
                             utilization=utilization, rounds=round_idx,
                             policy_solves=solves, solve_seconds=solve_seconds)


def run_simulation(config: SimConfig, trace: Trace, templates: list) -> MetricsReport:
    return Simulation(config, trace, templates).run()
