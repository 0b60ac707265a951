"""Colocated-throughput estimation: low-rank matrix completion over a set of
pre-profiled reference jobs, nearest-reference matching for new jobs, and
online refinement from observed rates.

Pairwise colocated throughputs are normalized by each job's isolated
throughput on the same configuration, so entries live in [0, ~1.2] and the
matrix is approximately low rank.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_RANK = 3
DEFAULT_REG = 1e-2
DEFAULT_ITERS = 50
EWMA_ALPHA = 0.25


class CompletionError(ValueError):
    pass


def complete_matrix(partial: np.ndarray, mask: np.ndarray, rank: int = DEFAULT_RANK,
                    reg: float = DEFAULT_REG, iters: int = DEFAULT_ITERS,
                    seed: int = 0, restarts: int = 3,
                    return_history: bool = False):
    """Alternating least squares low-rank completion.

    Minimizes the squared error on observed cells (mask True) with L2
    regularization on both factors.  ALS is non-convex, so several seeded
    uniform(0,1) starts are run and the factorization with the lowest final
    objective wins.  Observed cells are copied through unchanged in the
    returned matrix.  Deterministic for a fixed seed.
    """
    partial = np.asarray(partial, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if partial.shape != mask.shape:
        raise CompletionError("matrix and mask shapes differ")
    if rank < 1:
        raise CompletionError("rank must be >= 1")
    if np.any(mask.sum(axis=1) == 0) or np.any(mask.sum(axis=0) == 0):
        raise CompletionError("every row and column needs at least one observation")

    best = None
    for attempt in range(max(1, restarts)):
        completed, history = _als_once(partial, mask, rank, reg, iters,
                                       seed + attempt)
        if best is None or history[-1] < best[1][-1]:
            best = (completed, history)
    completed, history = best
    completed = completed.copy()
    completed[mask] = partial[mask]
    if return_history:
        return completed, history
    return completed


def _als_once(partial, mask, rank, reg, iters, seed):
    n, p = partial.shape
    rng = np.random.default_rng(seed)
    U = rng.uniform(0.0, 1.0, size=(n, rank))
    V = rng.uniform(0.0, 1.0, size=(p, rank))
    eye = reg * np.eye(rank)

    def objective():
        err = (U @ V.T - partial)[mask]
        return float(err @ err) + reg * float((U * U).sum() + (V * V).sum())

    history = [objective()]
    for _ in range(iters):
        for i in range(n):
            cols = mask[i]
            Vi = V[cols]
            U[i] = np.linalg.solve(Vi.T @ Vi + eye, Vi.T @ partial[i, cols])
        for j in range(p):
            rows_ = mask[:, j]
            Uj = U[rows_]
            V[j] = np.linalg.solve(Uj.T @ Uj + eye, Uj.T @ partial[rows_, j])
        history.append(objective())
    return U @ V.T, history


@dataclass
class ReferenceSet:
    """Fully profiled reference jobs with their pairwise normalized
    colocated-throughput matrix R (square, complete)."""

    names: list
    R: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float)
        n = len(self.names)
        if self.R.shape != (n, n):
            raise ValueError("R must be square over the reference jobs")
        if np.any(~np.isfinite(self.R)):
            raise ValueError("reference matrix must be complete")

    @property
    def size(self) -> int:
        return len(self.names)

    @classmethod
    def from_throughputs(cls, T) -> "ReferenceSet":
        """Build a reference set from a throughput matrix whose rows hold all
        singletons and all pairs of the reference jobs.

        Each pair entry is normalized by the member's own singleton
        throughput on the same configuration; the first configuration where
        both are feasible is used.  Diagonal cells (a job with itself) are 1.
        """
        ids = [combo.members[0] for combo in T.rows if not combo.is_pair]
        names = [f"job-{i}" for i in ids]
        index = {job_id: k for k, job_id in enumerate(ids)}
        n = len(ids)
        R = np.full((n, n), np.nan)
        np.fill_diagonal(R, 1.0)
        for r, combo in enumerate(T.rows):
            if not combo.is_pair:
                continue
            a, b = combo.members
            for c in range(T.num_configs):
                if not T.feasible(r, c):
                    continue
                ia, ib = T.singleton_row(a), T.singleton_row(b)
                if not (T.feasible(ia, c) and T.feasible(ib, c)):
                    continue
                iso_a, iso_b = T.value(ia, c, a), T.value(ib, c, b)
                if iso_a <= 0 or iso_b <= 0:
                    continue
                R[index[a], index[b]] = T.value(r, c, a) / iso_a
                R[index[b], index[a]] = T.value(r, c, b) / iso_b
                break
        if np.any(np.isnan(R)):
            raise ValueError("reference throughputs must cover every pair")
        return cls(names, R)


def fingerprint_and_match(measurements: np.ndarray, observed: np.ndarray,
                          refs: ReferenceSet, rank: int = DEFAULT_RANK,
                          reg: float = DEFAULT_REG, iters: int = DEFAULT_ITERS,
                          seed: int = 0):
    """Complete a partially measured colocation row and return the index of
    the closest reference job (Euclidean distance, ties to the lowest id).

    `measurements` is the new job's normalized colocated throughput against
    each reference job, valid where `observed` is True; at least two entries
    must be observed.
    """
    measurements = np.asarray(measurements, dtype=float)
    observed = np.asarray(observed, dtype=bool)
    if measurements.shape != (refs.size,) or observed.shape != (refs.size,):
        raise ValueError("measurement vector must align with the reference set")
    if observed.sum() < 2:
        raise CompletionError("need at least two observed entries to fingerprint")

    stacked = np.vstack([refs.R, np.where(observed, measurements, 0.0)])
    mask = np.vstack([np.ones_like(refs.R, dtype=bool), observed])
    completed = complete_matrix(stacked, mask, rank=rank, reg=reg, iters=iters,
                                seed=seed)
    fingerprint = completed[-1]
    dists = np.linalg.norm(refs.R - fingerprint, axis=1)
    best = int(np.argmin(dists))  # argmin takes the first (lowest id) on ties
    return best, fingerprint


@dataclass
class OnlineEstimates:
    """Exponentially weighted running means of observed throughputs keyed by
    (combination members, configuration key)."""

    alpha: float = EWMA_ALPHA
    values: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def get(self, key, default: float | None = None):
        return self.values.get(key, default)

    def observe(self, key, measured: float):
        if key not in self.values:
            self.values[key] = float(measured)
            self.counts[key] = 1
        else:
            self.values[key] = (1 - self.alpha) * self.values[key] \
                + self.alpha * float(measured)
            self.counts[key] += 1


def refine_online(estimates: OnlineEstimates, observations) -> OnlineEstimates:
    """Fold a stream of (key, measured steps/sec) into the running means."""
    for key, measured in observations:
        estimates.observe(key, measured)
    return estimates
