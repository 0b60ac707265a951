"""Jobs, entities, and job combinations (the rows of throughput and
allocation matrices)."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field


class EntityPolicy(str, enum.Enum):
    FAIRNESS = "fairness"
    FIFO = "fifo"


@dataclass
class Job:
    """A training job.  Policies treat jobs as read-only snapshots; only the
    simulator mutates progress and clock fields."""

    id: int
    name: str = ""
    num_steps: int = 1
    steps_done: float = 0.0
    scale_factor: int = 1
    weight: float = 1.0
    entity_id: int | None = None
    slo_seconds: float | None = None
    arrival_time: float = 0.0
    elapsed_time: float = 0.0
    isolated_elapsed_time: float = 0.0

    def __post_init__(self):
        if self.num_steps <= 0:
            raise ValueError(f"job {self.id}: num_steps must be positive")
        if self.scale_factor < 1:
            raise ValueError(f"job {self.id}: scale_factor must be >= 1")
        if self.weight <= 0:
            raise ValueError(f"job {self.id}: weight must be positive")
        if self.slo_seconds is not None and self.slo_seconds <= 0:
            raise ValueError(f"job {self.id}: slo_seconds must be positive")

    @property
    def remaining_steps(self) -> float:
        return max(self.num_steps - self.steps_done, 0.0)

    @property
    def finished(self) -> bool:
        return self.steps_done >= self.num_steps


@dataclass(frozen=True)
class Entity:
    id: int
    weight: float = 1.0
    internal_policy: EntityPolicy = EntityPolicy.FAIRNESS

    def __post_init__(self):
        if self.weight <= 0:
            raise ValueError(f"entity {self.id}: weight must be positive")


@dataclass(frozen=True, order=True)
class JobCombination:
    """One or two jobs sharing the same worker set (ids sorted ascending)."""

    members: tuple

    def __post_init__(self):
        members = tuple(sorted(int(j) for j in self.members))
        if not 1 <= len(members) <= 2:
            raise ValueError("combinations hold 1 or 2 jobs")
        if len(set(members)) != len(members):
            raise ValueError("combination members must be distinct")
        object.__setattr__(self, "members", members)

    @classmethod
    def of(cls, *job_ids: int) -> "JobCombination":
        return cls(tuple(job_ids))

    @property
    def is_pair(self) -> bool:
        return len(self.members) == 2

    def contains(self, job_id: int) -> bool:
        return job_id in self.members

    def conflicts_with(self, other: "JobCombination") -> bool:
        return bool(set(self.members) & set(other.members))

    def member_index(self, job_id: int) -> int:
        return self.members.index(job_id)

    def __str__(self):
        return "+".join(str(m) for m in self.members)
