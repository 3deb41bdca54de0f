"""Chunked transfer/compute pipeline simulator and staged-thread memory plan.

The pipeline model has one transfer engine and one compute engine; chunk k
may compute only after its own transfer finished.  With overlap enabled the
engines run concurrently (classic two-stage pipeline); without it, every
transfer precedes every computation.  Timelines emit as CSV rows
``event,engine,start,end``.

The thread-stage plan models staged teardown: boundaries split an ordered
module list into segments whose members are resident together; peak memory
is the largest segment total.
"""

from __future__ import annotations

import csv
import dataclasses
from typing import Sequence, Union

import numpy as np

from .errors import PlanError

TimeSpec = Union[float, Sequence[float]]


@dataclasses.dataclass(frozen=True)
class PipelineSpec:
    chunks: int
    transfer_time: TimeSpec
    compute_time: TimeSpec
    overlap: bool = True

    def __post_init__(self):
        n = int(self.chunks)
        if n < 1:
            raise ValueError(f"chunk count must be >= 1, got {self.chunks}")
        object.__setattr__(self, "chunks", n)
        object.__setattr__(self, "transfer_time", _times(self.transfer_time, n))
        object.__setattr__(self, "compute_time", _times(self.compute_time, n))


def _times(spec: TimeSpec, n: int) -> tuple[float, ...]:
    arr = np.asarray(spec, dtype=np.float64).ravel()
    if arr.size == 1:
        arr = np.full(n, float(arr[0]))
    if arr.size != n:
        raise ValueError(f"need 1 or {n} times, got {arr.size}")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise ValueError("times must be finite and >= 0")
    return tuple(float(v) for v in arr)


@dataclasses.dataclass(frozen=True)
class PipelineEvent:
    name: str
    engine: str
    start: float
    end: float


@dataclasses.dataclass(frozen=True)
class SimulationResult:
    makespan: float
    events: tuple[PipelineEvent, ...]


def simulate_pipeline(spec: PipelineSpec) -> SimulationResult:
    """Discrete-event run of the two-engine chunk pipeline.

    For equal per-chunk times the overlap makespan closes to
    ``t + n*c`` when ``c >= t`` else ``n*t + c``; the serialized model is
    ``n*(t + c)``.
    """
    t, c = spec.transfer_time, spec.compute_time
    events = []
    if spec.overlap:
        transfer_free = 0.0
        compute_free = 0.0
        for k in range(spec.chunks):
            ts = transfer_free
            te = ts + t[k]
            transfer_free = te
            events.append(PipelineEvent(f"transfer[{k}]", "transfer", ts, te))
            cs = max(compute_free, te)
            ce = cs + c[k]
            compute_free = ce
            events.append(PipelineEvent(f"compute[{k}]", "compute", cs, ce))
        makespan = max(transfer_free, compute_free)
    else:
        clock = 0.0
        for k in range(spec.chunks):
            events.append(PipelineEvent(f"transfer[{k}]", "transfer", clock, clock + t[k]))
            clock += t[k]
        for k in range(spec.chunks):
            events.append(PipelineEvent(f"compute[{k}]", "compute", clock, clock + c[k]))
            clock += c[k]
        makespan = clock
    return SimulationResult(makespan, tuple(events))


def write_timeline_csv(path, events: Sequence[PipelineEvent]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["event", "engine", "start", "end"])
        for ev in events:
            writer.writerow([ev.name, ev.engine, repr(ev.start), repr(ev.end)])


Stage = tuple[str, float]


@dataclasses.dataclass(frozen=True)
class StagePlanResult:
    segment_totals: tuple[float, ...]
    peak: float            # with the boundaries applied
    peak_unstaged: float   # everything resident at once


def plan_thread_stages(stages: Sequence[Stage],
                       boundaries: Sequence[int] = ()) -> StagePlanResult:
    """Peak resident memory for an ordered stage list split at ``boundaries``.

    Boundary ``b`` terminates the threads of stages ``< b`` before stage ``b``
    starts; valid positions are ``1 .. len(stages) - 1``, strictly
    increasing.  Peak with boundaries never exceeds the unstaged peak.
    """
    stages = list(stages)
    if not stages:
        raise PlanError("at least one stage required")
    mems = []
    for name, mem in stages:
        m = float(mem)
        if m < 0 or not np.isfinite(m):
            raise PlanError(f"stage {name!r} has invalid memory estimate {mem}")
        mems.append(m)
    bounds = [int(b) for b in boundaries]
    if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
        raise PlanError(f"boundaries must be strictly increasing, got {bounds}")
    if any(b < 1 or b > len(stages) - 1 for b in bounds):
        raise PlanError(f"boundary out of range 1..{len(stages) - 1}: {bounds}")

    cuts = [0] + bounds + [len(stages)]
    totals = tuple(float(sum(mems[s:e])) for s, e in zip(cuts, cuts[1:]))
    return StagePlanResult(totals, max(totals), float(sum(mems)))


@dataclasses.dataclass(frozen=True)
class ThreadStagePlan:
    """Ordered module stages with teardown boundaries (default: one after
    every stage, i.e. four boundaries for the standard five-stage pipeline)."""

    stages: tuple[Stage, ...]
    boundaries: tuple[int, ...]

    def __post_init__(self):
        self.evaluate()  # validates

    @classmethod
    def with_default_boundaries(cls, stages: Sequence[Stage]) -> "ThreadStagePlan":
        stages = tuple(stages)
        return cls(stages, tuple(range(1, len(stages))))

    def evaluate(self) -> StagePlanResult:
        return plan_thread_stages(self.stages, self.boundaries)
