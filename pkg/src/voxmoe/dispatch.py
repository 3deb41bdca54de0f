"""Scenario routing: classify a scene from its proposals and pick one expert.

The routing evidence is per-proposal distance and confidence against the
thresholds ``(distance_d, confidence_c)``.  Rules, most capable expert first:

1. any proposal far (>= D) and unclear (< C)  -> DISTANT_UNCERTAIN / APE
2. any proposal close-but-unclear or far-but-clear -> MIXED_VISIBILITY / VEE
3. otherwise (all close and clear, or no proposals) -> CLOSE_DISTINCT / LPE

An optionally registered emergency predicate is evaluated first and wins
unconditionally.
"""

from __future__ import annotations

import dataclasses
import enum
import threading
from typing import Callable, Iterable, Mapping, Sequence

from .amdb import ProposalRegion
from .errors import EmergencyConflictError


class Scenario(enum.Enum):
    CLOSE_DISTINCT = "close_distinct"
    MIXED_VISIBILITY = "mixed_visibility"
    DISTANT_UNCERTAIN = "distant_uncertain"
    EMERGENCY = "emergency"


class Expert(enum.Enum):
    LPE = "lpe"
    VEE = "vee"
    APE = "ape"
    EMERGENCY = "emergency"


EXPERT_FOR_SCENARIO = {
    Scenario.CLOSE_DISTINCT: Expert.LPE,
    Scenario.MIXED_VISIBILITY: Expert.VEE,
    Scenario.DISTANT_UNCERTAIN: Expert.APE,
    Scenario.EMERGENCY: Expert.EMERGENCY,
}

DEFAULT_CONFIDENCE_C = 0.5


@dataclasses.dataclass(frozen=True)
class RouteThresholds:
    distance_d: float
    confidence_c: float = DEFAULT_CONFIDENCE_C

    def __post_init__(self):
        if not self.distance_d > 0:
            raise ValueError(f"distance_d must be > 0, got {self.distance_d}")
        if not 0.0 <= self.confidence_c <= 1.0:
            raise ValueError(f"confidence_c must be in [0, 1], got {self.confidence_c}")


@dataclasses.dataclass(frozen=True)
class RouteDecision:
    scenario: Scenario
    expert: Expert
    triggering: tuple[int, ...] = ()

    def __post_init__(self):
        if EXPERT_FOR_SCENARIO[self.scenario] is not self.expert:
            raise ValueError(f"{self.scenario} must route to "
                             f"{EXPERT_FOR_SCENARIO[self.scenario]}, got {self.expert}")

    @classmethod
    def for_scenario(cls, scenario: Scenario,
                     triggering: Iterable[int] = ()) -> "RouteDecision":
        return cls(scenario, EXPERT_FOR_SCENARIO[scenario], tuple(triggering))


ScenePredicate = Callable[[Sequence[ProposalRegion]], bool]

_registry_lock = threading.Lock()
_emergency_predicate: ScenePredicate | None = None


class EmergencyRegistration:
    """Handle returned by :func:`register_emergency_predicate`; remove to free the slot."""

    def __init__(self, predicate: ScenePredicate):
        self._predicate = predicate
        self._active = True

    def remove(self) -> None:
        global _emergency_predicate
        with _registry_lock:
            if self._active and _emergency_predicate is self._predicate:
                _emergency_predicate = None
            self._active = False

    def __enter__(self) -> "EmergencyRegistration":
        return self

    def __exit__(self, *exc) -> None:
        self.remove()


def register_emergency_predicate(predicate: ScenePredicate) -> EmergencyRegistration:
    """Install a scene predicate that preempts threshold routing when it fires.

    Only one predicate may be active; registering a second without removing
    the first raises :class:`EmergencyConflictError`.
    """
    global _emergency_predicate
    with _registry_lock:
        if _emergency_predicate is not None:
            raise EmergencyConflictError("an emergency predicate is already registered")
        _emergency_predicate = predicate
    return EmergencyRegistration(predicate)


def classify_scene(proposals: Sequence[ProposalRegion],
                   thresholds: RouteThresholds) -> RouteDecision:
    """Route a scene per the 3-rule table; rule 1 (far+unclear) wins overlaps.

    The triggering indices list the proposals matching the decisive rule's
    pattern (all of them for the close-and-distinct case, none for an
    emergency override or an empty scene).
    """
    with _registry_lock:
        predicate = _emergency_predicate
    if predicate is not None and predicate(proposals):
        return RouteDecision.for_scenario(Scenario.EMERGENCY)

    d_th, c_th = thresholds.distance_d, thresholds.confidence_c
    far_unclear = []
    mixed = []
    for i, p in enumerate(proposals):
        far = p.centroid_distance >= d_th
        clear = p.confidence >= c_th
        if far and not clear:
            far_unclear.append(i)
        elif far == clear:
            # far-but-clear, or close-but-unclear
            mixed.append(i)
    if far_unclear:
        return RouteDecision.for_scenario(Scenario.DISTANT_UNCERTAIN, far_unclear)
    if mixed:
        return RouteDecision.for_scenario(Scenario.MIXED_VISIBILITY, mixed)
    return RouteDecision.for_scenario(Scenario.CLOSE_DISTINCT, range(len(proposals)))


@dataclasses.dataclass(frozen=True)
class RouteStatistics:
    total: int
    counts: Mapping[Expert, int]
    fractions: Mapping[Expert, float]


def route_statistics(decisions: Iterable[RouteDecision]) -> RouteStatistics:
    """Per-expert decision counts and fractions (zero fractions when empty)."""
    counts = {expert: 0 for expert in Expert}
    total = 0
    for decision in decisions:
        counts[decision.expert] += 1
        total += 1
    if total:
        fractions = {e: c / total for e, c in counts.items()}
    else:
        fractions = {e: 0.0 for e in Expert}
    return RouteStatistics(total, counts, fractions)
