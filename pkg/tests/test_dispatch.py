import itertools

import numpy as np
import pytest

from voxmoe.amdb import ProposalRegion
from voxmoe.dispatch import (Expert, RouteDecision, RouteThresholds, Scenario,
                             classify_scene, register_emergency_predicate,
                             route_statistics)
from voxmoe.errors import EmergencyConflictError

TH = RouteThresholds(distance_d=23.5, confidence_c=0.5)


def proposal(distance, confidence):
    """Axis-aligned unit box whose center sits `distance` meters out on x."""
    return ProposalRegion((distance - 0.5, -0.5, -0.5),
                          (distance + 0.5, 0.5, 0.5), confidence)


# the four per-proposal patterns over {d<D, d>=D} x {c<C, c>=C}
PATTERNS = {
    "close_clear": proposal(10.0, 0.9),
    "close_unclear": proposal(10.0, 0.2),
    "far_clear": proposal(30.0, 0.9),
    "far_unclear": proposal(30.0, 0.2),
}

# frozen expectations for all 15 non-empty pattern subsets
EXPECTED = {
    ("close_clear",): Scenario.CLOSE_DISTINCT,
    ("close_unclear",): Scenario.MIXED_VISIBILITY,
    ("far_clear",): Scenario.MIXED_VISIBILITY,
    ("far_unclear",): Scenario.DISTANT_UNCERTAIN,
    ("close_clear", "close_unclear"): Scenario.MIXED_VISIBILITY,
    ("close_clear", "far_clear"): Scenario.MIXED_VISIBILITY,
    ("close_clear", "far_unclear"): Scenario.DISTANT_UNCERTAIN,
    ("close_unclear", "far_clear"): Scenario.MIXED_VISIBILITY,
    ("close_unclear", "far_unclear"): Scenario.DISTANT_UNCERTAIN,
    ("far_clear", "far_unclear"): Scenario.DISTANT_UNCERTAIN,
    ("close_clear", "close_unclear", "far_clear"): Scenario.MIXED_VISIBILITY,
    ("close_clear", "close_unclear", "far_unclear"): Scenario.DISTANT_UNCERTAIN,
    ("close_clear", "far_clear", "far_unclear"): Scenario.DISTANT_UNCERTAIN,
    ("close_unclear", "far_clear", "far_unclear"): Scenario.DISTANT_UNCERTAIN,
    ("close_clear", "close_unclear", "far_clear", "far_unclear"):
        Scenario.DISTANT_UNCERTAIN,
}


class TestClassifyScene:
    def test_close_distinct_example(self):
        decision = classify_scene([proposal(10.0, 0.9)], TH)
        assert decision.scenario is Scenario.CLOSE_DISTINCT
        assert decision.expert is Expert.LPE
        assert decision.triggering == (0,)

    def test_mixed_far_but_clear(self):
        decision = classify_scene([proposal(30.0, 0.9), proposal(5.0, 0.8)], TH)
        assert decision.scenario is Scenario.MIXED_VISIBILITY
        assert decision.expert is Expert.VEE
        assert decision.triggering == (0,)

    def test_distant_uncertain(self):
        decision = classify_scene([proposal(30.0, 0.3)], TH)
        assert decision.scenario is Scenario.DISTANT_UNCERTAIN
        assert decision.expert is Expert.APE

    def test_empty_scene_routes_cheap(self):
        decision = classify_scene([], TH)
        assert decision.expert is Expert.LPE
        assert decision.triggering == ()

    def test_exhaustive_decision_table(self):
        assert len(EXPECTED) == 15
        for names, scenario in EXPECTED.items():
            scene = [PATTERNS[n] for n in names]
            assert classify_scene(scene, TH).scenario is scenario, names

    def test_rule_precedence_over_orderings(self):
        scene = [PATTERNS[n] for n in PATTERNS]
        for perm in itertools.permutations(range(4)):
            assert classify_scene([scene[i] for i in perm], TH).scenario \
                is Scenario.DISTANT_UNCERTAIN

    def test_adding_far_unclear_forces_distant(self):
        rng = np.random.default_rng(0)
        names = list(PATTERNS)
        for _ in range(20):
            k = int(rng.integers(0, 4))
            scene = [PATTERNS[names[int(i)]] for i in rng.integers(0, 4, size=k)]
            scene.append(proposal(40.0, 0.1))
            assert classify_scene(scene, TH).scenario is Scenario.DISTANT_UNCERTAIN

    def test_boundary_conventions(self):
        # distance >= D counts as far; confidence >= C counts as clear
        at_d = proposal(23.5, 0.5)
        assert classify_scene([at_d], TH).scenario is Scenario.MIXED_VISIBILITY
        just_below = proposal(23.4, 0.5)
        assert classify_scene([just_below], TH).scenario is Scenario.CLOSE_DISTINCT


class TestThresholds:
    def test_validation(self):
        with pytest.raises(ValueError):
            RouteThresholds(0.0, 0.5)
        with pytest.raises(ValueError):
            RouteThresholds(10.0, 1.5)

    def test_decision_mapping_enforced(self):
        with pytest.raises(ValueError):
            RouteDecision(Scenario.CLOSE_DISTINCT, Expert.APE)


class TestEmergency:
    def test_never_fires_is_transparent(self):
        with register_emergency_predicate(lambda proposals: False):
            assert classify_scene([proposal(10, 0.9)], TH).expert is Expert.LPE

    def test_always_fires(self):
        with register_emergency_predicate(lambda proposals: True):
            decision = classify_scene([proposal(10, 0.9)], TH)
            assert decision.scenario is Scenario.EMERGENCY
            assert decision.expert is Expert.EMERGENCY
        # after removal routing is back to normal
        assert classify_scene([proposal(10, 0.9)], TH).expert is Expert.LPE

    def test_proximity_predicate(self):
        def too_close(proposals):
            return any(p.centroid_distance < 2.0 for p in proposals)

        with register_emergency_predicate(too_close):
            assert classify_scene([proposal(1.0, 0.9)], TH).expert is Expert.EMERGENCY
            assert classify_scene([proposal(10.0, 0.9)], TH).expert is Expert.LPE

    def test_double_registration_conflicts(self):
        with register_emergency_predicate(lambda p: False):
            with pytest.raises(EmergencyConflictError):
                register_emergency_predicate(lambda p: False)
        # removal frees the slot
        register_emergency_predicate(lambda p: False).remove()


class TestRouteStatistics:
    def test_empty(self):
        stats = route_statistics([])
        assert stats.total == 0
        assert all(c == 0 for c in stats.counts.values())
        assert all(f == 0.0 for f in stats.fractions.values())

    def test_fractions(self):
        decisions = [RouteDecision.for_scenario(Scenario.CLOSE_DISTINCT)] * 3 \
            + [RouteDecision.for_scenario(Scenario.DISTANT_UNCERTAIN)]
        stats = route_statistics(decisions)
        assert stats.counts[Expert.LPE] == 3
        assert stats.fractions[Expert.LPE] == pytest.approx(0.75)
        assert stats.fractions[Expert.VEE] == 0.0
        assert stats.fractions[Expert.APE] == pytest.approx(0.25)

    def test_matches_naive_tally(self):
        rng = np.random.default_rng(1)
        scenarios = list(Scenario)
        for _ in range(20):
            stream = [RouteDecision.for_scenario(scenarios[int(i)])
                      for i in rng.integers(0, 4, size=int(rng.integers(1, 60)))]
            stats = route_statistics(stream)
            assert stats.total == len(stream)
            for expert in Expert:
                assert stats.counts[expert] == sum(
                    1 for d in stream if d.expert is expert)
            assert abs(sum(stats.fractions.values()) - 1.0) < 1e-12
