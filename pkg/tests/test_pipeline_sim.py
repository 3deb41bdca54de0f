import csv

import numpy as np
import pytest

from voxmoe.errors import PlanError
from voxmoe.pipeline_sim import (PipelineSpec, ThreadStagePlan,
                                 plan_thread_stages, simulate_pipeline,
                                 write_timeline_csv)


class TestSimulatePipeline:
    def test_frozen_example(self):
        assert simulate_pipeline(PipelineSpec(4, 2.0, 3.0, overlap=True)).makespan == 14.0
        assert simulate_pipeline(PipelineSpec(4, 2.0, 3.0, overlap=False)).makespan == 20.0

    def test_single_chunk(self):
        for overlap in (True, False):
            assert simulate_pipeline(
                PipelineSpec(1, 2.0, 3.0, overlap=overlap)).makespan == 5.0

    def test_compute_free_limit(self):
        assert simulate_pipeline(PipelineSpec(5, 2.0, 0.0, overlap=True)).makespan == 10.0

    def test_transfer_free_limit(self):
        assert simulate_pipeline(PipelineSpec(5, 0.0, 2.0, overlap=True)).makespan == 10.0

    def test_closed_forms_for_equal_chunks(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(1, 20))
            t = float(rng.uniform(0, 5))
            c = float(rng.uniform(0, 5))
            overlap = simulate_pipeline(PipelineSpec(n, t, c, overlap=True)).makespan
            serial = simulate_pipeline(PipelineSpec(n, t, c, overlap=False)).makespan
            expect = t + n * c if c >= t else n * t + c
            assert overlap == pytest.approx(expect)
            assert serial == pytest.approx(n * (t + c))
            assert overlap <= serial + 1e-12
            if n == 1 or t == 0 or c == 0:
                assert overlap == pytest.approx(serial)

    def test_heterogeneous_chunk_times(self):
        spec = PipelineSpec(3, (1.0, 4.0, 1.0), (2.0, 1.0, 3.0), overlap=True)
        result = simulate_pipeline(spec)
        events = {e.name: e for e in result.events}
        # transfers are serial on one engine
        assert events["transfer[0]"].end == 1.0
        assert events["transfer[1]"].end == 5.0
        assert events["transfer[2]"].end == 6.0
        # each compute waits for its transfer and the compute engine
        assert events["compute[0]"].start == 1.0
        assert events["compute[1]"].start == 5.0
        assert events["compute[2]"].start == 6.0
        assert result.makespan == 9.0

    def test_event_wellformedness(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            n = int(rng.integers(1, 10))
            spec = PipelineSpec(n, tuple(rng.uniform(0, 3, n)),
                                tuple(rng.uniform(0, 3, n)), overlap=True)
            result = simulate_pipeline(spec)
            per_engine = {"transfer": [], "compute": []}
            for ev in result.events:
                assert ev.end >= ev.start
                per_engine[ev.engine].append(ev)
            for engine_events in per_engine.values():
                for a, b in zip(engine_events, engine_events[1:]):
                    assert b.start >= a.end  # an engine runs one thing at a time
            assert result.makespan == max(e.end for e in result.events)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            PipelineSpec(0, 1.0, 1.0)
        with pytest.raises(ValueError):
            PipelineSpec(2, -1.0, 1.0)
        with pytest.raises(ValueError):
            PipelineSpec(2, (1.0, 2.0, 3.0), 1.0)

    def test_timeline_csv(self, tmp_path):
        result = simulate_pipeline(PipelineSpec(2, 1.0, 2.0, overlap=True))
        path = tmp_path / "timeline.csv"
        write_timeline_csv(path, result.events)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["event", "engine", "start", "end"]
        assert len(rows) == 1 + 4
        assert rows[1][:2] == ["transfer[0]", "transfer"]


class TestThreadStages:
    def test_no_boundaries_everything_resident(self):
        plan = plan_thread_stages([("a", 10), ("b", 20), ("c", 5)])
        assert plan.peak == 35.0
        assert plan.peak == plan.peak_unstaged

    def test_boundary_after_each_stage(self):
        plan = plan_thread_stages([("a", 10), ("b", 10), ("c", 10), ("d", 10)],
                                  boundaries=(1, 2, 3))
        assert plan.peak == 10.0
        assert plan.segment_totals == (10.0, 10.0, 10.0, 10.0)

    def test_hand_example(self):
        plan = plan_thread_stages([("a", 5), ("b", 20), ("c", 5)], boundaries=(2,))
        assert plan.segment_totals == (25.0, 5.0)
        assert plan.peak == 25.0

    def test_boundary_validation(self):
        with pytest.raises(PlanError):
            plan_thread_stages([("a", 1), ("b", 1)], boundaries=(0,))
        with pytest.raises(PlanError):
            plan_thread_stages([("a", 1), ("b", 1)], boundaries=(2,))
        with pytest.raises(PlanError):
            plan_thread_stages([("a", 1), ("b", 1), ("c", 1)], boundaries=(2, 2))
        with pytest.raises(PlanError):
            plan_thread_stages([])
        # a single stage with no boundaries is a valid degenerate plan
        assert plan_thread_stages([("a", 1)]).peak == 1.0

    def test_adding_boundaries_never_raises_peak(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            k = int(rng.integers(2, 9))
            stages = [(f"s{i}", float(rng.uniform(0, 100))) for i in range(k)]
            positions = sorted(rng.choice(np.arange(1, k), size=rng.integers(0, k - 1),
                                          replace=False).tolist())
            base = plan_thread_stages(stages, positions).peak
            for extra in range(1, k):
                if extra in positions:
                    continue
                more = sorted(positions + [extra])
                assert plan_thread_stages(stages, more).peak <= base + 1e-12
                break

    def test_default_plan_has_boundary_per_stage(self):
        stages = [(f"s{i}", 10.0) for i in range(5)]
        plan = ThreadStagePlan.with_default_boundaries(stages)
        assert len(plan.boundaries) == 4
        assert plan.evaluate().peak == 10.0
