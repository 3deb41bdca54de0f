import json
import math

import numpy as np
import pytest

from voxmoe import SparseVoxelTensor, VoxelGridSpec
from voxmoe.amdb import ProposalRegion, SparseConvLayer
from voxmoe.experts import (AffineHead, BevHeadSpec, Detection,
                            VoxelHeadSpec, ape_detect, bev_project,
                            detection_record, lpe_detect, vee_detect,
                            write_detections_jsonl)
from voxmoe.spconv import KernelSpec

GRID = VoxelGridSpec((0.0, 0.0, 0.0), (0.5, 0.5, 0.5), (8, 8, 8))
UNIT_GRID = VoxelGridSpec((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), (8, 8, 8))


def region_for(cells, grid):
    cells = np.asarray(cells).reshape(-1, 3)
    lo = grid.lower_bound() + cells.min(axis=0) * np.asarray(grid.voxel_size)
    hi = grid.lower_bound() + (cells.max(axis=0) + 1) * np.asarray(grid.voxel_size)
    return ProposalRegion(tuple(lo), tuple(hi), 0.9)


def affine(c_in, c_out, fill=0.0):
    return AffineHead(np.full((c_in, c_out), fill), np.zeros(c_out))


class TestDetection:
    def test_simplex_enforced(self):
        with pytest.raises(ValueError):
            Detection([0.5, 0.6], (0, 0, 0), (1, 1, 1), 0.0, 0.5)

    def test_positive_sizes(self):
        with pytest.raises(ValueError):
            Detection([1.0], (0, 0, 0), (1, 0, 1), 0.0, 0.5)


class TestBevProject:
    def test_empty_tensor(self):
        bev = bev_project(SparseVoxelTensor.empty(GRID, 5), [])
        assert not bev.feats.any()

    def test_single_voxel_height(self):
        # height index 5 with 0.5 m cells: center height = 0.25 + 5*0.5
        tensor = SparseVoxelTensor(GRID, [[2, 3, 5]], [[0.4, 1.0, 0, 0, 0]])
        bev = bev_project(tensor, [region_for([[2, 3, 5]], GRID)])
        assert bev.feats[2, 3, 0] == pytest.approx(2.75)
        assert bev.feats[2, 3, 1] == pytest.approx(0.4)
        assert bev.feats[2, 3, 2] == 1.0

    def test_stacked_column_takes_max(self):
        tensor = SparseVoxelTensor(GRID, [[2, 3, 1], [2, 3, 6]],
                                   [[0.2, 1, 0, 0, 0], [0.6, 1, 0, 0, 0]])
        bev = bev_project(tensor, [region_for([[2, 3, 1], [2, 3, 6]], GRID)])
        assert bev.feats[2, 3, 0] == pytest.approx(0.25 + 6 * 0.5)
        assert bev.feats[2, 3, 1] == pytest.approx(0.4)  # mean intensity
        assert bev.feats[2, 3, 2] == 2.0

    def test_outside_regions_zero(self):
        tensor = SparseVoxelTensor(GRID, [[1, 1, 1], [6, 6, 6]],
                                   np.ones((2, 5)))
        bev = bev_project(tensor, [region_for([[1, 1, 1]], GRID)])
        assert bev.feats[1, 1, 2] == 1.0
        assert not bev.feats[6, 6].any()


class TestLpeDetect:
    def spec(self, head_w, head_b, floor=0.6, n_classes=3):
        return BevHeadSpec((), AffineHead(head_w, head_b), n_classes, floor)

    def test_zero_head_uniform_probs_no_detections(self):
        tensor = SparseVoxelTensor(UNIT_GRID, [[1, 1, 1]], np.ones((1, 5)))
        bev = bev_project(tensor, [region_for([[1, 1, 1]], UNIT_GRID)])
        spec = self.spec(np.zeros((3, 5)), np.zeros(5), floor=0.6)
        # objectness logit 0 -> score exactly 0.5, below the 0.6 floor
        assert lpe_detect(bev, spec, tensor) == []

    def test_occupancy_head_detects_occupied_cell(self):
        tensor = SparseVoxelTensor(UNIT_GRID, [[4, 2, 3], [4, 2, 5]],
                                   np.ones((2, 5)))
        bev = bev_project(tensor, [region_for([[4, 2, 3], [4, 2, 5]], UNIT_GRID)])
        head_w = np.zeros((3, 5))
        head_w[2, 3] = 2.0  # occupancy -> objectness
        dets = lpe_detect(bev, self.spec(head_w, np.zeros(5)), tensor)
        assert len(dets) == 1
        det = dets[0]
        assert det.center == (4.5, 2.5, 4.5)   # z spans cells 3..5
        assert det.size == (1.0, 1.0, 3.0)
        assert det.score == pytest.approx(1.0 / (1.0 + math.exp(-4.0)))
        np.testing.assert_allclose(det.class_probs, [1 / 3] * 3)

    def test_empty_bev(self):
        tensor = SparseVoxelTensor.empty(UNIT_GRID, 5)
        bev = bev_project(tensor, [])
        head_w = np.zeros((3, 5))
        head_w[2, 3] = 100.0
        assert lpe_detect(bev, self.spec(head_w, np.zeros(5)), tensor) == []


class TestVeeDetect:
    def identity_spec(self, channels, cls_w=None, box_b=None):
        cls_w = cls_w if cls_w is not None else np.zeros((channels, 3))
        box = AffineHead(np.zeros((channels, 7)),
                         box_b if box_b is not None else np.zeros(7))
        return VoxelHeadSpec((SparseConvLayer(KernelSpec.identity(channels),
                                              "identity"),),
                             AffineHead(cls_w, np.zeros(3)), box)

    def test_no_regions(self):
        tensor = SparseVoxelTensor(UNIT_GRID, [[1, 1, 1]], np.ones((1, 2)))
        assert vee_detect(tensor, [], self.identity_spec(2)) == []

    def test_hand_computed_box_decode(self):
        tensor = SparseVoxelTensor(UNIT_GRID, [[2, 2, 2]], [[1.0, 0.0]])
        box_b = np.array([0.25, -0.25, 0.5, 0.0, math.log(2.0), 0.0, 0.7])
        dets = vee_detect(tensor, [region_for([[2, 2, 2]], UNIT_GRID)],
                          self.identity_spec(2, box_b=box_b))
        assert len(dets) == 1
        det = dets[0]
        # voxel center (2.5, 2.5, 2.5) plus the regressed offset
        assert det.center == pytest.approx((2.75, 2.25, 3.0))
        assert det.size == pytest.approx((1.0, 2.0, 1.0))
        assert det.yaw == pytest.approx(0.7)

    def test_one_detection_per_region_max_score(self):
        tensor = SparseVoxelTensor(UNIT_GRID,
                                   [[1, 1, 1], [1, 1, 2], [6, 6, 6]],
                                   [[0.1, 0], [0.9, 0], [0.5, 0]])
        cls_w = np.zeros((2, 3))
        cls_w[0, 0] = 5.0  # score increases with channel 0
        regions = [region_for([[1, 1, 1], [1, 1, 2]], UNIT_GRID),
                   region_for([[6, 6, 6]], UNIT_GRID)]
        dets = vee_detect(tensor, regions, self.identity_spec(2, cls_w=cls_w))
        assert len(dets) == 2
        # region 1 keeps the 0.9-feature voxel (higher class-0 logit)
        assert dets[0].center[:2] == (1.5, 1.5)
        assert dets[0].center[2] == 2.5
        assert dets[1].center == (6.5, 6.5, 6.5)

    def test_region_without_voxels_yields_nothing(self):
        tensor = SparseVoxelTensor(UNIT_GRID, [[1, 1, 1]], np.ones((1, 2)))
        regions = [region_for([[1, 1, 1]], UNIT_GRID),
                   region_for([[5, 5, 5]], UNIT_GRID)]
        dets = vee_detect(tensor, regions, self.identity_spec(2))
        assert len(dets) == 1

    def test_detection_count_bounded_by_regions(self):
        rng = np.random.default_rng(3)
        from helpers import random_tensor
        tensor = random_tensor(UNIT_GRID, 0.2, 2, rng)
        regions = [region_for([[1, 1, 1], [3, 3, 3]], UNIT_GRID),
                   region_for([[5, 5, 5], [7, 7, 7]], UNIT_GRID)]
        dets = vee_detect(tensor, regions, self.identity_spec(2))
        assert len(dets) <= len(regions)


class TestApeDetect:
    def test_zero_image_channels_equals_vee_exactly(self):
        rng = np.random.default_rng(77)
        n = 12
        keys = np.sort(rng.choice(UNIT_GRID.num_cells, size=n, replace=False))
        from voxmoe.voxels import delinearize_many
        coords = delinearize_many(keys, UNIT_GRID)
        lidar_feats = rng.standard_normal((n, 3))
        c_img = 2
        fused_feats = np.concatenate([lidar_feats, np.zeros((n, c_img))], axis=1)
        lidar = SparseVoxelTensor(UNIT_GRID, coords, lidar_feats)
        fused = SparseVoxelTensor(UNIT_GRID, coords, fused_feats)

        w_l = rng.standard_normal((27, 3, 4))
        vee_spec = VoxelHeadSpec(
            (SparseConvLayer(KernelSpec((3, 3, 3), 3, 4, w_l), "relu"),),
            AffineHead(rng.standard_normal((4, 3)), rng.standard_normal(3)),
            AffineHead(rng.standard_normal((4, 7)), rng.standard_normal(7)))

        # image-channel rows of the first layer zeroed -> identical math
        w_f = np.concatenate([w_l, np.zeros((27, c_img, 4))], axis=1)
        ape_spec = VoxelHeadSpec(
            (SparseConvLayer(KernelSpec((3, 3, 3), 5, 4, w_f), "relu"),),
            vee_spec.class_head, vee_spec.box_head)

        regions = [region_for(coords[:6], UNIT_GRID),
                   region_for(coords[6:], UNIT_GRID)]
        vee_dets = vee_detect(lidar, regions, vee_spec)
        ape_dets = ape_detect(fused, regions, ape_spec)
        assert len(vee_dets) == len(ape_dets) > 0
        for a, b in zip(vee_dets, ape_dets):
            assert np.array_equal(a.class_probs, b.class_probs)
            assert a.center == b.center
            assert a.size == b.size
            assert a.yaw == b.yaw
            assert a.score == b.score

    def test_no_regions(self):
        fused = SparseVoxelTensor(UNIT_GRID, [[0, 0, 0]], np.ones((1, 4)))
        spec = VoxelHeadSpec((), affine(4, 3), affine(4, 7))
        assert ape_detect(fused, [], spec) == []


def test_detection_jsonl(tmp_path):
    det = Detection([0.7, 0.2, 0.1], (1.0, 2.0, 3.0), (1.0, 1.0, 2.0), 0.1, 0.9)
    record = detection_record(det, ["car", "pedestrian", "cyclist"], "lpe")
    assert record["class"] == "car"
    assert record["expert"] == "lpe"
    path = tmp_path / "dets.jsonl"
    write_detections_jsonl(path, [det, det], ["car", "ped", "cyc"], "vee")
    lines = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(lines) == 2
    assert lines[0]["score"] == pytest.approx(0.9)
    assert lines[0]["center"] == [1.0, 2.0, 3.0]
