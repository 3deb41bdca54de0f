"""End-to-end routed detection pipeline and its JSON configuration.

Flow: voxelize -> LiDAR backbone -> proposals -> scene routing -> one expert.
The image branch (feature extraction, pooling, projection, fusion) runs only
when routing selects the multimodal expert; requesting that path without an
image-feature file is an explicit error.  Per-stage wall-clock timings and
sparse-conv op counts are reported alongside the detections.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from typing import Optional, Sequence

import numpy as np

from . import amdb, experts, fusion, spconv, voxels
from .dispatch import Expert, RouteDecision, RouteThresholds, classify_scene
from .errors import MissingModalityError
from .layers import Conv2dLayer


@dataclasses.dataclass
class PipelineConfig:
    grid: voxels.VoxelGridSpec
    thresholds: RouteThresholds
    classes: tuple[str, ...]
    proposal_threshold: float
    lidar_backbone: amdb.BackboneSpec
    lpe: experts.BevHeadSpec
    vee: experts.VoxelHeadSpec
    ape: experts.VoxelHeadSpec
    camera: Optional[fusion.CameraModel] = None
    image_stack: Optional[tuple[Conv2dLayer, ...]] = None
    pool_scale: Optional[int] = None
    pool_budget_bytes: Optional[int] = None
    # training-side parameters (train.* keys), passed through untouched
    train: dict = dataclasses.field(default_factory=dict)


def _resolve(base: str, ref: str) -> str:
    path = ref if os.path.isabs(ref) else os.path.join(base, ref)
    if not os.path.exists(path):
        raise FileNotFoundError(f"config references missing file: {path}")
    return path


def _load_head(base: str, doc: dict) -> experts.AffineHead:
    return experts.AffineHead(amdb._load_vector(base, doc["weights"]),
                              amdb._load_vector(base, doc["bias"]))


def load_bev_head_spec(path) -> experts.BevHeadSpec:
    path = os.fspath(path)
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        doc = json.load(fh)
    stack = []
    for entry in doc.get("stack", []):
        weights = np.load(_resolve(base, entry["weights"])).astype(np.float64)
        bias = entry.get("bias")
        if bias is not None:
            bias = amdb._load_vector(base, bias)
        stack.append(Conv2dLayer(weights, bias, entry.get("activation", "relu")))
    return experts.BevHeadSpec(tuple(stack), _load_head(base, doc["head"]),
                               int(doc["n_classes"]),
                               float(doc.get("score_floor", 0.5)))


def load_voxel_head_spec(path) -> experts.VoxelHeadSpec:
    path = os.fspath(path)
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        doc = json.load(fh)
    stack = []
    for entry in doc.get("stack", []):
        kernel = spconv.load_kernel_weights(_resolve(base, entry["weights"]))
        bias = entry.get("bias")
        if bias is not None:
            kernel = dataclasses.replace(kernel, bias=amdb._load_vector(base, bias))
        stack.append(amdb.SparseConvLayer(kernel, entry.get("activation", "relu")))
    return experts.VoxelHeadSpec(tuple(stack),
                                 _load_head(base, doc["class_head"]),
                                 _load_head(base, doc["box_head"]))


def load_config(path, overrides: Optional[dict] = None) -> PipelineConfig:
    """Load the pipeline configuration; ``overrides`` (flat keys like
    ``dispatch.distance_d``) win over file values."""
    path = os.fspath(path)
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        doc = json.load(fh)

    flat = dict(overrides or {})

    def setting(dotted: str, default=None):
        if dotted in flat and flat[dotted] is not None:
            return flat[dotted]
        cur = doc
        for part in dotted.split("."):
            if not isinstance(cur, dict) or part not in cur:
                return default
            cur = cur[part]
        return cur

    grid_doc = doc["grid"]
    grid = voxels.VoxelGridSpec(tuple(grid_doc["origin"]),
                                tuple(grid_doc["voxel_size"]),
                                tuple(grid_doc["extents"]))
    thresholds = RouteThresholds(float(setting("dispatch.distance_d")),
                                 float(setting("dispatch.confidence_c", 0.5)))

    camera = None
    if "camera" in doc:
        cam = doc["camera"]
        camera = fusion.CameraModel(cam["fx"], cam["fy"], cam["cx"], cam["cy"],
                                    np.asarray(cam["rotation"], np.float64),
                                    np.asarray(cam["translation"], np.float64))

    image_stack = None
    if "image_stack" in doc:
        image_stack = amdb.load_conv2d_stack(_resolve(base, doc["image_stack"]))

    pooling = doc.get("pooling", {})
    return PipelineConfig(
        grid=grid,
        thresholds=thresholds,
        classes=tuple(doc.get("classes", ())),
        proposal_threshold=float(doc.get("proposal_threshold", 0.5)),
        lidar_backbone=amdb.load_backbone_spec(_resolve(base, doc["lidar_backbone"])),
        lpe=load_bev_head_spec(_resolve(base, doc["experts"]["lpe"])),
        vee=load_voxel_head_spec(_resolve(base, doc["experts"]["vee"])),
        ape=load_voxel_head_spec(_resolve(base, doc["experts"]["ape"])),
        camera=camera,
        image_stack=image_stack,
        pool_scale=int(pooling["scale"]) if "scale" in pooling else None,
        pool_budget_bytes=int(pooling["budget_bytes"]) if "budget_bytes" in pooling else None,
        train=dict(doc.get("train", {})),
    )


@dataclasses.dataclass
class PipelineResult:
    detections: list[experts.Detection]
    decision: RouteDecision
    timings: dict[str, float]
    op_counts: dict[str, spconv.OpCount]
    dropped_points: int
    dropped_pixels: int = 0

    def decision_record(self) -> dict:
        return {"scenario": self.decision.scenario.value,
                "expert": self.decision.expert.value,
                "triggering": list(self.decision.triggering)}


def _stack_op_counts(tensor: voxels.SparseVoxelTensor,
                     layers: Sequence[amdb.SparseConvLayer]) -> spconv.OpCount:
    # Submanifold layers share the active set, so one rulebook per kernel
    # size prices every layer of the stack.
    sparse = dense = 0
    books: dict[tuple[int, int, int], spconv.Rulebook] = {}
    for layer in layers:
        size = layer.kernel.size
        if size not in books:
            books[size] = spconv.build_rulebook(tensor, layer.kernel)
        count = spconv.fma_op_count(tensor, layer.kernel, books[size])
        sparse += count.sparse_fmas
        dense += count.dense_fmas
    return spconv.OpCount(sparse, dense)


def _region_subtensor(tensor: voxels.SparseVoxelTensor,
                      proposals) -> voxels.SparseVoxelTensor:
    mask = experts.region_member_mask(tensor, proposals)
    return voxels.SparseVoxelTensor(tensor.grid, tensor.coords[mask],
                                    tensor.feats[mask])


def run_pipeline(cloud_path, image_path, config: PipelineConfig,
                 workers: int = 1) -> PipelineResult:
    """Run the routed pipeline on one point cloud (plus image features for
    the multimodal route).  Raises :class:`MissingModalityError` when routing
    demands the image modality and no file was supplied."""
    timings: dict[str, float] = {}
    op_counts: dict[str, spconv.OpCount] = {}

    def timed(stage: str):
        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timings[stage] = time.perf_counter() - self.t0
        return _Timer()

    with timed("voxelize"):
        points = voxels.load_point_cloud(cloud_path)
        tensor, dropped_points = voxels.voxelize(points, config.grid)

    with timed("lidar_branch"):
        feats, scores = amdb.lidar_branch(tensor, config.lidar_backbone, workers=workers)
    op_counts["lidar_branch"] = _stack_op_counts(
        tensor, config.lidar_backbone.layers)

    with timed("proposals"):
        proposals = amdb.make_proposals(feats, scores, config.proposal_threshold)

    with timed("classify"):
        decision = classify_scene(proposals, config.thresholds)

    dropped_pixels = 0
    if decision.expert is Expert.APE:
        if image_path is None:
            raise MissingModalityError(
                "routing selected the multimodal expert but no image-feature "
                "file was supplied")
        if config.camera is None or config.image_stack is None:
            raise MissingModalityError(
                "multimodal route requires camera and image_stack configuration")
        with timed("image_branch"):
            pixel_grid = fusion.load_pixel_grid(image_path)
            pixel_feats = amdb.image_branch(pixel_grid, config.image_stack)
        with timed("pool"):
            if config.pool_scale is not None:
                scale = config.pool_scale
            elif config.pool_budget_bytes is not None:
                scale = fusion.pick_scale(pixel_feats.width, pixel_feats.height,
                                          pixel_feats.channels,
                                          config.pool_budget_bytes)
            else:
                scale = 1
            pooled = fusion.multiscale_pool(pixel_feats, scale)
        with timed("project"):
            projected = fusion.project_pixels(pooled, config.camera.scaled(scale),
                                              config.grid)
            dropped_pixels = projected.dropped
        with timed("fuse"):
            fused = fusion.fuse(feats, projected, proposals)
        with timed("expert"):
            detections = experts.ape_detect(fused, proposals, config.ape,
                                            workers=workers)
        op_counts["expert"] = _stack_op_counts(
            _region_subtensor(fused, proposals), config.ape.stack)
    elif decision.expert is Expert.VEE:
        with timed("expert"):
            detections = experts.vee_detect(feats, proposals, config.vee,
                                            workers=workers)
        op_counts["expert"] = _stack_op_counts(
            _region_subtensor(feats, proposals), config.vee.stack)
    else:
        # LPE also serves the emergency route: cheapest deterministic path.
        with timed("expert"):
            bev = experts.bev_project(tensor, proposals)
            detections = experts.lpe_detect(bev, config.lpe, tensor)
        op_counts["expert"] = spconv.OpCount(0, 0)

    return PipelineResult(detections, decision, timings, op_counts,
                          dropped_points, dropped_pixels)
