"""voxmoe: sparse-voxel perception toolkit with scenario-routed experts.

Submanifold sparse 3D convolution over voxelized point clouds, LiDAR/image
feature fusion, rule-based expert routing, long-tail training utilities, and
an edge-runtime optimization layer (graph passes, pipeline simulation,
staged-thread memory planning), all verified against brute-force oracles.
"""

__version__ = "0.1.0"

from .backend import ACTIVE_BACKEND, USING_NUMBA
from .voxels import (Point, SparseVoxelTensor, VoxelGridSpec, VoxelizeResult,
                     coord_lookup, delinearize, linearize, load_point_cloud,
                     save_point_cloud, voxelize)
from .spconv import (KernelSpec, OpCount, Rulebook, build_rulebook,
                     dense_conv_oracle, densify, exclusive_prefix_sum,
                     fma_op_count, load_kernel_weights, save_kernel_weights,
                     sparse_conv)
from .fusion import (CameraModel, PixelFeatureGrid, ProjectedFeatures, fuse,
                     load_pixel_grid, multiscale_pool, pick_scale,
                     project_pixels, save_pixel_grid)
from .amdb import (BackboneSpec, ProposalRegion, ScoreHead, SparseConvLayer,
                   image_branch, lidar_branch, load_backbone_spec,
                   load_conv2d_stack, make_proposals)
from .dispatch import (Expert, RouteDecision, RouteStatistics, RouteThresholds,
                       Scenario, classify_scene, register_emergency_predicate,
                       route_statistics)
from .experts import (AffineHead, BevHeadSpec, BevMap, Detection,
                      VoxelHeadSpec, ape_detect, bev_project, lpe_detect,
                      vee_detect, write_detections_jsonl)
from .training import (AdaptiveLrInput, KsResult, SubsetAssignment,
                       SupervisionPlan, adaptive_lr, balanced_probs,
                       build_supervision_plan, cross_entropy, divide_subsets,
                       ks_two_sample, route_loss, smooth_l1, smooth_l1_grad)
from .graphopt import (ComputeGraph, FusePattern, GraphNode,
                       annotate_placement, execute_graph, fuse_graph,
                       load_graph, prune_graph, quantize_graph, save_graph)
from .pipeline_sim import (PipelineEvent, PipelineSpec, SimulationResult,
                           StagePlanResult, ThreadStagePlan,
                           plan_thread_stages, simulate_pipeline,
                           write_timeline_csv)
from .pipeline import PipelineConfig, PipelineResult, load_config, run_pipeline
