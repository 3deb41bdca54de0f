import json

import numpy as np
import pytest

from voxmoe import spconv
from voxmoe.fusion import PixelFeatureGrid, save_pixel_grid
from voxmoe.voxels import save_point_cloud


@pytest.fixture(scope="session")
def e2e_workspace(tmp_path_factory):
    """Full pipeline fixture: config, hand-set weights, and three clouds.

    Geometry (grid origin (0, -8, -2), 1 m voxels, extents 32x16x8):

    * ``near.bin``: three points in cell (5, 8, 2), mean intensity 0.9 ->
      proposal confidence sigmoid(5*0.9 - 1.2) ~ 0.964 at ~5.5 m -> LPE.
    * ``far.bin``: two diagonal voxels at ~31 m with intensity 0.2 ->
      confidence sigmoid(-0.2) ~ 0.450 in [0.3, 0.5) -> far+unclear -> APE.
    * ``empty.bin``: empty scene -> LPE.
    * ``image.pxg``: two valid pixels; (v8,u16,d30.5) hits active cell
      (30,8,2), (v8,u17,d31.5) hits inactive in-proposal cell (31,8,2).
    """
    root = tmp_path_factory.mktemp("pipeline")

    ident5 = spconv.KernelSpec.identity(5)
    spconv.save_kernel_weights(root / "lidar_l0.krn", ident5)
    spconv.save_kernel_weights(root / "vee_l0.krn", ident5)
    spconv.save_kernel_weights(root / "ape_l0.krn", spconv.KernelSpec.identity(7))

    (root / "lidar_backbone.json").write_text(json.dumps({
        "layers": [{"weights": "lidar_l0.krn", "activation": "identity"}],
        "head": {"weights": [5.0, 0.0, 0.0, 0.0, 0.0], "bias": -1.2},
    }))

    np.save(root / "img_l0.npy", np.eye(2).reshape(1, 1, 2, 2))
    (root / "image_stack.json").write_text(json.dumps({
        "layers": [{"weights": "img_l0.npy", "activation": "identity"}],
    }))

    lpe_head = np.zeros((3, 5))
    lpe_head[2, 3] = 2.0  # occupancy count -> objectness logit
    (root / "lpe.json").write_text(json.dumps({
        "stack": [],
        "head": {"weights": lpe_head.tolist(), "bias": [0.0, 0.0, 0.0, -1.0, 0.0]},
        "n_classes": 3,
        "score_floor": 0.6,
    }))

    cls5 = np.zeros((5, 3))
    cls5[0, 0] = 2.0
    (root / "vee.json").write_text(json.dumps({
        "stack": [{"weights": "vee_l0.krn", "activation": "relu"}],
        "class_head": {"weights": cls5.tolist(), "bias": [0.0, 0.0, 0.0]},
        "box_head": {"weights": np.zeros((5, 7)).tolist(), "bias": [0.0] * 7},
    }))
    cls7 = np.zeros((7, 3))
    cls7[0, 0] = 2.0
    (root / "ape.json").write_text(json.dumps({
        "stack": [{"weights": "ape_l0.krn", "activation": "relu"}],
        "class_head": {"weights": cls7.tolist(), "bias": [0.0, 0.0, 0.0]},
        "box_head": {"weights": np.zeros((7, 7)).tolist(), "bias": [0.0] * 7},
    }))

    (root / "config.json").write_text(json.dumps({
        "grid": {"origin": [0.0, -8.0, -2.0], "voxel_size": [1.0, 1.0, 1.0],
                 "extents": [32, 16, 8]},
        "dispatch": {"distance_d": 23.5, "confidence_c": 0.5},
        "classes": ["car", "pedestrian", "cyclist"],
        "proposal_threshold": 0.3,
        "pooling": {"budget_bytes": 4096},
        "camera": {"fx": 40.0, "fy": 40.0, "cx": 16.0, "cy": 8.0,
                   "rotation": [[0, 0, 1], [1, 0, 0], [0, 1, 0]],
                   "translation": [0.0, 0.0, 0.0]},
        "lidar_backbone": "lidar_backbone.json",
        "image_stack": "image_stack.json",
        "experts": {"lpe": "lpe.json", "vee": "vee.json", "ape": "ape.json"},
        "train": {"base_rate": 0.1, "balanced_sampling": True, "seed": 0},
    }))

    save_point_cloud(root / "near.bin", np.array([
        [5.3, 0.2, 0.3, 0.90],
        [5.5, 0.5, 0.5, 0.85],
        [5.7, 0.8, 0.7, 0.95],
    ]))
    save_point_cloud(root / "far.bin", np.array([
        [30.5, 0.5, 0.5, 0.2],
        [31.5, 1.5, 1.5, 0.2],
    ]))
    (root / "empty.bin").write_bytes(b"")

    feats = np.zeros((16, 32, 2))
    depth = np.zeros((16, 32))
    valid = np.zeros((16, 32), bool)
    feats[8, 16] = [1.0, 2.0]
    depth[8, 16] = 30.5
    valid[8, 16] = True
    feats[8, 17] = [3.0, 4.0]
    depth[8, 17] = 31.5
    valid[8, 17] = True
    save_pixel_grid(root / "image.pxg", PixelFeatureGrid(32, 16, feats, depth, valid))

    return root
