"""Self-supervised multi-view object segmentation via neural SDF surfaces.

Two hash-encoded signed-distance fields (a bounded foreground field and
a box-bounded background field) are trained against posed photographs by
differentiable volume rendering; per-view alpha masks, decomposed
foreground/background images, and a zero-level-set mesh fall out of the
converged fields.

Typical round trip::

    from sdfseg import SynthSpec, generate, TrainConfig, train, segment_view

    bundle, gt = generate(SynthSpec(views=12))
    result = train(bundle, TrainConfig(iterations=4000))
    masks = segment_view(result.checkpoint, bundle, view_index=0)
"""

from .autodiff import AdamState, ParamStore, Tape, adam_step
from .fields import FieldConfig, FieldOutput, FieldSet, baco_eval, focor_eval, sharpness
from .hashgrid import HashGrid, HashGridConfig, encode, encode_backward, level_resolutions
from .losses import (LossWeights, RayBatch, color_loss, eikonal_loss, mask_loss,
                     sparsity_loss, total_loss)
from .metrics import EvalReport, evaluate
from .rays import Ray, RayBundle
from .renderer import (OccupancyGrid, PixelRender, RaySamples, accumulate,
                       alpha_from_sdf, occupancy_update, render_pixel, render_view)
from .scene import (CameraIntrinsics, CameraPose, NormTransform, SceneBundle,
                    View, load_colmap)
from .segmenter import (SegmentationOutput, SurfaceMesh, extract_mesh,
                        segment_view, threshold_mask)
from .synthetic import SynthGroundTruth, SynthSpec, generate, save_scene, synth_scene
from .trainer import (Checkpoint, TrainConfig, TrainResult, b_trajectory,
                      load_checkpoint, sample_batch, save_checkpoint, train)

__version__ = "0.1.0"

__all__ = [
    "AdamState", "ParamStore", "Tape", "adam_step",
    "FieldConfig", "FieldOutput", "FieldSet", "baco_eval", "focor_eval", "sharpness",
    "HashGrid", "HashGridConfig", "encode", "encode_backward", "level_resolutions",
    "LossWeights", "RayBatch", "color_loss", "eikonal_loss", "mask_loss",
    "sparsity_loss", "total_loss",
    "EvalReport", "evaluate",
    "Ray", "RayBundle",
    "OccupancyGrid", "PixelRender", "RaySamples", "accumulate", "alpha_from_sdf",
    "occupancy_update", "render_pixel", "render_view",
    "CameraIntrinsics", "CameraPose", "NormTransform", "SceneBundle", "View",
    "load_colmap",
    "SegmentationOutput", "SurfaceMesh", "extract_mesh", "segment_view",
    "threshold_mask",
    "SynthGroundTruth", "SynthSpec", "generate", "save_scene", "synth_scene",
    "Checkpoint", "TrainConfig", "TrainResult", "b_trajectory", "load_checkpoint",
    "sample_batch", "save_checkpoint", "train",
]
