"""Multi-frame super-resolution segmentation on simulated sensor stacks.

A numpy library that turns procedural vector scenes into (low-resolution
multi-frame stack, high-resolution label) pairs, trains a small fused
encoder/decoder student on them with a registration-aware focal KLD loss,
and scores the result with segmentation, counting, and height metrics.
"""

from . import arrayio, dataset, loss, metrics, scene, stack, svgplot, tensor, train
from .loss import Alignment, LossConfig, focal_kld, multitask_loss, register_translation, shift_and_crop
from .metrics import (
    CountCalibration,
    EvalReport,
    SweepSpec,
    builtup_area_error,
    calibrate_count_scale,
    count_metrics,
    estimate_count,
    evaluate_model,
    height_error_stats,
    iou_binary,
    miou_sweep,
)
from .model import ModelConfig, Prediction, StudentModel
from .scene import HighResLabelSet, Scene, SceneConfig, SplatSpec, apply_parallax, rasterize_labels, sample_scene, true_count
from .stack import (
    Frame,
    FrameMeta,
    LowResStack,
    StackSimConfig,
    dedup_frames,
    encode_metadata_channels,
    filter_opaque_clouds,
    pad_truncate_stack,
    simulate_stack,
)
from .tensor import MODEL_PRIMITIVES, Precision, TensorNode, apply_primitive, backprop, finite_diff_check
from .train import AdamState, Checkpoint, TrainConfig, adam_step, load_checkpoint, save_checkpoint, train_loop

__version__ = "0.1.0"
