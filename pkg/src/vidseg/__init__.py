"""Desk-scale video instance segmentation.

A query-based segmentation model that treats a video as a T x H x W
volume: masked attention over the flattened spatio-temporal grid,
decoupled temporal/spatial sinusoidal positional encodings, and per-query
3D mask prediction. Includes a synthetic moving-shapes dataset, a
set-prediction training loop, spatio-temporal AP evaluation, and a FastAPI
service with a thin CLI client.
"""

from .datagen import ClipDataset, GenConfig, SyntheticClip, generate_clip, make_dataset
from .decoder import (
    DecoderState,
    InstanceResult,
    Model,
    ModelConfig,
    extract_instances,
    load_checkpoint,
    predict_classes,
    predict_masks,
    save_checkpoint,
)
from .loss import Assignment, GroundTruthInstance, LossConfig, hungarian_match, match_cost, set_loss
from .metrics import EvalResult, compute_ap, evaluate_predictions, st_iou
from .posenc import PositionalEncoding, combined_3d, sinusoidal_1d, spatial_2d
from .tensor import Tensor, load_tensor, save_tensor
from .trainer import AdamW, TrainConfig, TrainingDiverged, infer, lr_at, train

__version__ = "0.1.0"
