"""pointclick: click-driven multi-object 3D point cloud instance segmentation.

Simulated or live user clicks become query vectors, a multi-stage attention
decoder conditioned on learnable semantic prototypes refines them, and one
forward pass yields mutually exclusive instance masks for every clicked
object. Includes synthetic-scene training, metric evaluation with a simulated
corrective-click user, and an interactive HTTP service.
"""

from .geometry import (
    NormalizationTransform,
    PointCloud,
    SpatialIndex,
    build_index,
    knn,
    normalize_cloud,
    voxel_downsample,
)
from .sampling import ClickSet, SamplerConfig, fps, sample_click_candidates, subset_clicks
from .synthdata import CLASS_PALETTE, SceneSpec, generate_scene
from .encoder import EncoderConfig, MultiScaleFeatures, QueryFeatures, encode_queries, encode_scene
from .decoder import DecoderConfig, StageOutput, decode
from .losses import LossWeights, SupervisionTargets, bce_loss, build_targets, ce_loss, dice_loss, total_loss
from .model import ModelConfig, ModelParams, init_model, load_checkpoint, save_checkpoint
from .pipeline import SegmentationResult, finalize, segment
from .training import TrainConfig, grad_check, precache_clicks, train
from .evaluation import EvalProtocol, MetricsReport, evaluate_dataset, iou, map_at, miou_at, noc

__version__ = "0.1.0"
