"""Segment-attentive hierarchical consistency toolkit for online surgical-phase
recognition over precomputed per-frame feature sequences."""

__version__ = "0.1.0"

from .model import ModelConfig, ModelParams, forward, init_model, stream_step, StreamState
from .losses import LossConfig, downsample_labels, total_loss
from .data import FeatureSequence, SyntheticSpec, generate_synthetic, read_sfb, write_sfb
from .training import TrainConfig, load_checkpoint, save_checkpoint, train
from .evaluation import dataset_metrics, online_evaluate, video_metrics

__all__ = [
    "__version__",
    "ModelConfig", "ModelParams", "forward", "init_model", "stream_step", "StreamState",
    "LossConfig", "downsample_labels", "total_loss",
    "FeatureSequence", "SyntheticSpec", "generate_synthetic", "read_sfb", "write_sfb",
    "TrainConfig", "load_checkpoint", "save_checkpoint", "train",
    "dataset_metrics", "online_evaluate", "video_metrics",
]
