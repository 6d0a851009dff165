"""Feature-level multimodal compound-expression recognition."""

from .aggregation import FramePredictions, average_logits, average_probs, majority_vote, sliding_window_ensemble
from .dataio import FeatureSequence, ModalityBundle, load_manifest, read_feature_file, synth_dataset, write_feature_file
from .metrics import MetricsReport, confusion, evaluate, macro_f1, weighted_f1
from .model import ModelConfig, ModelParams, forward, init_params
from .trainer import TrainConfig, TrainLog, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "FeatureSequence", "FramePredictions", "MetricsReport", "ModalityBundle", "ModelConfig", "ModelParams",
    "TrainConfig", "TrainLog", "average_logits", "average_probs", "confusion", "evaluate", "forward",
    "init_params", "load_checkpoint", "load_manifest", "macro_f1", "majority_vote", "read_feature_file",
    "save_checkpoint", "sliding_window_ensemble", "synth_dataset", "train", "weighted_f1", "write_feature_file",
]
