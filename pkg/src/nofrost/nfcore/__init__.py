from .layers import (DEFAULT_SWS_EPS, DEFAULT_SWS_GAIN, MixtureBatchNorm2d,
                     RoutingError, ShapeError, SWSConv2d, SWSLinear,
                     mbn_interpolate_logits, scaled_weight_standardize)
from .models import (Interpolate, ModelConfig, NormStrategy, ResidualClassifier,
                     RoutedModel, UnsupportedProbeError, bn_running_stats,
                     count_norm_sites, mbn_interpolate_features)
from .checkpoint import (CheckpointError, load_checkpoint, load_trainer_state,
                         read_metadata, save_checkpoint, save_trainer_state)

__all__ = [
    "DEFAULT_SWS_EPS", "DEFAULT_SWS_GAIN", "MixtureBatchNorm2d", "RoutingError",
    "ShapeError", "SWSConv2d", "SWSLinear", "mbn_interpolate_logits",
    "scaled_weight_standardize", "Interpolate", "ModelConfig", "NormStrategy",
    "ResidualClassifier", "RoutedModel", "UnsupportedProbeError",
    "bn_running_stats", "count_norm_sites", "mbn_interpolate_features",
    "CheckpointError", "load_checkpoint", "load_trainer_state", "read_metadata",
    "save_checkpoint", "save_trainer_state",
]
