"""Two-encoder, multi-decoder convolutional segmentation network."""
from .network import (AXES, HEAD_TRACK, NetworkConfig, NetworkModel, NonFiniteGradientError,
                      adam_step, backward, forward, loss, tissue_groups)
from .train import (TrainBatch, TrainingDivergedError, epoch_means, extract_slices,
                    from_slices, predict_volume, to_slices, track_targets, train)

__all__ = [
    "AXES", "HEAD_TRACK", "NetworkConfig", "NetworkModel", "NonFiniteGradientError",
    "TrainBatch", "TrainingDivergedError", "adam_step", "backward", "epoch_means",
    "extract_slices", "forward", "from_slices", "loss", "predict_volume", "tissue_groups",
    "to_slices", "track_targets", "train",
]
