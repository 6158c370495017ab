"""Soft filter pruning for small numpy convolutional networks.

Pruned filters are scaled by a decaying factor each epoch instead of being
zeroed outright; the pruning rate itself can ramp up over training.
"""

from .data import Dataset, load_csv, load_idx, synth_blobs
from .graph import ModelGraph, count_flops, forward, make_arch, make_resnet_cifar, make_toy_cnn
from .prune import FilterMask, PruneConfig, apply_mask, compact, select_mask
from .schedules import DecaySchedule, RateRamp
from .trainer import TrainConfig, Trainer, evaluate, run

__version__ = "0.1.0"

__all__ = [
    "Dataset", "DecaySchedule", "FilterMask", "ModelGraph", "PruneConfig", "RateRamp", "TrainConfig", "Trainer",
    "apply_mask", "compact", "count_flops", "evaluate", "forward", "load_csv", "load_idx", "make_arch",
    "make_resnet_cifar", "make_toy_cnn", "run", "select_mask", "synth_blobs",
]
