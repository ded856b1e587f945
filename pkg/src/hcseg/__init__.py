"""LinkNet-style fetal head segmentation with a small numpy autodiff core."""

from importlib import metadata as _metadata

try:
    __version__ = _metadata.version("artifact")
except _metadata.PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .data import DatasetRecord, SynthSpec, load_hc18, split, synth_generate
from .losses import LossConfig, l_ln, weight_map
from .metrics import MetricsReport, evaluate_set, hausdorff, measure_hc, pixel_dice
from .segnet import NetworkConfig, build_network, count_parameters, load_checkpoint, save_checkpoint
from .tensor import Tensor, backward, gradcheck, high_precision
from .train import TrainConfig, evaluate, train

__all__ = [
    "DatasetRecord",
    "LossConfig",
    "MetricsReport",
    "NetworkConfig",
    "SynthSpec",
    "Tensor",
    "TrainConfig",
    "backward",
    "build_network",
    "count_parameters",
    "evaluate",
    "evaluate_set",
    "gradcheck",
    "hausdorff",
    "high_precision",
    "l_ln",
    "load_checkpoint",
    "load_hc18",
    "measure_hc",
    "pixel_dice",
    "save_checkpoint",
    "split",
    "synth_generate",
    "train",
    "weight_map",
]
