"""Texture-attentive convolutional classifier with a verifiable autodiff core."""

from .backbone import Backbone, BackboneConfig, build_backbone
from .data import Dataset, Sample, load_image_folder, preprocess, synth_dataset
from .dcif import DCIF
from .model import ModelConfig, TKFNet, model_config
from .tafe import TAFE
from .tensor import Parameter, ShapeError, Tape, Tensor
from .train import LrSchedule, Metrics, MomentumOptimizer, evaluate, fit, train_epoch
from .weights import read_weights, write_weights

__version__ = "0.1.0"

__all__ = [
    "Backbone",
    "BackboneConfig",
    "build_backbone",
    "Dataset",
    "Sample",
    "load_image_folder",
    "preprocess",
    "synth_dataset",
    "DCIF",
    "ModelConfig",
    "TKFNet",
    "model_config",
    "TAFE",
    "Parameter",
    "ShapeError",
    "Tape",
    "Tensor",
    "LrSchedule",
    "Metrics",
    "MomentumOptimizer",
    "evaluate",
    "fit",
    "train_epoch",
    "read_weights",
    "write_weights",
    "__version__",
]
