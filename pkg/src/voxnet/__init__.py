"""voxnet: 3-D convolutional networks for structural brain MRI classification.

Two architectures (a plain VGG-style VoxCNN and a residual VoxResNet) are
trained from raw intensity volumes on one-versus-one diagnostic tasks and
evaluated by repeated stratified cross-validation. Occlusion maps show which
regions drive a prediction.
"""

__version__ = "0.1.0"

from . import kernels
from .errors import (
    ConfigError, DataError, NumericalAbort, ShapeError, StateError, TruncationError,
    UndefinedMetricError, VersionError, VoxnetError,
)
from .network import Network, load, save
from .models import build, build_voxcnn, build_voxresnet, describe, load_model, save_model
from .optim import TrainConfig, train
from .data import Dataset, LabeledSample, generate_synthetic, load_dataset, save_dataset
from .evaluation import accuracy, cross_validate, roc_auc
from .attention import occlusion_map, upsample_map

__all__ = [
    "kernels", "ConfigError", "DataError", "NumericalAbort", "ShapeError", "StateError",
    "TruncationError", "UndefinedMetricError", "VersionError", "VoxnetError",
    "Network", "load", "save", "build", "build_voxcnn", "build_voxresnet", "describe",
    "load_model", "save_model", "TrainConfig", "train", "Dataset", "LabeledSample",
    "generate_synthetic", "load_dataset", "save_dataset", "accuracy", "cross_validate",
    "roc_auc", "occlusion_map", "upsample_map",
]
