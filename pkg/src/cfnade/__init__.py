"""Neural autoregressive collaborative filtering (CF-NADE) in numpy."""

from .data import RatingDataset, SplitSpec, parse_movielens, split_dataset, transpose
from .loss import CostConfig
from .model import ModelConfig, ParameterSet, init_params, load_checkpoint, parameter_count, save_checkpoint
from .trainer import TrainConfig, train

__all__ = [
    "CostConfig", "ModelConfig", "ParameterSet", "RatingDataset", "SplitSpec", "TrainConfig",
    "init_params", "load_checkpoint", "parameter_count", "parse_movielens", "save_checkpoint",
    "split_dataset", "train", "transpose",
]
__version__ = "0.1.0"
