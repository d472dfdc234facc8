"""Campaign-level conversion count prediction for delayed-feedback bidding."""

from .data import (
    CampaignDataset,
    CampaignSample,
    GeneratorConfig,
    generate_campaigns,
    read_dataset,
    split_dataset,
    write_dataset,
)
from .model import LdacpModel, ModelConfig, TrainConfig
from .tree import BucketTree, SmoothingKernel, build_tree

__version__ = "0.1.0"

__all__ = [
    "BucketTree",
    "CampaignDataset",
    "CampaignSample",
    "GeneratorConfig",
    "LdacpModel",
    "ModelConfig",
    "SmoothingKernel",
    "TrainConfig",
    "build_tree",
    "generate_campaigns",
    "read_dataset",
    "split_dataset",
    "write_dataset",
    "__version__",
]
