"""Grasp detection with rotation-ensembled convolution features, in numpy."""
from .codec import AnchorSet, AngleMode, decode, encode
from .geometry import Grasp, grasp_success, rotated_iou
from .net import GraspNet, NetworkSpec
from .rem import RemConfig
from .train import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AnchorSet", "AngleMode", "Grasp", "GraspNet", "NetworkSpec", "RemConfig", "TrainConfig",
    "decode", "encode", "grasp_success", "load_checkpoint", "rotated_iou", "save_checkpoint",
    "train",
]
