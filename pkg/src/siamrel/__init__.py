"""Siamese relation-network tracker with a synthetic benchmark harness."""
from .geometry import BBox, GridSpec, Label, assign_labels, decode_box, encode_regression, iou, iou_loss
from .model import ModelConfig, SiamRelationNet

__all__ = [
    "BBox", "GridSpec", "Label", "assign_labels", "decode_box", "encode_regression", "iou", "iou_loss",
    "ModelConfig", "SiamRelationNet",
]
__version__ = "0.1.0"
