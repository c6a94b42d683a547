"""Unified multi-task BEV decoder (3D detection + map segmentation) on a numpy autodiff core."""
from .config import RunConfig
from .model import MaskBEV

__all__ = ["MaskBEV", "RunConfig"]
