"""Synthetic scans, scan file IO and segmentation metrics."""
from .metrics import ConfusionMatrix, accumulate, iou
from .scanio import IGNORE, ScanRecord, load_scan, save_scan
from .scene import (CLASS_NAMES, Box, EmptyScanError, Ground, HybridSolid, Pole, SceneSpec,
                    SolidState, Spinning, generate_scan, make_pattern, membership, random_scene)

__all__ = [
    "CLASS_NAMES", "Box", "ConfusionMatrix", "EmptyScanError", "Ground", "HybridSolid", "IGNORE",
    "Pole", "SceneSpec", "ScanRecord", "SolidState", "Spinning", "accumulate", "generate_scan",
    "iou", "load_scan", "make_pattern", "membership", "random_scene", "save_scan",
]
