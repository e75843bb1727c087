"""Weakly supervised ROI extraction from image-level labels.

A VGG-style classifier yields multiscale Grad-CAM pseudo masks; a UNet is then
trained on them with pixel cross-entropy plus an InfoNCE term on decoder features.
"""

__version__ = "0.1.0"
