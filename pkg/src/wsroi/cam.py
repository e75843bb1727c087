"""Multiscale Grad-CAM fusion into binary pseudo labels."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .classifier import ActivationBundle, VGGClassifier, class_gradients
from .data import FOREGROUND, Dataset

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class PseudoLabel:
    mask: np.ndarray  # H x W uint8 in {0, 1}
    source_id: str
    threshold_used: float


def _tap(bundle: ActivationBundle, tap: int):
    if not 0 <= tap < bundle.n_taps:
        raise KeyError(f"bundle has no tap {tap} (has {bundle.n_taps})")
    return bundle.activations[tap], bundle.gradients[tap]


def grad_cam_weights(bundle: ActivationBundle, tap: int) -> np.ndarray:
    """Channel weights: spatial mean of the class-score gradient, one per channel."""
    _, grads = _tap(bundle, tap)
    return grads.astype(np.float64).mean(axis=(1, 2))


def grad_cam_map(bundle: ActivationBundle, tap: int, alpha) -> np.ndarray:
    acts, _ = _tap(bundle, tap)
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (acts.shape[0],):
        raise ValueError(f"expected {acts.shape[0]} channel weights, got shape {alpha.shape}")
    cam = np.tensordot(alpha, acts.astype(np.float64), axes=1)
    return np.maximum(cam, 0.0)


def normalize_map(raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def upsample_map(m, target) -> np.ndarray:
    h, w = int(target[0]), int(target[1])
    m = np.asarray(m, dtype=np.float64)
    if m.shape == (h, w):
        return m.copy()
    x = torch.from_numpy(m)[None, None]
    out = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)[0, 0].numpy()
    # interpolation is a convex combination; clip float round-off only
    return np.clip(out, m.min(), m.max())


def merge_maps(maps) -> np.ndarray:
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    if not maps:
        raise ValueError("nothing to merge")
    if any(m.shape != maps[0].shape for m in maps):
        raise ValueError(f"map shapes differ: {[m.shape for m in maps]}")
    return np.clip(sum(maps) / len(maps), 0.0, 1.0)


def binarize(saliency, threshold: float = DEFAULT_THRESHOLD, source_id: str = "") -> PseudoLabel:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    mask = (np.asarray(saliency) >= threshold).astype(np.uint8)
    return PseudoLabel(mask, source_id, float(threshold))


def layer_maps(model: VGGClassifier, image: np.ndarray, class_index: int) -> list[np.ndarray]:
    """Normalised per-tap Grad-CAM maps, upsampled to the image size."""
    bundle = class_gradients(model, image, class_index)
    size = image.shape[:2]
    maps = []
    for t in range(bundle.n_taps):
        raw = grad_cam_map(bundle, t, grad_cam_weights(bundle, t))
        maps.append(upsample_map(normalize_map(raw), size))
    return maps


def merged_saliency(model: VGGClassifier, image: np.ndarray, class_index: int) -> np.ndarray:
    return merge_maps(layer_maps(model, image, class_index))


def generate_pseudo_labels(model: VGGClassifier, dataset: Dataset,
                           threshold: float = DEFAULT_THRESHOLD) -> dict[str, PseudoLabel]:
    """Pseudo label per sample: fused Grad-CAM mask for foreground images, empty for background."""
    if not bool(model.trained):
        raise ValueError("classifier has not been trained")
    size = model.config.input_size
    labels = {}
    for s in dataset:
        if s.image.shape[:2] != (size, size):
            raise ValueError(f"sample {s.id}: image size {s.image.shape[:2]} does not match classifier input {size}")
        if s.class_label == FOREGROUND:
            saliency = merged_saliency(model, s.image, s.class_index)
            labels[s.id] = binarize(saliency, threshold, s.id)
        else:
            labels[s.id] = PseudoLabel(np.zeros(s.image.shape[:2], dtype=np.uint8), s.id, float(threshold))
    return labels
