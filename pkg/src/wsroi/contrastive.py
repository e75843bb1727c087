"""Pixel-partitioned InfoNCE on decoder features.

Feature maps are channel-first (C, h, w). Foreground-located vectors become
queries (and their own stop-gradient positive keys); background-located
vectors form the negative queue of the same image.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import nearest_indices

N_MAX = 1024
K_MAX = 4096
TAU = 0.07


@dataclass
class ContrastiveBatch:
    q: torch.Tensor  # N x C, unit rows, carries gradient
    k_plus: torch.Tensor  # N x C, detached
    queue: torch.Tensor  # C x K, unit columns, detached

    def __post_init__(self):
        n, c = self.q.shape
        if self.k_plus.shape != (n, c) or self.queue.dim() != 2 or self.queue.shape[0] != c:
            raise ValueError(
                f"inconsistent shapes q={tuple(self.q.shape)} k_plus={tuple(self.k_plus.shape)} "
                f"queue={tuple(self.queue.shape)}")

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def k(self) -> int:
        return self.queue.shape[1]


def downsample_mask(mask, target) -> torch.Tensor:
    mask = torch.as_tensor(np.asarray(mask) if not isinstance(mask, torch.Tensor) else mask)
    H, W = mask.shape
    h, w = int(target[0]), int(target[1])
    if h > H or w > W or h < 1 or w < 1:
        raise ValueError(f"cannot downsample {H}x{W} mask to {h}x{w}")
    rows = torch.from_numpy(nearest_indices(H, h))
    cols = torch.from_numpy(nearest_indices(W, w))
    return (mask[rows][:, cols] > 0).to(torch.uint8)


def _subsample(idx: torch.Tensor, cap: int, gen: torch.Generator) -> torch.Tensor:
    if idx.numel() <= cap:
        return idx
    keep = torch.randperm(idx.numel(), generator=gen)[:cap]
    return idx[keep.sort().values]


def partition_features(features: torch.Tensor, mask, caps=(N_MAX, K_MAX), seed: int = 0) -> ContrastiveBatch | None:
    """Split a (C, h, w) feature map by a binary (h, w) mask; None if either side is empty."""
    mask = torch.as_tensor(mask)
    if features.dim() != 3 or tuple(mask.shape) != tuple(features.shape[1:]):
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match features {tuple(features.shape)}")
    flat = features.reshape(features.shape[0], -1).t()
    m = mask.reshape(-1) > 0
    fg = torch.nonzero(m).squeeze(1)
    bg = torch.nonzero(~m).squeeze(1)
    if fg.numel() == 0 or bg.numel() == 0:
        return None
    gen = torch.Generator().manual_seed(int(seed))
    fg = _subsample(fg, caps[0], gen)
    bg = _subsample(bg, caps[1], gen)
    q = F.normalize(flat[fg], dim=1)
    queue = F.normalize(flat[bg], dim=1).detach().t()
    return ContrastiveBatch(q=q, k_plus=q.detach(), queue=queue)


def compute_logits(batch: ContrastiveBatch) -> torch.Tensor:
    """N x (K+1) logits; column 0 is the positive pair."""
    l_pos = torch.bmm(batch.q.unsqueeze(1), batch.k_plus.unsqueeze(2)).squeeze(2)
    l_neg = batch.q @ batch.queue
    return torch.cat([l_pos, l_neg], dim=1)


def info_nce(logits: torch.Tensor, tau: float = TAU) -> torch.Tensor:
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = logits / tau
    return (torch.logsumexp(z, dim=1) - z[:, 0]).mean()


def contrastive_loss_for_tap(features: torch.Tensor, pred_mask, tau: float = TAU,
                             caps=(N_MAX, K_MAX), seed: int = 0) -> torch.Tensor:
    mask = downsample_mask(pred_mask, features.shape[1:])
    batch = partition_features(features, mask, caps, seed)
    if batch is None:
        return features.new_zeros(())
    return info_nce(compute_logits(batch), tau)
