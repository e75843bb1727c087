"""UNet extraction network trained with cross-entropy plus tapped InfoNCE."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .classifier import Standardize, to_batch
from .contrastive import K_MAX, N_MAX, TAU, contrastive_loss_for_tap
from .data import Dataset

log = logging.getLogger(__name__)

TAP_NAMES = ("up1", "up2", "up3")
EPS = 1e-7


@dataclass
class ExtractorConfig:
    input_size: int = 256
    base_width: int = 64
    num_classes: int = 2
    projection_dim: int | None = None  # learned 1x1 projection before the contrastive loss
    norm: str = "batch"  # "batch", "group" or "none" after each conv
    seed: int = 0


@dataclass
class ExtractorTrainConfig:
    lr0: float = 5e-5
    lr_step: int = 20
    lr_gamma: float = 0.5
    batch_size: int = 2
    epochs: int = 100
    tau: float = TAU
    contrastive_enabled: bool = True
    contrastive_taps: tuple[str, ...] = ("up1", "up2")
    n_max: int = N_MAX
    k_max: int = K_MAX
    seed: int = 0

    def __post_init__(self):
        self.contrastive_taps = tuple(self.contrastive_taps)
        bad = [t for t in self.contrastive_taps if t not in TAP_NAMES]
        if bad:
            raise ValueError(f"unknown contrastive taps {bad}; choose from {TAP_NAMES}")
        if not 1 <= len(self.contrastive_taps) <= 2 or len(set(self.contrastive_taps)) != len(self.contrastive_taps):
            raise ValueError("contrastive_taps must name one or two distinct taps")

    def lr_at(self, epoch: int) -> float:
        return self.lr0 * self.lr_gamma ** (epoch // self.lr_step)


NORMS = ("batch", "group", "none")


def norm_layer(kind: str, ch: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(ch)
    if kind == "group":
        return nn.GroupNorm(math.gcd(ch, 8), ch)
    return nn.Identity()


class DoubleConv(nn.Sequential):
    def __init__(self, in_ch, out_ch, norm="batch"):
        bias = norm == "none"
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=bias),
            norm_layer(norm, out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=bias),
            norm_layer(norm, out_ch),
            nn.ReLU(inplace=True),
        )


class Down(nn.Sequential):
    def __init__(self, in_ch, out_ch, norm="batch"):
        super().__init__(nn.MaxPool2d(2), DoubleConv(in_ch, out_ch, norm))


class Up(nn.Module):
    def __init__(self, in_ch, out_ch, norm="batch"):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_ch, in_ch // 2, 2, stride=2)
        self.conv = DoubleConv(in_ch, out_ch, norm)

    def forward(self, x, skip):
        return self.conv(torch.cat([skip, self.up(x)], dim=1))


class UNet(nn.Module):
    def __init__(self, config: ExtractorConfig):
        super().__init__()
        self.config = config
        w = config.base_width
        self.input_norm = Standardize(3)
        n = config.norm
        self.inc = DoubleConv(3, w, n)
        self.down1 = Down(w, 2 * w, n)
        self.down2 = Down(2 * w, 4 * w, n)
        self.down3 = Down(4 * w, 8 * w, n)
        self.down4 = Down(8 * w, 16 * w, n)
        self.up1 = Up(16 * w, 8 * w, n)
        self.up2 = Up(8 * w, 4 * w, n)
        self.up3 = Up(4 * w, 2 * w, n)
        self.up4 = Up(2 * w, w, n)
        self.outc = nn.Conv2d(w, config.num_classes, 1)
        self.tap_channels = {"up1": 8 * w, "up2": 4 * w, "up3": 2 * w}
        self.projections = nn.ModuleDict()
        if config.projection_dim:
            for name, ch in self.tap_channels.items():
                self.projections[name] = nn.Conv2d(ch, config.projection_dim, 1)
        self._init_weights()

    def _init_weights(self):
        g = torch.Generator().manual_seed(self.config.seed)
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                fan_in = m.weight[0].numel() if isinstance(m, nn.Conv2d) else m.weight.shape[0] * 4
                bound = 1.0 / math.sqrt(fan_in)
                with torch.no_grad():
                    m.weight.normal_(0.0, math.sqrt(2.0) * bound, generator=g)
                    if m.bias is not None:
                        m.bias.uniform_(-bound, bound, generator=g)

    def forward_with_taps(self, x):
        x = self.input_norm(x)
        x1 = self.inc(x)
        x2 = self.down1(x1)
        x3 = self.down2(x2)
        x4 = self.down3(x3)
        x5 = self.down4(x4)
        u1 = self.up1(x5, x4)
        u2 = self.up2(u1, x3)
        u3 = self.up3(u2, x2)
        u4 = self.up4(u3, x1)
        return self.outc(u4), {"up1": u1, "up2": u2, "up3": u3}

    def forward(self, x):
        return self.forward_with_taps(x)[0]

    def contrastive_features(self, name, feats):
        return self.projections[name](feats) if name in self.projections else feats


def build_unet(config: ExtractorConfig | None = None) -> UNet:
    config = config or ExtractorConfig()
    if config.input_size < 16 or config.input_size % 16:
        raise ValueError(f"input size {config.input_size} is not divisible by 2^4")
    if config.base_width < 1 or config.num_classes != 2:
        raise ValueError("invalid extractor config")
    if config.norm not in NORMS:
        raise ValueError(f"norm must be one of {NORMS}, got {config.norm!r}")
    return UNet(config)


def _check_input(model: UNet, x: torch.Tensor):
    s = model.config.input_size
    if x.dim() != 4 or x.shape[1] != 3 or tuple(x.shape[2:]) != (s, s):
        raise ValueError(f"expected input of shape (N, 3, {s}, {s}), got {tuple(x.shape)}")


def forward_with_feature_taps(model: UNet, batch):
    """Per-pixel class probabilities (N, 2, H, W) and the up1/up2 decoder taps."""
    x = to_batch(batch, dtype=next(model.parameters()).dtype)
    _check_input(model, x)
    logits, taps = model.forward_with_taps(x)
    return torch.softmax(logits, dim=1), taps["up1"], taps["up2"]


def mask_from_probs(probs: torch.Tensor) -> torch.Tensor:
    """Foreground where P_fg >= P_bg, i.e. argmax with ties going to foreground."""
    return (probs[:, 1] >= probs[:, 0]).to(torch.uint8)


@torch.no_grad()
def foreground_probability(model: UNet, images, batch_size: int = 8) -> np.ndarray:
    model.eval()
    x = to_batch(images, dtype=next(model.parameters()).dtype)
    _check_input(model, x)
    out = [torch.softmax(model(x[i:i + batch_size]), dim=1)[:, 1] for i in range(0, len(x), batch_size)]
    return torch.cat(out).numpy()


@torch.no_grad()
def predict_mask(model: UNet, image) -> np.ndarray:
    model.eval()
    x = to_batch(image, dtype=next(model.parameters()).dtype)
    _check_input(model, x)
    masks = mask_from_probs(torch.softmax(model(x), dim=1)).numpy()
    return masks[0] if np.ndim(image) == 3 else masks


def cross_entropy(probs: torch.Tensor, target: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Mean over pixels of -sum_c onehot(target)_c * log(clamp(P_c))."""
    if probs.dim() != 4 or target.shape != (probs.shape[0],) + tuple(probs.shape[2:]):
        raise ValueError(f"shape mismatch: probs {tuple(probs.shape)} vs target {tuple(target.shape)}")
    p = probs.clamp(eps, 1.0 - eps)
    picked = p.gather(1, target.long().unsqueeze(1)).squeeze(1)
    return -picked.log().mean()


def joint_loss(ce, lq1=0.0, lq2=0.0):
    for v in (ce, lq1, lq2):
        if not bool(torch.isfinite(torch.as_tensor(v)).all()):
            raise ValueError(f"non-finite loss component: {v}")
    return ce + lq1 + lq2


def _step_seed(seed: int, step: int, b: int, t: int) -> int:
    return int(np.random.SeedSequence([seed, step, b, t]).generate_state(1)[0])


def _scalar(v) -> float:
    return v.detach().item() if isinstance(v, torch.Tensor) else float(v)


def _mask_array(label) -> np.ndarray:
    return np.asarray(getattr(label, "mask", label))


@dataclass
class ExtractorHistory:
    rows: list[dict] = field(default_factory=list)

    def column(self, name):
        return [r[name] for r in self.rows]


CSV_COLUMNS = ("epoch", "lr", "ce", "lq1", "lq2", "total")


def train_extractor(model: UNet, dataset: Dataset, pseudo_labels: dict,
                    cfg: ExtractorTrainConfig | None = None) -> tuple[UNet, ExtractorHistory]:
    cfg = cfg or ExtractorTrainConfig()
    missing = [s.id for s in dataset if s.id not in pseudo_labels]
    if missing:
        raise KeyError(f"missing pseudo label for sample(s): {', '.join(missing)}")
    images = dataset.images()
    model.input_norm.fit(images)
    x_all = to_batch(images)
    _check_input(model, x_all[:1])
    y_all = torch.from_numpy(np.stack([_mask_array(pseudo_labels[s.id]) for s in dataset]).astype(np.int64))
    if tuple(y_all.shape[1:]) != tuple(x_all.shape[2:]):
        raise ValueError(f"pseudo label size {tuple(y_all.shape[1:])} does not match images")

    torch.manual_seed(cfg.seed)
    g = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr0)
    caps = (cfg.n_max, cfg.k_max)
    taps_used = cfg.contrastive_taps if cfg.contrastive_enabled else ()
    history = ExtractorHistory()
    n = len(dataset)
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        order = torch.randperm(n, generator=g)
        sums = dict(ce=0.0, lq1=0.0, lq2=0.0, total=0.0)
        n_steps = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits, taps = model.forward_with_taps(x_all[idx])
            probs = torch.softmax(logits, dim=1)
            ce = cross_entropy(probs, y_all[idx])
            pred = mask_from_probs(probs.detach())
            lqs = []
            for t, name in enumerate(taps_used):
                feats = model.contrastive_features(name, taps[name])
                per_image = [contrastive_loss_for_tap(feats[b], pred[b], cfg.tau, caps, _step_seed(cfg.seed, step, b, t))
                             for b in range(len(idx))]
                lqs.append(torch.stack(per_image).mean())
            lqs += [0.0] * (2 - len(lqs))
            total = joint_loss(ce, lqs[0], lqs[1])
            opt.zero_grad()
            total.backward()
            opt.step()
            step += 1
            n_steps += 1
            sums["ce"] += _scalar(ce)
            sums["lq1"] += _scalar(lqs[0])
            sums["lq2"] += _scalar(lqs[1])
            sums["total"] += _scalar(total)
        row = {"epoch": epoch, "lr": lr, **{k: v / n_steps for k, v in sums.items()}}
        history.rows.append(row)
        log.info("extractor epoch %d lr %.2e ce %.4f lq1 %.4f lq2 %.4f", epoch, lr, row["ce"], row["lq1"], row["lq2"])
    model.eval()
    return model, history


def save_extractor(model: UNet, path, train_config: ExtractorTrainConfig | None = None, extra: dict | None = None):
    torch.save({
        "config": asdict(model.config),
        "train_config": asdict(train_config) if train_config else None,
        "state_dict": model.state_dict(),
        **(extra or {}),
    }, path)


def load_extractor(path) -> tuple[UNet, dict]:
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    model = build_unet(ExtractorConfig(**ckpt["config"]))
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model, ckpt
