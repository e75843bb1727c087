"""Dataset loading, resizing, synthetic scenes and mask persistence."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

FOREGROUND = "foreground"
BACKGROUND = "background"
CLASS_NAMES = (BACKGROUND, FOREGROUND)  # index == class id used by the networks
SPLITS = ("train", "test")
DEFAULT_SIZE = (256, 256)


@dataclass(frozen=True)
class ImageSample:
    id: str
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    class_label: str
    gt_mask: np.ndarray | None = None  # H x W uint8 in {0, 1}

    @property
    def class_index(self) -> int:
        return CLASS_NAMES.index(self.class_label)


@dataclass(frozen=True)
class Dataset:
    samples: tuple[ImageSample, ...]
    split: str = "train"
    seed: int = 0
    skipped: tuple[str, ...] = field(default=())

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("sample ids must be unique within a dataset")

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def by_id(self) -> dict[str, ImageSample]:
        return {s.id: s for s in self.samples}

    def class_counts(self) -> dict[str, int]:
        return {name: sum(s.class_label == name for s in self.samples) for name in CLASS_NAMES}

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])


def _check_target(target):
    h, w = target
    if int(h) < 1 or int(w) < 1:
        raise ValueError(f"target size must be positive, got {target}")
    return int(h), int(w)


def resize_image(image: np.ndarray, target) -> np.ndarray:
    """Bilinear resize of an H x W x 3 image; output clamped to [0, 1]."""
    h, w = _check_target(target)
    x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).clamp_(0.0, 1.0).numpy()


def nearest_indices(src: int, dst: int) -> np.ndarray:
    return (np.arange(dst) * src) // dst


def resize_mask(mask: np.ndarray, target) -> np.ndarray:
    h, w = _check_target(target)
    mask = np.asarray(mask)
    rows = nearest_indices(mask.shape[0], h)
    cols = nearest_indices(mask.shape[1], w)
    return (mask[np.ix_(rows, cols)] > 0).astype(np.uint8)


def save_mask(mask: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def load_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 127).astype(np.uint8)


def save_image(image: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def _read_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def load_dataset(root, split: str = "train", size=DEFAULT_SIZE, seed: int = 0) -> Dataset:
    """Load ``<root>/<split>/{foreground,background}/*.png`` plus optional ``masks/<id>.png``.

    Samples are ordered by id. Unreadable images are skipped and their ids kept
    in ``Dataset.skipped``.
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    base = Path(root) / split
    if not base.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {base}")
    size = _check_target(size)

    entries = []
    for label in CLASS_NAMES:
        d = base / label
        if d.is_dir():
            entries.extend((p.stem, label, p) for p in sorted(d.glob("*.png")))
    entries.sort(key=lambda e: e[0])

    samples, skipped = [], []
    for sid, label, path in entries:
        try:
            raw = _read_rgb(path)
        except (OSError, UnidentifiedImageError) as exc:
            log.warning("skipping unreadable image %s: %s", path, exc)
            skipped.append(sid)
            continue
        mask = None
        mask_path = base / "masks" / f"{sid}.png"
        if mask_path.exists():
            mask = load_mask(mask_path)
            if mask.shape != raw.shape[:2]:
                raise ValueError(f"sample {sid}: mask shape {mask.shape} != image shape {raw.shape[:2]}")
            mask = resize_mask(mask, size)
        image = raw if raw.shape[:2] == size else resize_image(raw, size)
        samples.append(ImageSample(sid, image.astype(np.float32), label, mask))

    if not samples:
        raise ValueError(f"no samples found under {base}")
    ds = Dataset(tuple(samples), split=split, seed=seed, skipped=tuple(skipped))
    log.info("loaded %s split from %s: %s (skipped %d)", split, root, ds.class_counts(), len(skipped))
    return ds


def save_dataset(dataset: Dataset, root) -> None:
    base = Path(root) / dataset.split
    for s in dataset:
        save_image(s.image, base / s.class_label / f"{s.id}.png")
        if s.gt_mask is not None:
            save_mask(s.gt_mask, base / "masks" / f"{s.id}.png")


def split_dataset(dataset: Dataset, train_fraction: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded split, stratified by class so both splits keep the class balance."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for label in CLASS_NAMES:
        group = [s for s in dataset if s.class_label == label]
        order = rng.permutation(len(group))
        n_train = int(round(train_fraction * len(group)))
        train.extend(group[i] for i in order[:n_train])
        test.extend(group[i] for i in order[n_train:])
    key = lambda s: s.id
    return (
        Dataset(tuple(sorted(train, key=key)), "train", seed),
        Dataset(tuple(sorted(test, key=key)), "test", seed),
    )


# ---------------------------------------------------------------- synthetic scenes


@dataclass
class SynthConfig:
    """Knobs of the synthetic scene generator.

    Background is low-frequency colour noise; foreground regions carry a
    high-frequency block texture, standing in for built-up areas.
    """
    max_regions: int = 3
    min_region_frac: float = 0.15  # region side as a fraction of image side
    max_region_frac: float = 0.4
    smooth_cells: int = 6  # grid resolution of the smooth background noise
    texture_period: int = 4  # pixels per texture cell
    texture_contrast: float = 0.35
    blob_prob: float = 0.5


def _smooth_noise(rng: np.random.Generator, size, cells: int) -> np.ndarray:
    h, w = size
    grid = rng.uniform(0.25, 0.75, size=(cells, cells, 3)).astype(np.float32)
    base = np.full(3, rng.uniform(0.3, 0.6), dtype=np.float32)
    img = resize_image(0.5 * grid + 0.5 * base, (h, w))
    return img + rng.normal(0.0, 0.01, size=img.shape).astype(np.float32)


def _region_mask(rng: np.random.Generator, size, cfg: SynthConfig) -> np.ndarray:
    h, w = size
    rh = int(rng.uniform(cfg.min_region_frac, cfg.max_region_frac) * h)
    rw = int(rng.uniform(cfg.min_region_frac, cfg.max_region_frac) * w)
    rh, rw = max(rh, 2), max(rw, 2)
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    mask = np.zeros((h, w), dtype=bool)
    if rng.random() < cfg.blob_prob:
        yy, xx = np.mgrid[0:rh, 0:rw]
        cy, cx = (rh - 1) / 2, (rw - 1) / 2
        mask[top:top + rh, left:left + rw] = ((yy - cy) / (rh / 2)) ** 2 + ((xx - cx) / (rw / 2)) ** 2 <= 1.0
    else:
        mask[top:top + rh, left:left + rw] = True
    return mask


def _texture(rng: np.random.Generator, size, cfg: SynthConfig) -> np.ndarray:
    h, w = size
    p = cfg.texture_period
    ch, cw = -(-h // p), -(-w // p)
    cells = rng.choice([-1.0, 1.0], size=(ch, cw, 1)) * cfg.texture_contrast
    tint = rng.uniform(-0.1, 0.1, size=(1, 1, 3))
    tex = np.repeat(np.repeat(cells, p, axis=0), p, axis=1)[:h, :w]
    return (tex + tint).astype(np.float32)


def _synth_sample(rng, sid, label, size, cfg):
    image = _smooth_noise(rng, size, cfg.smooth_cells)
    mask = np.zeros(size, dtype=bool)
    if label == FOREGROUND:
        for _ in range(int(rng.integers(1, cfg.max_regions + 1))):
            mask |= _region_mask(rng, size, cfg)
        tex = _texture(rng, size, cfg)
        image = np.where(mask[..., None], image + tex, image)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return ImageSample(sid, image, label, mask.astype(np.uint8))


def synthesize_dataset(seed: int, n: int, size=(128, 128), config: SynthConfig | None = None,
                       split: str = "train") -> Dataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    size = _check_target(size)
    cfg = config or SynthConfig()
    ss = np.random.SeedSequence(seed)
    label_rng = np.random.default_rng(ss.spawn(1)[0])
    labels = np.array([FOREGROUND, BACKGROUND] * (n // 2 + 1))[:n]
    labels = labels[label_rng.permutation(n)]
    samples = []
    for i, child in enumerate(ss.spawn(n)):
        rng = np.random.default_rng(child)
        samples.append(_synth_sample(rng, f"syn_{i:04d}", str(labels[i]), size, cfg))
    return Dataset(tuple(samples), split=split, seed=seed)


def dataset_root_exists(path) -> bool:
    p = Path(path)
    return p.is_dir() and any(os.scandir(p))
