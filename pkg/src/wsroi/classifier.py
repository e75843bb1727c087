"""VGG19-style scene classifier with Grad-CAM taps."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import CLASS_NAMES, Dataset

log = logging.getLogger(__name__)

NUM_CLASSES = 2
TAP_BLOCKS = (2, 3, 4)  # zero-based: taps end blocks 3, 4 and 5


@dataclass
class ClassifierConfig:
    input_size: int = 256
    widths: tuple[int, ...] = (64, 128, 256, 512, 512)
    convs_per_block: tuple[int, ...] = (2, 2, 4, 4, 4)
    num_classes: int = NUM_CLASSES
    seed: int = 0
    weights: str | None = None  # optional state dict (or checkpoint) to start from

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.convs_per_block = tuple(self.convs_per_block)


@dataclass
class ClassifierTrainConfig:
    epochs: int = 50
    lr: float = 0.01
    batch_size: int = 16
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0


@dataclass
class ClassifierHistory:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)


@dataclass
class ActivationBundle:
    """Tapped activations and d(score[c])/d(activation), channel-first (K, H, W) per tap."""
    activations: list[np.ndarray]
    gradients: list[np.ndarray]
    class_index: int
    scores: np.ndarray | None = None

    def __post_init__(self):
        for a, g in zip(self.activations, self.gradients):
            if a.shape != g.shape:
                raise ValueError(f"activation/gradient shape mismatch: {a.shape} vs {g.shape}")

    @property
    def n_taps(self) -> int:
        return len(self.activations)


class Standardize(nn.Module):
    """Per-channel standardisation with statistics stored as buffers."""

    def __init__(self, channels: int = 3):
        super().__init__()
        self.register_buffer("mean", torch.zeros(channels))
        self.register_buffer("std", torch.ones(channels))

    def fit(self, images: np.ndarray):
        flat = images.reshape(-1, images.shape[-1]).astype(np.float64)
        self.mean.copy_(torch.as_tensor(flat.mean(0)))
        self.std.copy_(torch.as_tensor(np.maximum(flat.std(0), 1e-6)))

    def forward(self, x):
        return (x - self.mean.view(1, -1, 1, 1)) / self.std.view(1, -1, 1, 1)


class VGGClassifier(nn.Module):
    def __init__(self, config: ClassifierConfig):
        super().__init__()
        self.config = config
        self.input_norm = Standardize(3)
        layers, taps = [], []
        in_ch = 3
        for b, (width, n_conv) in enumerate(zip(config.widths, config.convs_per_block)):
            for _ in range(n_conv):
                layers += [nn.Conv2d(in_ch, width, 3, padding=1), nn.ReLU(inplace=False)]
                in_ch = width
            if b in TAP_BLOCKS:
                taps.append(len(layers) - 1)
            layers.append(nn.MaxPool2d(2, 2))
        self.features = nn.Sequential(*layers)
        # flat indices of the tapped ReLUs: (17, 26, 35) for the full VGG19 layout
        self.tap_indices = tuple(taps)
        self.head = nn.Linear(in_ch, config.num_classes)
        self.register_buffer("trained", torch.tensor(False))
        self._init_weights()

    def _init_weights(self):
        g = torch.Generator().manual_seed(self.config.seed)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                fan_out = m.out_channels * m.kernel_size[0] * m.kernel_size[1]
                with torch.no_grad():
                    m.weight.normal_(0.0, (2.0 / fan_out) ** 0.5, generator=g)
                    m.bias.zero_()
            elif isinstance(m, nn.Linear):
                with torch.no_grad():
                    m.weight.normal_(0.0, 0.01, generator=g)
                    m.bias.zero_()

    def forward_with_taps(self, x):
        x = self.input_norm(x)
        taps = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.tap_indices:
                taps.append(x)
        scores = self.head(x.mean(dim=(2, 3)))
        return scores, taps

    def forward(self, x):
        return self.forward_with_taps(x)[0]


def build_classifier(config: ClassifierConfig | None = None) -> VGGClassifier:
    config = config or ClassifierConfig()
    if len(config.widths) != 5 or len(config.convs_per_block) != 5:
        raise ValueError("classifier needs exactly 5 conv blocks")
    if min(config.convs_per_block) < 1 or min(config.widths) < 1:
        raise ValueError("every block needs at least one conv with positive width")
    if config.input_size < 32 or config.input_size % 32:
        raise ValueError(f"input size {config.input_size} is not divisible by 2^5")
    if config.num_classes != NUM_CLASSES:
        raise ValueError("only binary classification is supported")
    model = VGGClassifier(config)
    if config.weights:
        state = torch.load(config.weights, map_location="cpu", weights_only=True)
        model.load_state_dict(state.get("state_dict", state))
    return model


def to_batch(images, dtype=torch.float32) -> torch.Tensor:
    """H x W x 3 array (or a stack of them) -> N x 3 x H x W tensor."""
    if isinstance(images, torch.Tensor):
        return images if images.dim() == 4 else images[None]
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def _check_input(model: VGGClassifier, x: torch.Tensor):
    s = model.config.input_size
    if x.dim() != 4 or x.shape[1] != 3 or tuple(x.shape[2:]) != (s, s):
        raise ValueError(f"expected input of shape (N, 3, {s}, {s}), got {tuple(x.shape)}")


def forward_with_taps(model: VGGClassifier, image):
    """Raw (pre-softmax) class scores and the three tapped activations."""
    x = to_batch(image, dtype=next(model.parameters()).dtype)
    _check_input(model, x)
    return model.forward_with_taps(x)


def class_gradients(model: VGGClassifier, image, class_index: int) -> ActivationBundle:
    if class_index not in range(NUM_CLASSES):
        raise ValueError(f"class index must be 0 or 1, got {class_index}")
    x = to_batch(image, dtype=next(model.parameters()).dtype)
    _check_input(model, x)
    if x.shape[0] != 1:
        raise ValueError("class_gradients expects a single image")
    was_training = model.training
    model.eval()
    with torch.enable_grad():
        scores, taps = model.forward_with_taps(x)
        grads = torch.autograd.grad(scores[0, class_index], taps, allow_unused=True)
    model.train(was_training)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(taps, grads)]
    return ActivationBundle(
        activations=[t[0].detach().cpu().numpy() for t in taps],
        gradients=[g[0].detach().cpu().numpy() for g in grads],
        class_index=class_index,
        scores=scores[0].detach().cpu().numpy(),
    )


def _labels(dataset: Dataset) -> torch.Tensor:
    return torch.tensor([s.class_index for s in dataset], dtype=torch.long)


def train_classifier(model: VGGClassifier, dataset: Dataset,
                     hp: ClassifierTrainConfig | None = None) -> tuple[VGGClassifier, ClassifierHistory]:
    hp = hp or ClassifierTrainConfig()
    labels = _labels(dataset)
    if len(set(labels.tolist())) < NUM_CLASSES:
        raise ValueError("classifier training needs samples of both classes")
    images = dataset.images()
    model.input_norm.fit(images)
    x_all = to_batch(images)
    _check_input(model, x_all[:1])

    torch.manual_seed(hp.seed)
    g = torch.Generator().manual_seed(hp.seed)
    opt = torch.optim.SGD(model.parameters(), lr=hp.lr, momentum=hp.momentum, weight_decay=hp.weight_decay)
    history = ClassifierHistory()
    n = len(labels)
    model.train()
    for epoch in range(hp.epochs):
        order = torch.randperm(n, generator=g)
        total_loss, correct = 0.0, 0
        for start in range(0, n, hp.batch_size):
            idx = order[start:start + hp.batch_size]
            scores = model(x_all[idx])
            loss = F.cross_entropy(scores, labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += loss.item() * len(idx)
            correct += int((scores.argmax(1) == labels[idx]).sum())
        history.loss.append(total_loss / n)
        history.accuracy.append(correct / n)
        log.info("classifier epoch %d loss %.4f acc %.3f", epoch, history.loss[-1], history.accuracy[-1])
    model.eval()
    model.trained.fill_(True)
    return model, history


@torch.no_grad()
def predict_classes(model: VGGClassifier, dataset: Dataset, batch_size: int = 32) -> np.ndarray:
    model.eval()
    x_all = to_batch(dataset.images())
    preds = [model(x_all[i:i + batch_size]).argmax(1) for i in range(0, len(x_all), batch_size)]
    return torch.cat(preds).numpy()


def accuracy(model: VGGClassifier, dataset: Dataset) -> float:
    return float((predict_classes(model, dataset) == _labels(dataset).numpy()).mean())


def save_classifier(model: VGGClassifier, path, extra: dict | None = None):
    torch.save({"config": asdict(model.config), "state_dict": model.state_dict(), **(extra or {})}, path)


def load_classifier(path) -> tuple[VGGClassifier, dict]:
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    model = build_classifier(ClassifierConfig(**{**ckpt["config"], "weights": None}))
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model, ckpt


def class_name(index: int) -> str:
    return CLASS_NAMES[index]
