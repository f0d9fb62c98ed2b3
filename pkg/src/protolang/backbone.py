"""Image encoders and supervised pretraining over base classes."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, DivergenceError, ShapeError

log = logging.getLogger(__name__)

ARCHITECTURES = ("conv4", "resnet12", "resnet18")


@dataclass
class BackboneConfig:
    architecture: str = "conv4"
    resolution: int = 64
    channels: int = 3

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigurationError(f"unknown architecture {self.architecture!r}")

    @property
    def embedding_dim(self) -> int:
        if self.architecture == "conv4":
            side = self.resolution
            for _ in range(4):
                side //= 2
            return 64 * side * side
        return 640 if self.architecture == "resnet12" else 512


def conv_block(in_ch, out_ch):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
        nn.MaxPool2d(2),
    )


class Conv4(nn.Module):
    def __init__(self, in_ch=3, hidden=64):
        super().__init__()
        self.encoder = nn.Sequential(
            conv_block(in_ch, hidden), conv_block(hidden, hidden),
            conv_block(hidden, hidden), conv_block(hidden, hidden),
        )

    def forward(self, x):
        return self.encoder(x).flatten(1)


class _ResBlock12(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False), nn.BatchNorm2d(out_ch), nn.LeakyReLU(0.1),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False), nn.BatchNorm2d(out_ch), nn.LeakyReLU(0.1),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False), nn.BatchNorm2d(out_ch),
        )
        self.shortcut = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, bias=False), nn.BatchNorm2d(out_ch))
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        return self.pool(F.leaky_relu(self.body(x) + self.shortcut(x), 0.1))


class ResNet12(nn.Module):
    def __init__(self, in_ch=3, widths=(64, 160, 320, 640)):
        super().__init__()
        layers, prev = [], in_ch
        for w in widths:
            layers.append(_ResBlock12(prev, w))
            prev = w
        self.layers = nn.Sequential(*layers)

    def forward(self, x):
        return self.layers(x).mean(dim=(2, 3))


def _resnet18():
    from torchvision.models import resnet18

    net = resnet18(weights=None)
    net.fc = nn.Identity()
    return net


class Backbone(nn.Module):
    """f_theta: images (B, C, H, W) -> embeddings (B, d)."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        if config.architecture == "conv4":
            self.net = Conv4(config.channels)
        elif config.architecture == "resnet12":
            self.net = ResNet12(config.channels)
        else:
            self.net = _resnet18()
        if config.architecture == "conv4":
            self.to(memory_format=torch.channels_last)

    @property
    def embedding_dim(self) -> int:
        return self.config.embedding_dim

    def forward(self, images):
        c, r = self.config.channels, self.config.resolution
        if images.dim() != 4 or tuple(images.shape[1:]) != (c, r, r):
            raise ShapeError(f"expected (B, {c}, {r}, {r}) images, got {tuple(images.shape)}")
        return self.net(images.contiguous(memory_format=torch.channels_last))


def to_tensor(images) -> torch.Tensor:
    """(B, H, W, C) arrays in [0, 1] -> float32 (B, C, H, W) tensor."""
    x = torch.as_tensor(np.asarray(images, dtype=np.float32))
    return x.permute(0, 3, 1, 2).contiguous()


def encode(images, backbone: Backbone, batch_size: int = 256) -> torch.Tensor:
    """Evaluation-mode embeddings without gradient tracking."""
    was_training = backbone.training
    backbone.eval()
    x = images if isinstance(images, torch.Tensor) else to_tensor(images)
    with torch.no_grad():
        out = torch.cat([backbone(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]) if len(x) else \
            torch.zeros(0, backbone.embedding_dim)
    backbone.train(was_training)
    return out


class ClassifierHead(nn.Module):
    """Linear map from embeddings to base-class logits."""

    def __init__(self, embedding_dim: int, n_classes: int):
        super().__init__()
        self.fc = nn.Linear(embedding_dim, n_classes)

    def forward(self, v):
        return self.fc(v)


def pretrain_loss(logits, labels):
    """Mean cross-entropy -log softmax(logits)[label]."""
    return F.cross_entropy(logits, labels)


# --- augmentation -------------------------------------------------------------

class Augmenter:
    """Random crop (pad + shift), color jitter and optional horizontal flip.

    Draws only from its own generator so other random streams stay untouched.
    """

    def __init__(self, seed: int, crop: bool = True, jitter: bool = True, flip: bool = True, pad_frac: float = 0.0625):
        self.gen = torch.Generator().manual_seed(int(seed))
        self.crop, self.jitter, self.flip, self.pad_frac = crop, jitter, flip, pad_frac

    def _u(self, n, lo, hi):
        return lo + (hi - lo) * torch.rand(n, generator=self.gen)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        b, _, h, w = x.shape
        if self.crop:
            pad = max(1, int(round(h * self.pad_frac)))
            padded = F.pad(x, (pad, pad, pad, pad), mode="replicate")
            offs = torch.randint(0, 2 * pad + 1, (b, 2), generator=self.gen)
            x = torch.stack([padded[i, :, oy:oy + h, ox:ox + w] for i, (oy, ox) in enumerate(offs.tolist())])
        if self.jitter:
            bright = self._u(b, 0.8, 1.2).view(b, 1, 1, 1)
            contrast = self._u(b, 0.8, 1.2).view(b, 1, 1, 1)
            sat = self._u(b, 0.8, 1.2).view(b, 1, 1, 1)
            x = x * bright
            mean = x.mean(dim=(1, 2, 3), keepdim=True)
            x = (x - mean) * contrast + mean
            gray = x.mean(dim=1, keepdim=True)
            x = ((x - gray) * sat + gray).clamp(0.0, 1.0)
        if self.flip:
            flip = torch.rand(b, generator=self.gen) < 0.5
            x = torch.where(flip.view(b, 1, 1, 1), x.flip(3), x)
        return x


# --- pretraining --------------------------------------------------------------

@dataclass
class PretrainSchedule:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 100
    batch_size: int = 64
    milestones: tuple[int, ...] = (60, 80)
    gamma: float = 0.1
    augment: bool = True

    def lr_at(self, epoch: int) -> float:
        """Learning rate in effect during (0-based) ``epoch``."""
        return self.lr * self.gamma ** sum(epoch >= m for m in self.milestones)

    def to_dict(self):
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


def pretrain(backbone: nn.Module, head: ClassifierHead, dataset, schedule: PretrainSchedule | None = None,
             seed: int = 0, log_every: int = 10):
    """Cross-entropy pretraining of backbone + linear head on the base split.

    Returns the per-epoch mean training loss curve; the backbone is updated in
    place. ``dataset`` must only contain base classes.
    """
    schedule = schedule or PretrainSchedule()
    splits = set(dataset.split_of[c] for c in np.unique(dataset.labels).tolist())
    if splits != {"base"}:
        raise ConfigurationError(f"pretraining requires a base-only dataset, got splits {sorted(splits)}")
    classes = dataset.classes("base")
    if head.fc.out_features != len(classes):
        raise ConfigurationError("classifier head size must equal the number of base classes")
    remap = {c: i for i, c in enumerate(classes)}
    labels = torch.tensor([remap[int(y)] for y in dataset.labels])
    params = list(backbone.parameters()) + list(head.parameters())
    opt = torch.optim.SGD(params, lr=schedule.lr, momentum=schedule.momentum, weight_decay=schedule.weight_decay)
    aug = Augmenter(seed + 1, jitter=False, flip=dataset.allow_flip) if schedule.augment else None
    order_rng = np.random.default_rng(seed)
    images = to_tensor(dataset.take(np.arange(len(dataset))))
    curve = []
    backbone.train()
    head.train()
    for epoch in range(schedule.epochs):
        for g in opt.param_groups:
            g["lr"] = schedule.lr_at(epoch)
        perm = order_rng.permutation(len(labels))
        total, count = 0.0, 0
        for start in range(0, len(perm), schedule.batch_size):
            idx = torch.as_tensor(perm[start:start + schedule.batch_size])
            x = images[idx]
            if aug is not None:
                x = aug(x)
            loss = pretrain_loss(head(backbone(x)), labels[idx])
            if not torch.isfinite(loss):
                raise DivergenceError(f"pretraining loss became {loss.item()} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        curve.append(total / count)
        if log_every and (epoch % log_every == 0 or epoch == schedule.epochs - 1):
            log.info("pretrain epoch %d lr %.4g loss %.4f", epoch, schedule.lr_at(epoch), curve[-1])
    return curve
