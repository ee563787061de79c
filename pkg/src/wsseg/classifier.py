"""Step-1 multilabel classifier: dilated backbone, three-conv head, DropBlock."""

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbones import BACKBONES, build_backbone
from .checkpoint import StageCheckpoint, fingerprint
from .datasets import AugmentationConfig, augment, load_image
from .errors import ConfigError, TrainingError
from .metrics import multilabel_f1

STAGE_TAGS = ("stage1", "stage2", "stage3", "stage4", "stage5")
HEAD_TAGS = ("head1", "head2", "head3")
LAYER_TAGS = STAGE_TAGS + HEAD_TAGS
# raw convolution output of a head layer, before normalisation and ReLU
CONV_TAGS = tuple(t + ".conv" for t in HEAD_TAGS)
CAPTURE_TAGS = LAYER_TAGS + CONV_TAGS
DEFAULT_CAM_LAYER = "head3.conv"


@dataclass(frozen=True)
class DropBlockConfig:
    block_size: int = 3
    drop_prob: float = 0.1
    apply_stages: tuple = ("head3",)

    def __post_init__(self):
        if self.block_size < 1 or self.block_size % 2 == 0:
            raise ConfigError(f"block_size must be a positive odd integer, got {self.block_size}")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ConfigError(f"drop_prob must lie in [0, 1], got {self.drop_prob}")
        unknown = set(self.apply_stages) - set(LAYER_TAGS)
        if unknown:
            raise ConfigError(f"unknown DropBlock layer tags {sorted(unknown)}")


@dataclass(frozen=True)
class ClassifierSpec:
    backbone_id: str = "toy-cnn"
    num_classes: int = 1
    output_stride: int = 8
    head_channels: int = 64
    dropblock: DropBlockConfig = field(default_factory=DropBlockConfig)
    in_channels: int = 3

    def __post_init__(self):
        if self.backbone_id not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone_id!r}")
        if self.output_stride not in (8, 16, 32):
            raise ConfigError(f"output_stride must be 8, 16 or 32, got {self.output_stride}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")


def dropblock_gamma(drop_prob, block_size, height, width):
    """Seed rate giving an expected dropped fraction of about ``drop_prob``."""
    valid = (height - block_size + 1) * (width - block_size + 1)
    return drop_prob * height * width / (block_size ** 2 * valid)


def dropblock(features, cfg, training, generator=None):
    """Zero random ``block_size`` squares and rescale the survivors.

    Seeds are drawn on the region where a whole block fits; each sample is
    rescaled by (#elements / #kept) so the expected sum is unchanged.
    """
    if not training or cfg.drop_prob == 0.0:
        return features
    n, c, h, w = features.shape
    b = cfg.block_size
    if h < b or w < b:
        raise ConfigError(f"feature map {h}x{w} is smaller than the {b}x{b} block")
    gamma = min(1.0, dropblock_gamma(cfg.drop_prob, b, h, w))
    seeds = (torch.rand((n, c, h - b + 1, w - b + 1), generator=generator, device=features.device) < gamma)
    pad = b // 2
    seeds = F.pad(seeds.to(features.dtype), (pad, pad, pad, pad))
    block = F.max_pool2d(seeds, kernel_size=b, stride=1, padding=pad) if b > 1 else seeds
    keep = 1.0 - block
    kept = keep.flatten(1).sum(1).clamp(min=1.0)
    scale = (keep[0].numel() / kept).view(n, 1, 1, 1)
    return features * keep * scale


class DropBlock(nn.Module):
    def __init__(self, cfg, seed=0):
        super().__init__()
        self.cfg = cfg
        self.generator = torch.Generator().manual_seed(seed)

    def forward(self, x):
        cfg = self.cfg
        side = min(x.shape[-2:])
        if side < cfg.block_size:
            # tiny maps (stride 32 on small inputs): largest odd block that fits
            cfg = dataclasses.replace(cfg, block_size=max(1, side - (1 - side % 2)))
        return dropblock(x, cfg, self.training, self.generator)


class Classifier(nn.Module):
    """Backbone, three conv-BN-ReLU head layers (3x3; 1x1 on toy-cnn), 1x1 scorer, global average pooling."""

    def __init__(self, spec, seed=0):
        super().__init__()
        self.spec = spec
        self.backbone = build_backbone(spec.backbone_id, spec.in_channels, spec.output_stride)
        cin, hc = self.backbone.channels[-1], spec.head_channels
        kh = getattr(self.backbone, "head_kernel", 3)
        self.head = nn.ModuleList([
            nn.Sequential(nn.Conv2d(c, hc, kh, padding=kh // 2, bias=False), nn.BatchNorm2d(hc),
                          nn.ReLU(inplace=True))
            for c in (cin, hc, hc)
        ])
        self.drop = nn.ModuleDict({tag: DropBlock(spec.dropblock, seed + i)
                                   for i, tag in enumerate(spec.dropblock.apply_stages)})
        self.scorer = nn.Conv2d(hc, spec.num_classes, 1)

    @property
    def layer_tags(self):
        return CAPTURE_TAGS

    def _maybe_drop(self, tag, x):
        return self.drop[tag](x) if tag in self.drop else x

    def forward(self, x, capture=None):
        """Logits ``(N, k)``; with ``capture`` set also returns that layer's output."""
        if capture is not None and capture not in CAPTURE_TAGS:
            raise ConfigError(f"unknown layer tag {capture!r}; expected one of {CAPTURE_TAGS}")
        captured = None
        for tag, stage in zip(STAGE_TAGS, self.backbone.stages):
            x = stage(x)
            if tag == capture:
                captured = x
            x = self._maybe_drop(tag, x)
        for tag, layer in zip(HEAD_TAGS, self.head):
            conv, norm, act = layer
            x = conv(x)
            if capture == tag + ".conv":
                captured = x
            x = act(norm(x))
            if tag == capture:
                captured = x
            x = self._maybe_drop(tag, x)
        logits = self.scorer(x).mean(dim=(2, 3))
        return logits if capture is None else (logits, captured)

    def feature_map(self, x):
        return self.forward(x, capture="head3")[1]


def build_classifier(spec, seed=0):
    return Classifier(spec, seed)


def image_to_tensor(image):
    """uint8 HxW or HxWxC -> float CxHxW in [0, 1] with three channels."""
    arr = np.asarray(image, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def load_split_images(index, split):
    return {r.id: load_image(index, r) for r in index.split(split)}


@dataclass(frozen=True)
class ClassifierTrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    weight_decay: float = 1e-4
    momentum: float = 0.9
    threshold: float = 0.5
    seed: int = 0
    augmentation: AugmentationConfig = field(
        default_factory=lambda: AugmentationConfig((1.0, 1.0), 0.0, 0.0, 0.0, 0.5))


def make_optimizer(name, params, lr, weight_decay, momentum=0.9):
    if name in ("sgd", "sgd-momentum"):
        return torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    if name == "adam":
        return torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)
    if name == "radam":
        return torch.optim.RAdam(params, lr=lr, weight_decay=weight_decay)
    raise ConfigError(f"unknown optimizer {name!r}; expected sgd-momentum, adam or radam")


@torch.no_grad()
def predict_probabilities(model, images, batch_size=64):
    model.eval()
    out = []
    for s in range(0, len(images), batch_size):
        x = torch.stack([image_to_tensor(im) for im in images[s:s + batch_size]])
        out.append(torch.sigmoid(model(x)))
    return torch.cat(out).numpy()


def train_classifier(spec, index, train_cfg=None, log_path=None, config_fingerprint=None):
    """Fit on image-level labels with mean per-class BCE; keep the best-val-F1 epoch."""
    cfg = train_cfg or ClassifierTrainConfig()
    train = index.split("train")
    val = index.split("val")
    if not train:
        raise TrainingError("training split is empty")
    if not val:
        raise TrainingError("validation split is empty")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = build_classifier(spec, seed=cfg.seed)
    opt = make_optimizer(cfg.optimizer, model.parameters(), cfg.lr, cfg.weight_decay, cfg.momentum)

    train_imgs = [load_image(index, r) for r in train]
    train_y = torch.tensor([r.labels for r in train], dtype=torch.float32)
    val_imgs = [load_image(index, r) for r in val]
    val_y = np.array([r.labels for r in val])

    best, history = None, []
    log = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            model.train()
            order = rng.permutation(len(train))
            total, seen = 0.0, 0
            for s in range(0, len(order), cfg.batch_size):
                idx = order[s:s + cfg.batch_size]
                x = torch.stack([image_to_tensor(augment(train_imgs[i], None, cfg.augmentation, rng)[0])
                                 for i in idx])
                loss = F.binary_cross_entropy_with_logits(model(x), train_y[idx])
                if not torch.isfinite(loss):
                    raise TrainingError("non-finite classifier loss", epoch=epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                seen += len(idx)
            f1 = multilabel_f1(predict_probabilities(model, val_imgs), val_y, cfg.threshold)
            record = {"epoch": epoch, "loss": total / seen, "val_f1": f1,
                      "dropblock": spec.dropblock.drop_prob}
            history.append(record)
            if log:
                log.write(json.dumps(record) + "\n")
            if best is None or f1 > best[1]:
                best = (epoch, f1, {k: v.detach().clone() for k, v in model.state_dict().items()})
    finally:
        if log:
            log.close()
    fp = config_fingerprint or fingerprint({"spec": spec, "train": cfg})
    ckpt = StageCheckpoint("classifier", best[2], fp, best[0], best[1])
    ckpt.history = history
    return ckpt


def load_classifier(spec, checkpoint):
    model = build_classifier(spec)
    model.load_state_dict(checkpoint.weights)
    model.eval()
    model.config_fingerprint = checkpoint.config_fingerprint
    return model


def feature_size(size, output_stride):
    return math.ceil(size / output_stride)
