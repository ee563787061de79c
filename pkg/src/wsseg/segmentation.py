"""Step-3 segmentation on pseudo-labels: positive-weighted BCE, encoder-decoder
models, a training loop over balanced batches, and inference."""

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbones import build_backbone, conv_bn
from .checkpoint import StageCheckpoint, fingerprint, load_checkpoint
from .classifier import image_to_tensor, make_optimizer
from .datasets import IGNORE, AugmentationConfig, BinaryMask, augment, balanced_batches, load_image
from .errors import CheckpointError, ConfigError, ShapeError, TrainingError
from .metrics import ConfusionMatrix, accumulate, miou

ARCHS = ("toy-unet", "unet-like", "aspp-decoder-like")
SEG_BACKBONES = {"toy": "toy-cnn", "resnet50-like": "resnet50-like", "seresnext50-like": "seresnext50-like"}
EPS = 1e-7
POS_WEIGHT_CAP = 100.0


# ---------------------------------------------------------------------------
# loss


def weighted_bce(pred_prob, target, pos_weight=1.0, ignore_index=IGNORE, eps=EPS):
    """Mean over non-ignore pixels of -[pw*y*log p + (1-y)*log(1-p)].

    Works on torch tensors (differentiable) and numpy arrays. All-ignore -> 0.
    """
    if tuple(pred_prob.shape) != tuple(target.shape):
        raise ShapeError(f"prediction {tuple(pred_prob.shape)} vs target {tuple(target.shape)}")
    if isinstance(pred_prob, torch.Tensor):
        target = torch.as_tensor(target, device=pred_prob.device)
        keep = target != ignore_index
        if not keep.any():
            return pred_prob.sum() * 0.0
        p = pred_prob[keep].clamp(eps, 1.0 - eps)
        y = target[keep].to(p.dtype)
        return -(pos_weight * y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()
    p = np.asarray(pred_prob, np.float64)
    t = np.asarray(target)
    keep = t != ignore_index
    if not keep.any():
        return 0.0
    pk = np.clip(p[keep], eps, 1.0 - eps)
    y = t[keep].astype(np.float64)
    return float(-(pos_weight * y * np.log(pk) + (1.0 - y) * np.log(1.0 - pk)).mean())


def weighted_bce_grad(pred_prob, target, pos_weight=1.0, ignore_index=IGNORE, eps=EPS):
    """Closed-form d(weighted_bce)/dp; zero on ignore and on clamped pixels."""
    p = np.asarray(pred_prob, np.float64)
    t = np.asarray(target)
    keep = t != ignore_index
    grad = np.zeros_like(p)
    n = int(keep.sum())
    if n == 0:
        return grad
    y = np.where(keep, t, 0).astype(np.float64)
    inside = keep & (p > eps) & (p < 1.0 - eps)
    g = -(pos_weight * y / np.where(inside, p, 0.5) - (1.0 - y) / np.where(inside, 1.0 - p, 0.5)) / n
    grad[inside] = g[inside]
    return grad


def pos_weight_from_labels(label_grids, num_classes=1, cap=POS_WEIGHT_CAP):
    """negative / positive pixel count over the pseudo-labels, capped."""
    pos = neg = 0
    for lab in label_grids:
        lab = np.asarray(lab)
        known = lab != IGNORE
        fg = known & (lab != 0)
        pos += int(fg.sum())
        neg += int((known & ~fg).sum())
    if pos == 0:
        return float(cap)
    return float(min(cap, neg / pos))


# ---------------------------------------------------------------------------
# models


@dataclass(frozen=True)
class SegmenterSpec:
    arch_id: str = "toy-unet"
    backbone_id: str = "toy"
    num_classes: int = 1
    input_size: int = 512
    in_channels: int = 3

    def __post_init__(self):
        if self.arch_id not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch_id!r}; expected one of {ARCHS}")
        if self.backbone_id not in SEG_BACKBONES:
            raise ConfigError(f"unknown segmenter backbone {self.backbone_id!r}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.input_size < 16:
            raise ConfigError("input_size must be >= 16")


class _Up(nn.Module):
    def __init__(self, cin, cskip, cout):
        super().__init__()
        self.conv = nn.Sequential(conv_bn(cin + cskip, cout), conv_bn(cout, cout))

    def forward(self, x, skip):
        x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        return self.conv(torch.cat([x, skip], dim=1))


class ToyUNet(nn.Module):
    """Four-level U-Net with max-pool downsampling."""

    def __init__(self, in_channels=3, num_classes=1, widths=(16, 32, 64, 96)):
        super().__init__()
        w = widths
        self.enc = nn.ModuleList([nn.Sequential(conv_bn(in_channels, w[0]), conv_bn(w[0], w[0]))] +
                                 [nn.Sequential(conv_bn(w[i - 1], w[i]), conv_bn(w[i], w[i]))
                                  for i in range(1, len(w))])
        self.dec = nn.ModuleList([_Up(w[i], w[i - 1], w[i - 1]) for i in range(len(w) - 1, 0, -1)])
        self.out = nn.Conv2d(w[0], num_classes, 1)
        self.disabled_skips = set()

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.enc):
            if i:
                x = F.max_pool2d(x, 2, ceil_mode=True)
            x = block(x)
            skips.append(x)
        for j, up in enumerate(self.dec):
            level = len(skips) - 2 - j
            skip = skips[level]
            if level in self.disabled_skips:
                skip = torch.zeros_like(skip)
            x = up(x, skip)
        return self.out(x)


class UNetLike(nn.Module):
    """Backbone encoder at stride 32; decoder fuses stage 4..1 skips, then a final x2."""

    def __init__(self, backbone_id, in_channels=3, num_classes=1, dec_width=(256, 128, 64, 32)):
        super().__init__()
        self.encoder = build_backbone(backbone_id, in_channels, output_stride=32)
        ch = self.encoder.channels
        ups, cin = [], ch[4]
        for skip_c, cout in zip(ch[3::-1], dec_width):
            ups.append(_Up(cin, skip_c, cout))
            cin = cout
        self.dec = nn.ModuleList(ups)
        self.final = nn.Sequential(conv_bn(cin, dec_width[-1] // 2), nn.Conv2d(dec_width[-1] // 2, num_classes, 1))
        self.disabled_skips = set()

    def forward(self, x):
        size = x.shape[-2:]
        feats = self.encoder(x)
        y = feats[4]
        for j, up in enumerate(self.dec):
            level = 3 - j
            skip = feats[level]
            if level in self.disabled_skips:
                skip = torch.zeros_like(skip)
            y = up(y, skip)
        y = F.interpolate(y, size=size, mode="bilinear", align_corners=False)
        return self.final(y)


class ASPP(nn.Module):
    def __init__(self, cin, cout, rates=(6, 12, 18)):
        super().__init__()
        self.branches = nn.ModuleList(
            [nn.Sequential(nn.Conv2d(cin, cout, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))] +
            [conv_bn(cin, cout, dilation=r) for r in rates])
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(cin, cout, 1), nn.ReLU(inplace=True))
        self.project = nn.Sequential(nn.Conv2d(cout * (len(rates) + 2), cout, 1, bias=False),
                                     nn.BatchNorm2d(cout), nn.ReLU(inplace=True))

    def forward(self, x):
        outs = [b(x) for b in self.branches]
        outs.append(self.pool(x).expand(-1, -1, *x.shape[-2:]))
        return self.project(torch.cat(outs, dim=1))


class ASPPDecoder(nn.Module):
    """Dilated encoder (stride 16), multi-rate context pooling, stride-4 low-level skip."""

    def __init__(self, backbone_id, in_channels=3, num_classes=1, width=128, low_width=32):
        super().__init__()
        self.encoder = build_backbone(backbone_id, in_channels, output_stride=16)
        ch = self.encoder.channels
        small = backbone_id == "toy-cnn"
        self.aspp = ASPP(ch[4], width, rates=(2, 3, 4) if small else (6, 12, 18))
        self.low = nn.Sequential(nn.Conv2d(ch[1], low_width, 1, bias=False), nn.BatchNorm2d(low_width),
                                 nn.ReLU(inplace=True))
        self.dec = nn.Sequential(conv_bn(width + low_width, width), conv_bn(width, width),
                                 nn.Conv2d(width, num_classes, 1))

    def forward(self, x):
        size = x.shape[-2:]
        feats = self.encoder(x)
        ctx = self.aspp(feats[4])
        low = self.low(feats[1])
        ctx = F.interpolate(ctx, size=low.shape[-2:], mode="bilinear", align_corners=False)
        y = self.dec(torch.cat([ctx, low], dim=1))
        return F.interpolate(y, size=size, mode="bilinear", align_corners=False)


def build_segmenter(spec, seed=0):
    torch.manual_seed(seed)
    bid = SEG_BACKBONES[spec.backbone_id]
    if spec.arch_id == "toy-unet":
        model = ToyUNet(spec.in_channels, spec.num_classes)
    elif spec.arch_id == "unet-like":
        model = UNetLike(bid, spec.in_channels, spec.num_classes)
    else:
        model = ASPPDecoder(bid, spec.in_channels, spec.num_classes)
    model.spec = spec
    return model


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class SegmenterTrainConfig:
    optimizer: str = "sgd-momentum"
    lr: float = 6e-5
    momentum: float = 0.9
    weight_decay: float = 1e-6
    batch_size: int = 48
    input_size: int = 512
    epochs: int = 20
    lr_decay: str = "linear"
    positive_fraction: float = 0.25
    pos_weight: float | None = None  # None: derived from the pseudo-labels
    seed: int = 0
    augmentation: AugmentationConfig = field(
        default_factory=lambda: AugmentationConfig((1.0, 1.0), 0.0, 0.0, 0.0, 0.5))

    def __post_init__(self):
        make_optimizer(self.optimizer, [torch.zeros(1, requires_grad=True)], 1e-3, 0.0)
        if self.lr_decay not in ("linear", "none"):
            raise ConfigError(f"lr_decay must be 'linear' or 'none', got {self.lr_decay!r}")
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 1 and batch_size >= 2")


def _targets(labels, num_classes):
    """(k, H, W) binary targets per foreground class; ignore stays ignore."""
    labels = np.asarray(labels)
    out = np.stack([(labels == c + 1).astype(np.uint8) for c in range(num_classes)])
    out[:, labels == IGNORE] = IGNORE
    return out


def _label_grid(pseudo):
    return np.asarray(getattr(pseudo, "labels", pseudo))


def _resize_pair(image, labels, size):
    if image.shape[0] == size and image.shape[1] == size:
        return image, labels
    import cv2

    img = cv2.resize(image, (size, size), interpolation=cv2.INTER_LINEAR)
    lab = None if labels is None else cv2.resize(labels, (size, size), interpolation=cv2.INTER_NEAREST)
    return img, lab


@torch.no_grad()
def predict_probabilities(model, images, batch_size=16):
    """(N, k, H, W) sigmoid probabilities at each image's own size."""
    model.eval()
    size = model.spec.input_size
    out = []
    for s in range(0, len(images), batch_size):
        chunk = images[s:s + batch_size]
        x = torch.stack([image_to_tensor(_resize_pair(np.asarray(im), None, size)[0]) for im in chunk])
        prob = torch.sigmoid(model(x))
        h, w = np.asarray(chunk[0]).shape[:2]
        if prob.shape[-2:] != (h, w):
            prob = F.interpolate(prob, size=(h, w), mode="bilinear", align_corners=False)
        out.append(prob.double().numpy())
    return np.concatenate(out) if out else np.zeros((0,))


def labels_from_probabilities(prob, threshold=0.5):
    """(k, H, W) -> label grid: argmax class + 1 where its probability >= threshold, else 0."""
    prob = np.asarray(prob)
    if prob.shape[0] == 1:
        return (prob[0] >= threshold).astype(np.uint8)
    best = prob.argmax(axis=0)
    return np.where(prob.max(axis=0) >= threshold, best + 1, 0).astype(np.uint8)


def pseudo_miou(model, images, label_grids, num_classes, threshold=0.5):
    cm = ConfusionMatrix.empty(num_classes + 1)
    probs = predict_probabilities(model, images)
    for p, lab in zip(probs, label_grids):
        cm = accumulate(cm, labels_from_probabilities(p, threshold), np.asarray(lab))
    return miou(cm)


def train_segmenter(spec, pseudo_labels, index, optim_cfg=None, log_path=None, config_fingerprint=None):
    """Train on pseudo-labels (image id -> Trimap or label grid) only.

    Batches come from ``balanced_batches`` over image-level labels. Model
    selection uses mIoU against the val-split pseudo-labels (or a held-out
    tenth of the training ids when none exist); true masks are never read.
    """
    cfg = optim_cfg or SegmenterTrainConfig()
    train_ids = [r.id for r in index.split("train") if r.id in pseudo_labels]
    val_ids = [r.id for r in index.split("val") if r.id in pseudo_labels]
    if not train_ids:
        raise TrainingError("no pseudo-labels for training images")
    if not val_ids:
        cut = max(1, len(train_ids) // 10)
        train_ids, val_ids = train_ids[:-cut] or train_ids, train_ids[-cut:]
    train_set = set(train_ids)

    images = {i: load_image(index, index.get(i)) for i in train_ids + val_ids}
    labels = {i: _label_grid(pseudo_labels[i]) for i in train_ids + val_ids}
    pos_weight = cfg.pos_weight if cfg.pos_weight is not None else \
        pos_weight_from_labels([labels[i] for i in train_ids], spec.num_classes)

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = build_segmenter(spec, seed=cfg.seed)
    opt = make_optimizer(cfg.optimizer, model.parameters(), cfg.lr, cfg.weight_decay, cfg.momentum)
    if cfg.lr_decay == "linear":
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda e: max(0.0, 1.0 - e / cfg.epochs))
    else:
        sched = None

    sub = _SubsetIndex(index, train_set)
    n_batches = max(1, math.ceil(len(train_ids) / cfg.batch_size))
    val_imgs = [images[i] for i in val_ids]
    val_labs = [_resize_pair(images[i], labels[i], images[i].shape[0])[1] for i in val_ids]

    best, history = None, []
    log = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            model.train()
            total = seen = 0.0
            for batch in balanced_batches(sub, cfg.batch_size, cfg.positive_fraction,
                                          seed=cfg.seed * 1000 + epoch, num_batches=n_batches):
                xs, ys = [], []
                for i in batch:
                    img, lab = _resize_pair(images[i], labels[i], spec.input_size)
                    img, lab = augment(img, lab, cfg.augmentation, rng)
                    xs.append(image_to_tensor(img))
                    ys.append(torch.from_numpy(_targets(lab, spec.num_classes).astype(np.int64)))
                prob = torch.sigmoid(model(torch.stack(xs)))
                loss = weighted_bce(prob, torch.stack(ys), pos_weight)
                if not torch.isfinite(loss):
                    raise TrainingError("non-finite segmentation loss", epoch=epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(batch)
                seen += len(batch)
            if sched is not None:
                sched.step()
            score = pseudo_miou(model, val_imgs, val_labs, spec.num_classes)
            record = {"epoch": epoch, "loss": total / seen, "val_pseudo_miou": score,
                      "lr": opt.param_groups[0]["lr"], "pos_weight": pos_weight}
            history.append(record)
            if log:
                log.write(json.dumps(record) + "\n")
            if best is None or score > best[1]:
                best = (epoch, score, {k: v.detach().clone() for k, v in model.state_dict().items()})
    finally:
        if log:
            log.close()
    fp = config_fingerprint or fingerprint({"spec": spec, "train": cfg})
    ckpt = StageCheckpoint("segmenter", best[2], fp, best[0], best[1])
    ckpt.history = history
    ckpt.pos_weight = pos_weight
    return ckpt


class _SubsetIndex:
    """Just enough of DatasetIndex for ``balanced_batches`` over selected ids."""

    def __init__(self, index, ids):
        self._records = [r for r in index.split("train") if r.id in ids]

    def split(self, name):
        return self._records if name == "train" else []


# ---------------------------------------------------------------------------
# inference


def load_segmenter(spec, path_or_ckpt, expected_fingerprint=None):
    """Model from a checkpoint; a fingerprint mismatch raises CheckpointError."""
    ckpt = path_or_ckpt
    if not isinstance(ckpt, StageCheckpoint):
        ckpt = load_checkpoint(ckpt, expected_fingerprint, stage="segmenter")
    elif expected_fingerprint is not None and ckpt.config_fingerprint != expected_fingerprint:
        raise CheckpointError(
            f"segmenter fingerprint {ckpt.config_fingerprint} does not match {expected_fingerprint}")
    model = build_segmenter(spec)
    model.load_state_dict(ckpt.weights)
    model.eval()
    model.config_fingerprint = ckpt.config_fingerprint
    return model


def infer(model, image, prob_threshold=0.5, expected_fingerprint=None):
    """BinaryMask for one foreground class, else a label grid (0 = background)."""
    have = getattr(model, "config_fingerprint", None)
    if expected_fingerprint is not None and have != expected_fingerprint:
        raise CheckpointError(f"model fingerprint {have} does not match {expected_fingerprint}")
    prob = predict_probabilities(model, [np.asarray(image)])[0]
    labels = labels_from_probabilities(prob, prob_threshold)
    if prob.shape[0] == 1:
        return BinaryMask.from_array(labels)
    return labels
