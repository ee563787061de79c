"""Step-2 inter-pixel relation network.

A boundary branch and a displacement branch share one backbone. Training pairs
come from Step-1 trimaps; at inference the boundary map bounds a random walk
that spreads CAM seeds over their object.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from . import kernels
from .backbones import build_backbone
from .cam import ActivationMap
from .checkpoint import StageCheckpoint, fingerprint
from .classifier import image_to_tensor, make_optimizer
from .datasets import IGNORE, load_image
from .errors import ConfigError, LossError, ShapeError, TrainingError

STRIDE = 4
POSITIVE, NEGATIVE, NEUTRAL = 1, 0, -1
RELATION_NAMES = {POSITIVE: "positive", NEGATIVE: "negative", NEUTRAL: "neutral"}


def neighbor_offsets(radius, half=True):
    """Offsets (dy, dx) with 0 < dy^2 + dx^2 <= radius^2.

    ``half`` keeps one of each +/- pair (dy > 0, or dy == 0 and dx > 0) so every
    unordered pixel pair appears once.
    """
    if radius < 1:
        raise ConfigError(f"radius must be >= 1, got {radius}")
    out = []
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if 0 < dy * dy + dx * dx <= radius * radius:
                if not half or dy > 0 or (dy == 0 and dx > 0):
                    out.append((dy, dx))
    return np.array(out, dtype=np.int64)


def offset_paths(offsets):
    """Discrete straight paths from (0, 0) to each offset, shape (P, T, 2).

    Points are rounded half-to-even, so the path to -o is the mirror of the path
    to o and path maxima are symmetric in the pair. Short paths are padded by
    repeating their endpoint.
    """
    offsets = np.asarray(offsets, dtype=np.int64).reshape(-1, 2)
    n_max = int(np.abs(offsets).max()) if len(offsets) else 0
    paths = np.zeros((len(offsets), n_max + 1, 2), dtype=np.int64)
    for p, (dy, dx) in enumerate(offsets):
        n = max(abs(dy), abs(dx))
        t = np.arange(n_max + 1).clip(max=n) / max(n, 1)
        paths[p, :, 0] = np.round(dy * t)
        paths[p, :, 1] = np.round(dx * t)
    return paths


# ---------------------------------------------------------------------------
# model


@dataclass(eq=False)
class IrnetOutputs:
    displacement: torch.Tensor  # (N, 2, h, w), feature-grid pixels
    boundary: torch.Tensor  # (N, 1, h, w) in [0, 1]

    def __post_init__(self):
        if self.displacement.dim() == 3:
            self.displacement = self.displacement[None]
        if self.boundary.dim() == 2:
            self.boundary = self.boundary[None, None]
        elif self.boundary.dim() == 3:
            self.boundary = self.boundary[:, None] if self.boundary.shape[0] != 1 else self.boundary[None]
        if self.displacement.shape[1] != 2:
            raise ShapeError(f"displacement needs 2 channels, got {tuple(self.displacement.shape)}")
        if self.displacement.shape[-2:] != self.boundary.shape[-2:]:
            raise ShapeError("displacement and boundary fields differ in size")


def _proj(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 1, bias=False), nn.GroupNorm(4, cout), nn.ReLU(inplace=True))


class IRNet(nn.Module):
    """Both branches read all five backbone stages, resized to the stride-4 grid."""

    def __init__(self, backbone_id="toy-cnn", in_channels=3, output_stride=8, width=32):
        super().__init__()
        self.backbone_id = backbone_id
        self.backbone = build_backbone(backbone_id, in_channels, output_stride)
        chans = list(getattr(self.backbone, "channels", []))
        if len(chans) != 5:
            raise ConfigError(f"IRNet needs a five-stage backbone, {backbone_id} has {len(chans)}")
        self.edge_proj = nn.ModuleList([_proj(c, width) for c in chans])
        self.disp_proj = nn.ModuleList([_proj(c, width) for c in chans])
        self.edge_head = nn.Sequential(
            nn.Conv2d(5 * width, width, 3, padding=1, bias=False), nn.GroupNorm(4, width), nn.ReLU(inplace=True),
            nn.Conv2d(width, 1, 1))
        self.disp_head = nn.Sequential(
            nn.Conv2d(5 * width, width, 3, padding=1, bias=False), nn.GroupNorm(4, width), nn.ReLU(inplace=True),
            nn.Conv2d(width, 2, 1))

    @staticmethod
    def _fuse(feats, projs, size):
        outs = []
        for f, proj in zip(feats, projs):
            f = proj(f)
            if f.shape[-2:] != size:
                f = F.interpolate(f, size=size, mode="bilinear", align_corners=False)
            outs.append(f)
        return torch.cat(outs, dim=1)

    def forward(self, x):
        feats = self.backbone(x)
        size = (math.ceil(x.shape[-2] / STRIDE), math.ceil(x.shape[-1] / STRIDE))
        boundary = torch.sigmoid(self.edge_head(self._fuse(feats, self.edge_proj, size)))
        displacement = self.disp_head(self._fuse(feats, self.disp_proj, size))
        return IrnetOutputs(displacement, boundary)


def build_irnet(backbone_id="toy-cnn", in_channels=3, output_stride=8, width=32, seed=0):
    torch.manual_seed(seed)
    return IRNet(backbone_id, in_channels, output_stride, width)


# ---------------------------------------------------------------------------
# affinity labels


def downsample_labels(labels, stride=STRIDE):
    """Nearest label at each stride cell centre; output size ceil(H / stride)."""
    labels = np.asarray(labels)
    h, w = labels.shape
    ys = np.minimum(np.arange(math.ceil(h / stride)) * stride + stride // 2, h - 1)
    xs = np.minimum(np.arange(math.ceil(w / stride)) * stride + stride // 2, w - 1)
    return labels[np.ix_(ys, xs)]


def _displacement_targets(labels, num_classes):
    """Offsets to the centroid of each pixel's 4-connected same-class component.

    Background pixels target zero displacement; ignore pixels are masked out.
    """
    h, w = labels.shape
    target = np.zeros((2, h, w))
    yy, xx = np.mgrid[:h, :w].astype(np.float64)
    four = ndimage.generate_binary_structure(2, 1)
    for c in range(1, num_classes + 1):
        comp, n = ndimage.label(labels == c, structure=four)
        if n == 0:
            continue
        idx = np.arange(1, n + 1)
        cy = np.asarray(ndimage.mean(yy, comp, idx))
        cx = np.asarray(ndimage.mean(xx, comp, idx))
        on = comp > 0
        target[0][on] = cy[comp[on] - 1] - yy[on]
        target[1][on] = cx[comp[on] - 1] - xx[on]
    return target, labels != IGNORE


@dataclass(eq=False)
class AffinityLabels:
    """Pair relations on a label grid: pixel ``a`` and ``a + offsets[o]``."""

    labels: np.ndarray  # (h, w) grid the pairs were read from
    radius: int
    offsets: np.ndarray  # (O, 2), one per unordered direction
    relation: np.ndarray  # (O, h, w) int8 in {POSITIVE, NEGATIVE, NEUTRAL}
    disp_target: np.ndarray = None
    disp_mask: np.ndarray = None

    @property
    def shape(self):
        return self.labels.shape

    @property
    def n_positive(self):
        return int((self.relation == POSITIVE).sum())

    @property
    def n_negative(self):
        return int((self.relation == NEGATIVE).sum())

    def relation_of(self, a, b):
        """Relation name of pixels ``a`` and ``b`` (order does not matter)."""
        (ay, ax), (by, bx) = a, b
        d = (by - ay, bx - ax)
        hits = np.flatnonzero((self.offsets[:, 0] == d[0]) & (self.offsets[:, 1] == d[1]))
        if not len(hits):
            hits = np.flatnonzero((self.offsets[:, 0] == -d[0]) & (self.offsets[:, 1] == -d[1]))
            if not len(hits):
                raise ShapeError(f"pixels {a} and {b} are not within radius {self.radius}")
            ay, ax = by, bx
        return RELATION_NAMES[int(self.relation[hits[0], ay, ax])]

    @property
    def pairs(self):
        out = []
        for o, y, x in zip(*np.nonzero(self.relation != NEUTRAL)):
            dy, dx = self.offsets[o]
            out.append(((int(y), int(x)), (int(y + dy), int(x + dx)), RELATION_NAMES[int(self.relation[o, y, x])]))
        return out


def affinity_labels_from_trimap(trimap, radius=5, max_pairs=20000, seed=0, num_classes=None):
    """Positive for two confident pixels of one label, negative for two different
    confident labels (background included), neutral when either end is ignore.

    Takes a Trimap or a raw label grid (already at the feature stride). At most
    ``max_pairs`` non-neutral pairs are kept, half negative where possible.
    """
    labels = np.asarray(getattr(trimap, "labels", trimap))
    if num_classes is None:
        num_classes = getattr(trimap, "num_classes", None)
        if num_classes is None:
            known = labels[labels != IGNORE]
            num_classes = int(known.max()) if known.size else 0
    h, w = labels.shape
    offsets = neighbor_offsets(radius)
    relation = np.full((len(offsets), h, w), NEUTRAL, dtype=np.int8)
    for o, (dy, dx) in enumerate(offsets):
        ys = slice(max(0, -dy), min(h, h - dy))
        xs = slice(max(0, -dx), min(w, w - dx))
        la = labels[ys, xs]
        lb = labels[ys.start + dy:ys.stop + dy, xs.start + dx:xs.stop + dx]
        rel = np.where(la == lb, POSITIVE, NEGATIVE).astype(np.int8)
        rel[(la == IGNORE) | (lb == IGNORE)] = NEUTRAL
        relation[o, ys, xs] = rel
    n_pos, n_neg = int((relation == POSITIVE).sum()), int((relation == NEGATIVE).sum())
    if n_pos + n_neg > max_pairs:
        rng = np.random.default_rng(seed)
        keep_neg = min(n_neg, max_pairs // 2)
        keep_pos = min(n_pos, max_pairs - keep_neg)
        keep_neg = min(n_neg, max_pairs - keep_pos)
        for value, keep in ((POSITIVE, keep_pos), (NEGATIVE, keep_neg)):
            flat = np.flatnonzero(relation.ravel() == value)
            drop = rng.permutation(flat)[keep:]
            relation.ravel()[drop] = NEUTRAL
    target, mask = _displacement_targets(labels, num_classes)
    return AffinityLabels(labels, radius, offsets, relation, target, mask)


# ---------------------------------------------------------------------------
# loss


@dataclass(frozen=True)
class IrnetLossConfig:
    boundary_weight: float = 1.0
    displacement_weight: float = 1.0
    negative_margin: float = 1.0
    eps: float = 1e-5


def pair_path_max(boundary, offsets, paths=None):
    """Max boundary along each pair's path; (N, O, h, w). Out-of-grid points read 0."""
    if paths is None:
        paths = offset_paths(offsets)
    n, _, h, w = boundary.shape
    r = int(np.abs(paths).max()) if paths.size else 0
    padded = F.pad(boundary[:, 0], (r, r, r, r))
    dev = boundary.device
    yy = torch.arange(h, device=dev)[None, None, :, None] + r
    xx = torch.arange(w, device=dev)[None, None, None, :] + r
    py = torch.as_tensor(paths[..., 0], device=dev)[:, :, None, None]
    px = torch.as_tensor(paths[..., 1], device=dev)[:, :, None, None]
    gathered = padded[:, yy + py, xx + px]  # (N, O, T, h, w)
    return gathered.amax(dim=2)


def _stack_labels(labels, device, dtype):
    labels = [labels] if isinstance(labels, AffinityLabels) else list(labels)
    offsets = labels[0].offsets
    for lab in labels[1:]:
        if not np.array_equal(lab.offsets, offsets) or lab.shape != labels[0].shape:
            raise ShapeError("affinity labels in one batch must share radius and size")
    rel = torch.as_tensor(np.stack([lab.relation for lab in labels]), device=device)
    target = torch.as_tensor(np.stack([lab.disp_target for lab in labels]), device=device, dtype=dtype)
    mask = torch.as_tensor(np.stack([lab.disp_mask for lab in labels]), device=device)
    return offsets, rel, target, mask


def irnet_loss(outputs, labels, cfg=None, return_parts=False):
    """Boundary term plus displacement term.

    Boundary: affinity = exp(-max boundary on the pair path); cross-entropy
    towards 1 on positive and 0 on negative pairs, each set averaged on its own
    and the present sets averaged. Displacement: L1 pull of position +
    displacement onto the component centroid, plus a hinge keeping the two
    predicted centroids of a negative pair at least ``negative_margin`` apart.
    """
    cfg = cfg or IrnetLossConfig()
    b, d = outputs.boundary, outputs.displacement
    offsets, rel, target, mask = _stack_labels(labels, b.device, b.dtype)
    if tuple(rel.shape[-2:]) != tuple(b.shape[-2:]) or rel.shape[0] != b.shape[0]:
        raise ShapeError(f"labels {tuple(rel.shape)} do not match outputs {tuple(b.shape)}")
    pos, neg = rel == POSITIVE, rel == NEGATIVE
    if not (pos.any() or neg.any()):
        raise LossError("no positive or negative pairs")

    paths = offset_paths(offsets)
    aff = torch.exp(-pair_path_max(b, offsets, paths))
    terms = []
    if pos.any():
        terms.append(-torch.log(aff[pos].clamp(min=cfg.eps)).mean())
    if neg.any():
        terms.append(-torch.log((1.0 - aff[neg]).clamp(min=cfg.eps)).mean())
    boundary_term = sum(terms) / len(terms)

    # displacement: centroid pull
    disp_term = torch.zeros((), dtype=b.dtype, device=b.device)
    if mask.any():
        err = (d - target).abs().sum(dim=1)
        disp_term = err[mask].mean()
    if neg.any():
        n, _, h, w = d.shape
        r = int(np.abs(offsets).max())
        yy, xx = torch.meshgrid(torch.arange(h, dtype=b.dtype), torch.arange(w, dtype=b.dtype), indexing="ij")
        centre = d + torch.stack([yy, xx])[None]
        padded = F.pad(centre, (r, r, r, r))
        gaps = []
        for o, (dy, dx) in enumerate(offsets):
            other = padded[:, :, r + dy:r + dy + h, r + dx:r + dx + w]
            gaps.append((centre - other).abs().sum(dim=1))
        gap = torch.stack(gaps, dim=1)  # (N, O, h, w)
        disp_term = disp_term + F.relu(cfg.negative_margin - gap[neg]).mean()

    total = cfg.boundary_weight * boundary_term + cfg.displacement_weight * disp_term
    if return_parts:
        return total, {"boundary": boundary_term.detach(), "displacement": disp_term.detach()}
    return total


# ---------------------------------------------------------------------------
# propagation


@dataclass(eq=False)
class TransitionMatrix:
    matrix: sp.csr_matrix  # (h*w, h*w), row-stochastic
    shape: tuple  # (h, w)

    def row_sums(self):
        return np.asarray(self.matrix.sum(axis=1)).ravel()


def transition_from_boundary(boundary, beta=8.0, radius=5):
    """Row-stochastic walk over each pixel's radius neighbourhood.

    Edge weight = exp(-max boundary on the path) ** beta divided by the full
    neighbourhood size (self included); the self-loop takes what is left, so
    blocked or off-grid neighbours keep their share at home. Weights are
    symmetric, so the matrix is doubly stochastic.
    """
    boundary = np.ascontiguousarray(boundary, dtype=np.float64)
    if boundary.ndim != 2:
        raise ShapeError(f"boundary must be 2-D, got shape {boundary.shape}")
    if beta < 1:
        raise ConfigError(f"beta must be >= 1, got {beta}")
    h, w = boundary.shape
    n = h * w
    offsets = neighbor_offsets(radius, half=False)
    pm = kernels.path_max(boundary, offset_paths(offsets))  # (P, h, w), inf off-grid
    weights = np.exp(-beta * pm) / (len(offsets) + 1)
    src = np.arange(n).reshape(h, w)
    rows, cols, vals = [], [], []
    for p, (dy, dx) in enumerate(offsets):
        ys = slice(max(0, -dy), min(h, h - dy))
        xs = slice(max(0, -dx), min(w, w - dx))
        if ys.start >= ys.stop or xs.start >= xs.stop:
            continue
        rows.append(src[ys, xs].ravel())
        cols.append(src[ys.start + dy:ys.stop + dy, xs.start + dx:xs.stop + dx].ravel())
        vals.append(weights[p, ys, xs].ravel())
    rows = np.concatenate(rows) if rows else np.zeros(0, np.int64)
    cols = np.concatenate(cols) if cols else np.zeros(0, np.int64)
    vals = np.concatenate(vals) if vals else np.zeros(0)
    off = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    self_loop = 1.0 - np.asarray(off.sum(axis=1)).ravel()
    return TransitionMatrix((off + sp.diags(self_loop)).tocsr(), (h, w))


def random_walk_propagate(amap, transition, steps=16, fg_thresh=0.35):
    """Spread seed values (map > fg_thresh) by ``v <- T^T v``; rescale to max 1.

    ``steps == 0`` returns the input map unchanged.
    """
    values = np.asarray(getattr(amap, "values", amap), dtype=np.float64)
    if steps < 0:
        raise ConfigError(f"steps must be >= 0, got {steps}")
    if values.shape != tuple(transition.shape):
        raise ShapeError(f"map {values.shape} does not match transition grid {transition.shape}")
    if steps == 0:
        out = values.copy()
    else:
        v = np.where(values > fg_thresh, values, 0.0).ravel()
        tt = transition.matrix.T.tocsr()
        for _ in range(steps):
            v = tt @ v
        top = v.max() if v.size else 0.0
        out = (v / top if top > 0 else v).reshape(values.shape)
    if isinstance(amap, ActivationMap):
        return ActivationMap(amap.class_id, out.astype(np.float32), amap.source_resolution, amap.image_id)
    return out


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class IrnetTrainConfig:
    epochs: int = 8
    batch_size: int = 16
    lr: float = 1e-3
    optimizer: str = "adam"
    weight_decay: float = 1e-4
    momentum: float = 0.9
    radius: int = 5
    max_pairs: int = 20000
    seed: int = 0
    loss: IrnetLossConfig = field(default_factory=IrnetLossConfig)


def _labels_for(trimap, cfg, seed):
    grid = downsample_labels(trimap.labels)
    return affinity_labels_from_trimap(grid, cfg.radius, cfg.max_pairs, seed, trimap.num_classes)


@torch.no_grad()
def boundary_pair_accuracy(model, images, labels):
    """Share of non-neutral pairs whose affinity lands on the right side of 0.5."""
    model.eval()
    right = total = 0
    for s in range(0, len(images), 32):
        x = torch.stack([image_to_tensor(im) for im in images[s:s + 32]])
        out = model(x)
        offsets, rel, _, _ = _stack_labels(labels[s:s + 32], out.boundary.device, out.boundary.dtype)
        aff = torch.exp(-pair_path_max(out.boundary, offsets))
        known = rel != NEUTRAL
        right += int(((aff > 0.5) == (rel == POSITIVE))[known].sum())
        total += int(known.sum())
    return right / total if total else 0.0


def train_irnet(model, trimaps, index, train_cfg=None, log_path=None, config_fingerprint=None):
    """Fit both branches on pairs read from ``trimaps`` (image id -> Trimap).

    Validation uses the trimaps of val-split images when present, otherwise the
    last tenth of the training ids. The best-val-accuracy epoch is kept.
    """
    cfg = train_cfg or IrnetTrainConfig()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    train_ids = [r.id for r in index.split("train") if r.id in trimaps]
    val_ids = [r.id for r in index.split("val") if r.id in trimaps]
    if not train_ids:
        raise TrainingError("no trimaps for training images")
    if not val_ids:
        cut = max(1, len(train_ids) // 10)
        train_ids, val_ids = train_ids[:-cut] or train_ids, train_ids[-cut:]

    def prepare(ids):
        imgs = [load_image(index, index.get(i)) for i in ids]
        labs = [_labels_for(trimaps[i], cfg, cfg.seed + k) for k, i in enumerate(ids)]
        return imgs, labs

    train_imgs, train_labs = prepare(train_ids)
    val_imgs, val_labs = prepare(val_ids)
    usable = [k for k, lab in enumerate(train_labs) if lab.n_positive + lab.n_negative > 0]
    if not usable:
        raise TrainingError("no training pairs: every trimap is ignore")
    opt = make_optimizer(cfg.optimizer, model.parameters(), cfg.lr, cfg.weight_decay, cfg.momentum)

    best, history = None, []
    log = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            model.train()
            order = rng.permutation(usable)
            total = seen = 0.0
            for s in range(0, len(order), cfg.batch_size):
                idx = order[s:s + cfg.batch_size]
                x = torch.stack([image_to_tensor(train_imgs[i]) for i in idx])
                try:
                    loss = irnet_loss(model(x), [train_labs[i] for i in idx], cfg.loss)
                except LossError:
                    continue
                if not torch.isfinite(loss):
                    raise TrainingError("non-finite IRNet loss", epoch=epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                seen += len(idx)
            acc = boundary_pair_accuracy(model, val_imgs, val_labs)
            record = {"epoch": epoch, "loss": total / max(seen, 1), "val_pair_acc": acc}
            history.append(record)
            if log:
                log.write(json.dumps(record) + "\n")
            if best is None or acc > best[1]:
                best = (epoch, acc, {k: v.detach().clone() for k, v in model.state_dict().items()})
    finally:
        if log:
            log.close()
    fp = config_fingerprint or fingerprint({"irnet": cfg, "backbone": model.backbone_id})
    ckpt = StageCheckpoint("irnet", best[2], fp, best[0], best[1])
    ckpt.history = history
    return ckpt


def load_irnet(checkpoint, backbone_id="toy-cnn", **kwargs):
    model = build_irnet(backbone_id, **kwargs)
    model.load_state_dict(checkpoint.weights)
    model.eval()
    return model


@torch.no_grad()
def predict_boundary(model, image):
    model.eval()
    out = model(image_to_tensor(image)[None])
    return out.boundary[0, 0].double().numpy()


def propagate_maps(maps, boundary, beta=8.0, radius=5, steps=16, fg_thresh=0.35):
    """Walk every class map over the boundary grid; maps are resized to it first."""
    grid = boundary.shape
    trans = transition_from_boundary(boundary, beta, radius)
    out = []
    for m in maps:
        small = ActivationMap(m.class_id, m.upsample(grid), m.source_resolution, m.image_id)
        out.append(random_walk_propagate(small, trans, steps, fg_thresh))
    return out


def propagate_labels(maps, boundary, size, beta=8.0, radius=5, steps=16, seed_thresh=0.35):
    """Step-2 label grid at ``size``: argmax over propagated background and class maps.

    The background score 1 - max(class maps) is walked like the class maps, so
    leakage of a class seed into the background competes with background mass.
    An image with no maps is all background.
    """
    if not maps:
        return np.zeros(size, np.uint8), []
    grid = boundary.shape
    trans = transition_from_boundary(boundary, beta, radius)
    small = [ActivationMap(m.class_id, m.upsample(grid), m.source_resolution, m.image_id) for m in maps]
    background = 1.0 - np.max([m.values for m in small], axis=0)
    walked = [random_walk_propagate(m, trans, steps, seed_thresh) for m in small]
    bg_walk = random_walk_propagate(background, trans, steps, seed_thresh)
    planes = [ActivationMap(-1, bg_walk.astype(np.float32), size)] + \
        [ActivationMap(m.class_id, m.values, size) for m in walked]
    scores = np.stack([p.upsample(size) for p in planes])
    ids = np.array([0] + [m.class_id + 1 for m in maps], dtype=np.uint8)
    return ids[scores.argmax(axis=0)], walked
