"""Activation maps to training trimaps: thresholds, dense CRF, small-region filtering.

Trimap labels: 0 background, ``c + 1`` for class ``c``, 255 ignore.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import kernels
from .datasets import IGNORE
from .errors import ConfigError, ShapeError, ValidationError

BACKGROUND = 0
# exact kernel matrices up to this many pixels are cached across iterations
_CACHE_PIXELS = 4096


@dataclass(frozen=True, eq=False)
class Trimap:
    labels: np.ndarray  # (h, w) uint8
    num_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.uint8)
        bad = (labels > self.num_classes) & (labels != IGNORE)
        if bad.any():
            raise ValidationError(f"trimap contains undeclared labels {sorted(set(labels[bad].tolist()))}")
        object.__setattr__(self, "labels", labels)

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]

    def __eq__(self, other):
        return isinstance(other, Trimap) and self.num_classes == other.num_classes and \
            np.array_equal(self.labels, other.labels)

    def as_prediction(self):
        """Label grid with ignore folded into background (for scoring)."""
        out = self.labels.copy()
        out[out == IGNORE] = BACKGROUND
        return out


@dataclass(frozen=True)
class CrfParams:
    iterations: int = 10
    gaussian_weight: float = 3.0
    gaussian_sigma_xy: float = 3.0
    bilateral_weight: float = 4.0
    bilateral_sigma_xy: float = 49.0
    bilateral_sigma_rgb: float = 5.0

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        for name in ("gaussian_weight", "gaussian_sigma_xy", "bilateral_weight",
                     "bilateral_sigma_xy", "bilateral_sigma_rgb"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.gaussian_weight > 0 and self.gaussian_sigma_xy <= 0:
            raise ConfigError("gaussian_sigma_xy must be > 0 when the Gaussian kernel is on")
        if self.bilateral_weight > 0 and (self.bilateral_sigma_xy <= 0 or self.bilateral_sigma_rgb <= 0):
            raise ConfigError("bilateral sigmas must be > 0 when the bilateral kernel is on")


def _stack_maps(maps, size):
    """(class_ids, values (C, H, W)) from ActivationMaps or (class_id, array) pairs."""
    ids, planes = [], []
    for m in maps:
        if hasattr(m, "upsample"):
            ids.append(m.class_id)
            planes.append(m.upsample(size) if size is not None else np.asarray(m.values))
        else:
            cid, values = m
            ids.append(cid)
            planes.append(np.asarray(values, np.float64))
    if not planes:
        if size is None:
            raise ShapeError("size is required when there are no maps")
        return [], np.zeros((0,) + tuple(size))
    shapes = {p.shape for p in planes}
    if len(shapes) != 1:
        raise ShapeError(f"maps differ in size: {sorted(shapes)}")
    return ids, np.stack(planes).astype(np.float64)


def threshold_to_trimap(maps, fg_thresh, bg_thresh, num_classes, size=None):
    """Strongest class where it reaches ``fg_thresh``; background where every map is
    below ``bg_thresh``; ignore in between."""
    if bg_thresh > fg_thresh:
        raise ConfigError(f"bg_thresh {bg_thresh} exceeds fg_thresh {fg_thresh}")
    ids, values = _stack_maps(maps, size)
    shape = values.shape[1:]
    labels = np.full(shape, IGNORE, np.uint8)
    if not ids:
        labels[:] = BACKGROUND
        return Trimap(labels, num_classes)
    top = values.max(axis=0)
    winner = np.asarray(ids)[values.argmax(axis=0)] + 1
    labels[top >= fg_thresh] = winner[top >= fg_thresh]
    labels[top < bg_thresh] = BACKGROUND
    return Trimap(labels, num_classes)


def mark_degenerate(trimap, maps):
    """All-ignore trimap when every present-class map is all zero (nothing localised)."""
    if maps and all(m.is_degenerate for m in maps):
        return Trimap(np.full_like(trimap.labels, IGNORE), trimap.num_classes)
    return trimap


def probabilities_from_maps(maps, num_classes, size=None):
    """(num_classes + 1, H, W) distribution; background score is 1 - max class map."""
    ids, values = _stack_maps(maps, size)
    shape = values.shape[1:]
    probs = np.zeros((num_classes + 1,) + shape)
    top = values.max(axis=0) if ids else np.zeros(shape)
    probs[0] = 1.0 - top
    for cid, v in zip(ids, values):
        probs[cid + 1] = v
    return probs / probs.sum(axis=0, keepdims=True)


def probabilities_from_labels(labels, n_labels, confidence=0.7):
    """Soft distribution from hard labels; ignore pixels get a uniform distribution."""
    labels = np.asarray(labels)
    probs = np.full((n_labels,) + labels.shape, (1.0 - confidence) / (n_labels - 1))
    known = labels != IGNORE
    for c in range(n_labels):
        probs[c][known & (labels == c)] = confidence
    probs[:, ~known] = 1.0 / n_labels
    return probs


def _crf_features(image, params, shape):
    h, w = shape
    yy, xx = np.mgrid[:h, :w]
    coords = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    img = np.asarray(image, np.float64)
    colour = img.reshape(h * w, -1)
    pos = coords / params.gaussian_sigma_xy if params.gaussian_weight > 0 else coords
    if params.bilateral_weight > 0:
        feat = np.concatenate([coords / params.bilateral_sigma_xy, colour / params.bilateral_sigma_rgb], axis=1)
    else:
        feat = np.zeros((h * w, 1))
    return np.ascontiguousarray(pos), np.ascontiguousarray(feat)


def dense_crf(image, class_probs, params=None, exact=True):
    """Fully connected CRF with Potts compatibility, solved by mean-field iteration.

    ``image`` is HxW (intensity-only bilateral kernel) or HxWxC; ``class_probs``
    is (L, H, W) and must sum to one per pixel. Message passing is exact over
    all pixel pairs.
    """
    params = params or CrfParams()
    probs = np.asarray(class_probs, np.float64)
    image = np.asarray(image)
    if probs.ndim != 3 or image.shape[:2] != probs.shape[1:]:
        raise ShapeError(f"image {image.shape} and probabilities {probs.shape} disagree")
    if np.any(probs < -1e-12) or np.max(np.abs(probs.sum(axis=0) - 1.0)) > 1e-5:
        raise ValidationError("class probabilities must be non-negative and sum to 1 per pixel")
    if params.iterations == 0:
        return probs.copy()
    if not exact:
        raise ConfigError("only exact message passing is implemented")
    L, h, w = probs.shape
    n = h * w
    unary = np.log(np.clip(probs.reshape(L, n), 1e-12, None))
    q = _softmax(unary)
    w_g, w_b = float(params.gaussian_weight), float(params.bilateral_weight)
    if w_g == 0.0 and w_b == 0.0:
        return q.reshape(L, h, w)
    pos, feat = _crf_features(image, params, (h, w))
    kmat = _kernel_matrix(image, params, pos, feat) if n <= _CACHE_PIXELS else None
    for _ in range(params.iterations):
        if kmat is not None:
            # kmat is symmetric; K @ q^T is the faster product layout
            msg = (kmat @ q.T.astype(kmat.dtype)).T.astype(np.float64)
        else:
            msg = kernels.crf_message(pos, feat, np.ascontiguousarray(q), w_g, w_b)
        q = _softmax(unary + msg)
    return q.reshape(L, h, w)


def _gauss_table(n, sigma):
    d = np.arange(n, dtype=np.float64)
    return np.exp(-0.5 * (d / sigma) ** 2) if sigma > 0 else (d == 0).astype(np.float64)


def _kernel_matrix(image, params, pos, feat):
    """Dense pairwise kernel. Integer images take the lookup-table path, stored as
    float32 to halve memory traffic in the message products."""
    w_g, w_b = float(params.gaussian_weight), float(params.bilateral_weight)
    if np.issubdtype(image.dtype, np.integer) and image.size and image.min() >= 0 and image.max() <= 255:
        h, w = image.shape[:2]
        colour = np.ascontiguousarray(image.reshape(h * w, -1), dtype=np.int64)
        return kernels.crf_kernel_grid(
            colour, h, w,
            _gauss_table(h, params.gaussian_sigma_xy), _gauss_table(w, params.gaussian_sigma_xy),
            _gauss_table(h, params.bilateral_sigma_xy), _gauss_table(w, params.bilateral_sigma_xy),
            _gauss_table(256, params.bilateral_sigma_rgb), w_g, w_b)
    return kernels.crf_kernel_matrix(pos, feat, w_g, w_b)


def _softmax(x):
    e = np.exp(x - x.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


_FOUR = ndimage.generate_binary_structure(2, 1)


def filter_small_regions(trimap, min_area, confidence, min_conf):
    """Relabel as ignore every 4-connected foreground component that is both smaller
    than ``min_area`` and of mean confidence below ``min_conf``."""
    confidence = np.asarray(confidence, np.float64)
    if confidence.shape != trimap.labels.shape:
        raise ShapeError(f"confidence {confidence.shape} vs trimap {trimap.labels.shape}")
    out = trimap.labels.copy()
    if min_area <= 0:
        return Trimap(out, trimap.num_classes)
    for c in range(1, trimap.num_classes + 1):
        comp, n = ndimage.label(trimap.labels == c, structure=_FOUR)
        if n == 0:
            continue
        idx = np.arange(1, n + 1)
        area = ndimage.sum_labels(np.ones_like(confidence), comp, idx)
        mean_conf = ndimage.mean(confidence, comp, idx)
        drop = idx[(area < min_area) & (mean_conf < min_conf)]
        out[np.isin(comp, drop)] = IGNORE
    return Trimap(out, trimap.num_classes)
