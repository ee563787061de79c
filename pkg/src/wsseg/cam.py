"""Grad-CAM and Grad-CAM++ activation maps, plus an on-disk map store."""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .classifier import DEFAULT_CAM_LAYER, image_to_tensor
from .datasets import load_image
from .errors import ConfigError, IoError, RangeError

METHODS = ("gradcam", "gradcampp")


@dataclass(eq=False)
class ActivationMap:
    class_id: int
    values: np.ndarray  # (h, w) float32 in [0, 1], feature resolution
    source_resolution: tuple
    image_id: str = ""

    def upsample(self, size=None):
        """Bilinear resize to ``size`` (default: the source image size), clipped to [0, 1]."""
        size = tuple(size or self.source_resolution)
        t = torch.from_numpy(np.asarray(self.values, np.float32))[None, None]
        up = F.interpolate(t, size=size, mode="bilinear", align_corners=False)[0, 0].numpy()
        return np.clip(up, 0.0, 1.0)

    @property
    def is_degenerate(self):
        return not np.any(self.values > 0)


def normalize_map(raw):
    """Rectify and scale so the maximum is 1; an all-zero map stays zero."""
    m = np.maximum(np.asarray(raw, dtype=np.float64), 0.0)
    top = m.max() if m.size else 0.0
    return (m / top if top > 0 else m).astype(np.float32)


def gradcam_from(activations, gradients):
    """Channel weights are the spatial mean of the gradients."""
    a = np.asarray(activations, np.float64)
    g = np.asarray(gradients, np.float64)
    weights = g.mean(axis=(1, 2))
    return normalize_map(np.tensordot(weights, a, axes=1))


def gradcampp_from(activations, gradients):
    """Per-location weights from second and third gradient powers (exponential score).

    alpha = g^2 / (2 g^2 + sum(A) g^3), renormalised over locations with
    positive gradient; channel weight = sum(alpha * relu(g)).
    """
    a = np.asarray(activations, np.float64)
    g = np.asarray(gradients, np.float64)
    g2, g3 = g ** 2, g ** 3
    denom = 2.0 * g2 + a.sum(axis=(1, 2), keepdims=True) * g3
    alpha = g2 / np.where(denom != 0.0, denom, 1.0)
    positive = np.maximum(g, 0.0)
    norm = np.where(positive > 0, alpha, 0.0).sum(axis=(1, 2), keepdims=True)
    alpha = alpha / np.where(norm != 0.0, norm, 1.0)
    weights = (alpha * positive).sum(axis=(1, 2))
    return normalize_map(np.tensordot(weights, a, axes=1))


def _activations_and_grads(model, image, class_id, layer):
    k = model.spec.num_classes
    if not 0 <= class_id < k:
        raise RangeError(f"class_id {class_id} outside [0, {k})")
    if layer not in model.layer_tags:
        raise ConfigError(f"unknown layer tag {layer!r}")
    model.eval()
    x = image_to_tensor(image)[None]
    with torch.enable_grad():
        logits, feat = model(x, capture=layer)
        (grad,) = torch.autograd.grad(logits[0, class_id], feat)
    return feat[0].detach().double().numpy(), grad[0].double().numpy()


def _make(model, image, class_id, layer, image_id, combine):
    acts, grads = _activations_and_grads(model, image, class_id, layer)
    return ActivationMap(class_id, combine(acts, grads), tuple(np.asarray(image).shape[:2]), image_id)


def grad_cam(model, image, class_id, layer=DEFAULT_CAM_LAYER, image_id=""):
    return _make(model, image, class_id, layer, image_id, gradcam_from)


def grad_cam_pp(model, image, class_id, layer=DEFAULT_CAM_LAYER, image_id=""):
    return _make(model, image, class_id, layer, image_id, gradcampp_from)


def compute_maps(model, image, class_ids, method="gradcampp", layer=DEFAULT_CAM_LAYER, image_id=""):
    if method not in METHODS:
        raise ConfigError(f"unknown CAM method {method!r}; expected one of {METHODS}")
    fn = grad_cam if method == "gradcam" else grad_cam_pp
    return [fn(model, image, c, layer, image_id) for c in class_ids]


class MapStore:
    """One ``<image_id>.npz`` per image plus ``index.json`` mapping ids to class ids."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        index_path = self.root / "index.json"
        self.index = json.loads(index_path.read_text()) if index_path.exists() else {}

    def put(self, image_id, maps):
        if maps:
            values = np.stack([m.values for m in maps]).astype(np.float32)
            source = maps[0].source_resolution
        else:
            values, source = np.zeros((0, 1, 1), np.float32), (0, 0)
        np.savez_compressed(self.root / f"{image_id}.npz", values=values,
                            class_ids=np.array([m.class_id for m in maps], np.int64),
                            source_resolution=np.array(source, np.int64))
        self.index[image_id] = [int(m.class_id) for m in maps]

    def get(self, image_id):
        try:
            with np.load(self.root / f"{image_id}.npz") as z:
                source = tuple(int(v) for v in z["source_resolution"])
                return [ActivationMap(int(c), v, source, image_id) for c, v in zip(z["class_ids"], z["values"])]
        except OSError as exc:
            raise IoError(f"cannot read maps for {image_id}: {exc}") from exc

    def ids(self):
        return sorted(self.index)

    def flush(self):
        (self.root / "index.json").write_text(json.dumps(self.index, sort_keys=True, indent=1) + "\n")


@dataclass
class ExtractionSummary:
    store: MapStore
    n_images: int
    n_maps: int
    failures: list


def extract_maps(model, index, method, layer, store_dir, splits=("train",)):
    """Maps for every image-level-present class of every image in ``splits``.

    Per-image I/O failures are collected in the summary and skipped.
    """
    store = MapStore(store_dir)
    failures, n_images, n_maps = [], 0, 0
    for split in splits:
        for rec in index.split(split):
            present = [c for c, v in enumerate(rec.labels) if v]
            try:
                image = load_image(index, rec) if present else None
                maps = compute_maps(model, image, present, method, layer, rec.id) if present else []
                store.put(rec.id, maps)
            except IoError as exc:
                failures.append((rec.id, str(exc)))
                continue
            n_images += 1
            n_maps += len(maps)
    store.flush()
    return ExtractionSummary(store, n_images, n_maps, failures)
