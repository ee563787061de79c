"""Per-image composites: image | Step-1 CAM | Step-2 IRNet | Step-3 prediction | ground truth."""

import logging
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

PANEL_TITLES = ("image", "step1", "step2", "step3", "gt")
_CONTOUR = [(255, 64, 64), (64, 255, 64), (64, 160, 255), (255, 255, 64)]


def _rgb(image):
    image = np.asarray(image)
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    return np.ascontiguousarray(image[:, :, :3].astype(np.uint8))


def _jet(values):
    v = np.clip(np.asarray(values, np.float64), 0.0, 1.0)
    lut = cv2.applyColorMap(np.arange(256, dtype=np.uint8)[:, None], cv2.COLORMAP_JET)[:, 0, ::-1]
    return lut[np.round(v * 255).astype(np.uint8)]


def heatmap_panel(image, values, alpha=0.5):
    """``values`` in [0, 1] alpha-blended over the image as a jet heatmap."""
    base = _rgb(image).astype(np.float64)
    values = np.asarray(values, np.float64)
    if values.shape != base.shape[:2]:
        values = cv2.resize(values, (base.shape[1], base.shape[0]), interpolation=cv2.INTER_LINEAR)
    out = (1.0 - alpha) * base + alpha * _jet(values)
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def contour_panel(image, labels, ignore_index=255):
    """Outline each foreground label of ``labels`` on top of the image."""
    out = _rgb(image).copy()
    labels = np.asarray(labels)
    for c in sorted(int(v) for v in np.unique(labels) if v not in (0, ignore_index)):
        mask = (labels == c).astype(np.uint8)
        contours, _ = cv2.findContours(mask, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_NONE)
        cv2.drawContours(out, contours, -1, _CONTOUR[(c - 1) % len(_CONTOUR)], 1)
    return out


def _panel(image, item):
    """Heatmap for float arrays, contour overlay for integer label grids."""
    arr = np.asarray(item)
    if np.issubdtype(arr.dtype, np.floating):
        if arr.ndim == 3:  # several class maps: show the strongest
            arr = arr.max(axis=0)
        return heatmap_panel(image, arr)
    return contour_panel(image, arr)


def compose(image, stage_maps, gt=None, gap=2):
    """Row of panels; ``stage_maps`` is a list of (stage, map-or-mask-or-None)."""
    base = _rgb(image)
    h, w = base.shape[:2]
    panels = [base]
    for stage, item in stage_maps:
        if item is None:
            log.warning("no %s panel input; leaving it blank", stage)
            panels.append(np.zeros_like(base))
        else:
            panels.append(_panel(base, item))
    if gt is not None:
        panels.append(contour_panel(base, gt))
    sep = np.full((h, gap, 3), 255, np.uint8)
    row = [panels[0]]
    for p in panels[1:]:
        row += [sep, p]
    return np.concatenate(row, axis=1)


def visualize(image_id, image, stage_maps, gt=None, out_path=None):
    """Write the composite PNG (byte-deterministic for identical inputs)."""
    comp = compose(image, stage_maps, gt)
    out_path = Path(out_path or f"{image_id}.png")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(comp).save(out_path, format="PNG", optimize=False)
    return out_path
