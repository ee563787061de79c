"""Dataset ingestion: manifests, RLE masks, balanced batches, augmentation."""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from . import kernels
from .errors import BoundsError, ConfigError, DataError, IoError, ParseError, SchemaError

IGNORE = 255
SPLITS = ("train", "val", "test")
MANIFEST_COLUMNS = ("id", "image_path", "labels", "mask_rle", "split")
OPTIONAL_COLUMNS = ("mask_path",)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    height: int
    width: int
    data: np.ndarray  # (height, width) uint8 in {0, 1}

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.shape != (self.height, self.width):
            raise DataError(f"mask data shape {data.shape} != ({self.height}, {self.width})")
        object.__setattr__(self, "data", (data != 0).astype(np.uint8))

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr)
        return cls(arr.shape[0], arr.shape[1], arr)

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return (self.height, self.width) == (other.height, other.width) and np.array_equal(self.data, other.data)

    def __hash__(self):
        return hash((self.height, self.width, self.data.tobytes()))


def _flat(mask, order):
    if order not in ("F", "C"):
        raise ConfigError(f"pixel order must be 'F' (column-major) or 'C', got {order!r}")
    return np.ascontiguousarray(mask.data.ravel(order=order))


def decode_rle(rle, height, width, order="F"):
    """Decode ``"start length ..."`` pairs (0-based, column-major by default).

    ``"-1"`` decodes to the empty mask.
    """
    text = rle.strip()
    if text == "-1":
        return BinaryMask(height, width, np.zeros((height, width), np.uint8))
    tokens = text.split()
    if not tokens or len(tokens) % 2:
        raise ParseError(f"expected an even, non-zero number of tokens, got {len(tokens)}")
    try:
        values = [int(t) for t in tokens]
    except ValueError as exc:
        raise ParseError(f"non-integer token in RLE: {exc}") from None
    if any(v < 0 for v in values):
        raise ParseError("RLE tokens must be non-negative")
    runs = np.asarray(values, dtype=np.int64).reshape(-1, 2)
    n = height * width
    ends = runs[:, 0] + runs[:, 1]
    bad = (runs[:, 1] > 0) & (ends > n)
    if bad.any():
        start, length = runs[np.argmax(bad)]
        raise BoundsError(f"run ({start}, {length}) exceeds {height}x{width} mask")
    flat = kernels.rle_fill(np.ascontiguousarray(runs), n)
    return BinaryMask(height, width, flat.reshape((height, width), order=order))


def encode_rle(mask, order="F"):
    """Encode a mask as maximal runs in ascending start order; ``"-1"`` if empty."""
    runs = kernels.rle_runs(_flat(mask, order))
    if len(runs) == 0:
        return "-1"
    return " ".join(str(int(v)) for v in runs.ravel())


@dataclass(frozen=True)
class SampleRecord:
    id: str
    image_path: str
    labels: tuple  # 0/1 per class
    split: str
    mask_rle: str | None = None
    mask_path: str | None = None

    @property
    def is_positive(self):
        return any(self.labels)

    @property
    def has_mask(self):
        return self.mask_rle is not None or self.mask_path is not None


@dataclass(frozen=True)
class DatasetIndex:
    records: tuple
    class_names: tuple
    counts: dict = field(compare=True)
    root: str = "."

    @property
    def num_classes(self):
        return len(self.class_names)

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def get(self, sample_id):
        for r in self.records:
            if r.id == sample_id:
                return r
        raise KeyError(sample_id)

    def resolve(self, path):
        p = Path(path)
        return p if p.is_absolute() else Path(self.root) / p


def _split_counts(records):
    counts = {s: {"positive": 0, "negative": 0} for s in SPLITS}
    for r in records:
        counts[r.split]["positive" if r.is_positive else "negative"] += 1
    return counts


def build_index(records, class_names, root="."):
    if len(class_names) < 1:
        raise SchemaError("at least one class name is required")
    seen = set()
    for r in records:
        if r.id in seen:
            raise SchemaError(f"duplicate id {r.id!r}")
        seen.add(r.id)
        if r.split not in SPLITS:
            raise SchemaError(f"{r.id}: split must be one of {SPLITS}, got {r.split!r}")
        if len(r.labels) != len(class_names):
            raise SchemaError(f"{r.id}: label vector length {len(r.labels)} != {len(class_names)}")
    records = tuple(records)
    return DatasetIndex(records, tuple(class_names), _split_counts(records), str(root))


def load_index(manifest_path, class_names):
    """Read a manifest CSV (``id,image_path,labels,mask_rle,split``)."""
    path = Path(manifest_path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read manifest {path}: {exc}") from exc
    reader = csv.DictReader(text.splitlines())
    header = tuple(reader.fieldnames or ())
    missing = [c for c in MANIFEST_COLUMNS if c not in header]
    extra = [c for c in header if c not in MANIFEST_COLUMNS + OPTIONAL_COLUMNS]
    if missing or extra:
        raise SchemaError(f"manifest header mismatch: missing={missing} unknown={extra}")
    lookup = {name: i for i, name in enumerate(class_names)}
    records = []
    for line_no, row in enumerate(reader, start=2):
        vec = [0] * len(class_names)
        for name in filter(None, (s.strip() for s in row["labels"].split(";"))):
            if name not in lookup:
                raise SchemaError(f"line {line_no}: unknown class name {name!r}")
            vec[lookup[name]] = 1
        records.append(SampleRecord(
            id=row["id"],
            image_path=row["image_path"],
            labels=tuple(vec),
            split=row["split"].strip(),
            mask_rle=row["mask_rle"].strip() or None,
            mask_path=(row.get("mask_path") or "").strip() or None,
        ))
    return build_index(records, class_names, root=path.parent)


def write_manifest(path, index):
    """Inverse of :func:`load_index` (paths are written as stored)."""
    with_paths = any(r.mask_path for r in index.records)
    columns = MANIFEST_COLUMNS + (OPTIONAL_COLUMNS if with_paths else ())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for r in index.records:
            names = ";".join(n for n, v in zip(index.class_names, r.labels) if v)
            row = [r.id, r.image_path, names, r.mask_rle or "", r.split]
            if with_paths:
                row.append(r.mask_path or "")
            writer.writerow(row)


# -- image files -------------------------------------------------------------

def voc_palette():
    pal = np.zeros((256, 3), np.uint8)
    for i in range(256):
        c, r, g, b = i, 0, 0, 0
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        pal[i] = (r, g, b)
    pal[IGNORE] = (224, 224, 192)
    return pal


_PALETTE = voc_palette().ravel().tolist()


def read_image(path):
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            return np.asarray(im).copy()
    except OSError as exc:
        raise IoError(f"cannot read image {path}: {exc}") from exc


def write_image(path, image):
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path, format="PNG")


def write_label_png(path, labels):
    """Palette PNG; 255 marks ignore."""
    im = Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="P")
    im.putpalette(_PALETTE)
    im.save(path, format="PNG")


def read_label_png(path):
    try:
        with Image.open(path) as im:
            if im.mode not in ("P", "L"):
                raise IoError(f"{path}: expected a palette or grayscale label PNG, got mode {im.mode}")
            return np.asarray(im).copy()
    except OSError as exc:
        raise IoError(f"cannot read label map {path}: {exc}") from exc


def load_image(index, record):
    return read_image(index.resolve(record.image_path))


def load_mask(index, record, shape=None):
    """Evaluation mask as a label grid (RLE masks give {0, 1})."""
    if record.mask_path is not None:
        labels = read_label_png(index.resolve(record.mask_path))
        if shape is None:
            shape = load_image(index, record).shape[:2]
    elif record.mask_rle is not None:
        if shape is None:
            shape = load_image(index, record).shape[:2]
        labels = decode_rle(record.mask_rle, *shape).data
    else:
        return None
    if shape is not None and labels.shape != tuple(shape):
        raise DataError(f"{record.id}: mask {labels.shape} does not match image {tuple(shape)}")
    return labels


# -- sampling ----------------------------------------------------------------

def _round_half_up(x):
    return int(math.floor(x + 0.5))


class _Pool:
    """Cycles through a shuffled id list, reshuffling when exhausted."""

    def __init__(self, ids, rng):
        self.ids = list(ids)
        self.rng = rng
        self.order = []

    def take(self, n):
        out = []
        while len(out) < n:
            if not self.order:
                self.order = [self.ids[i] for i in self.rng.permutation(len(self.ids))]
            out.append(self.order.pop())
        return out


def balanced_batches(index, batch_size, positive_fraction, seed, split="train", num_batches=None):
    """Yield id batches with a fixed number of positive samples in each.

    Every batch carries exactly ``round(batch_size * positive_fraction)``
    positives. A class pool that runs dry is reshuffled and reused, so the
    minority class is oversampled with replacement.
    """
    if batch_size < 2:
        raise ConfigError("batch_size must be >= 2")
    if not 0.0 <= positive_fraction <= 1.0:
        raise ConfigError("positive_fraction must lie in [0, 1]")
    records = index.split(split)
    pos = [r.id for r in records if r.is_positive]
    neg = [r.id for r in records if not r.is_positive]
    n_pos = _round_half_up(batch_size * positive_fraction)
    n_neg = batch_size - n_pos
    if n_pos and not pos:
        raise DataError(f"split {split!r} has no positive samples")
    if n_neg and not neg:
        raise DataError(f"split {split!r} has no negative samples")
    if num_batches is None:
        num_batches = max(1, len(records) // batch_size)
    rng = np.random.default_rng(seed)
    pos_pool, neg_pool = _Pool(pos, rng), _Pool(neg, rng)
    for _ in range(num_batches):
        batch = pos_pool.take(n_pos) + neg_pool.take(n_neg)
        yield [batch[i] for i in rng.permutation(batch_size)]


# -- augmentation ------------------------------------------------------------

@dataclass(frozen=True)
class AugmentationConfig:
    scale_range: tuple = (0.9, 1.1)
    rotation_limit: float = 10.0
    blur_prob: float = 0.1
    brightness_limit: float = 0.1
    hflip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ConfigError(f"invalid scale_range {self.scale_range}")
        if self.rotation_limit < 0:
            raise ConfigError("rotation_limit must be >= 0")
        for name in ("blur_prob", "hflip_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.brightness_limit < 0:
            raise ConfigError("brightness_limit must be >= 0")

    @classmethod
    def identity(cls, seed=0):
        return cls((1.0, 1.0), 0.0, 0.0, 0.0, 0.0, seed)


def augment(image, mask, cfg, rng, size=None):
    """Random scale/rotate/flip (shared by image and mask), then blur and brightness on the image.

    The mask is resampled nearest-neighbour; pixels mapped from outside the
    source become ignore. Output is ``size`` (h, w), default the input size.
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    out_h, out_w = (h, w) if size is None else ((size, size) if np.isscalar(size) else tuple(size))
    scale = rng.uniform(*cfg.scale_range)
    angle = rng.uniform(-cfg.rotation_limit, cfg.rotation_limit)
    flip = rng.random() < cfg.hflip_prob
    blur = rng.random() < cfg.blur_prob
    ksize = int(rng.choice([3, 5]))
    bright = 1.0 + rng.uniform(-cfg.brightness_limit, cfg.brightness_limit)

    # input pixel centre -> output pixel centre
    to_origin = np.array([[1, 0, -(w - 1) / 2], [0, 1, -(h - 1) / 2], [0, 0, 1]], float)
    flip_m = np.diag([-1.0 if flip else 1.0, 1.0, 1.0])
    t = math.radians(angle)
    rot = np.array([[math.cos(t), -math.sin(t), 0], [math.sin(t), math.cos(t), 0], [0, 0, 1]])
    resize = np.diag([scale * out_w / w, scale * out_h / h, 1.0])
    back = np.array([[1, 0, (out_w - 1) / 2], [0, 1, (out_h - 1) / 2], [0, 0, 1]], float)
    m = (back @ resize @ rot @ flip_m @ to_origin)[:2]
    if angle == 0.0:
        m = np.round(m, 12)

    out = cv2.warpAffine(image, m, (out_w, out_h), flags=cv2.INTER_LINEAR,
                         borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    if blur:
        out = cv2.GaussianBlur(out, (ksize, ksize), 0)
    if bright != 1.0:
        out = np.clip(out.astype(np.float32) * bright, 0, 255).astype(image.dtype)
    if mask is None:
        return out, None
    out_mask = cv2.warpAffine(np.asarray(mask, np.uint8), m, (out_w, out_h), flags=cv2.INTER_NEAREST,
                              borderMode=cv2.BORDER_CONSTANT, borderValue=IGNORE)
    return out, out_mask
