"""Stage runner: the classify -> ... -> evaluate DAG with a run manifest.

Each stage writes under ``<output_dir>/<stage>/`` together with a snapshot of
the resolved config, and appends an entry to ``<output_dir>/manifest.json``.
A stage's fingerprint covers its own config section and every upstream one,
so editing e.g. ``[segmenter]`` leaves the classifier artifacts valid.
"""

import csv
import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock

from . import cam as cam_mod
from .checkpoint import load_checkpoint
from .classifier import ClassifierSpec, ClassifierTrainConfig, DropBlockConfig, load_classifier, train_classifier
from .config import dump_config, validate
from .datasets import IGNORE, load_image, load_index, load_mask, read_label_png, write_label_png
from .errors import ConfigError, DependencyError, StaleArtifactError, UndefinedMetricError, WssegError
from .irnet import IrnetLossConfig, IrnetTrainConfig, build_irnet, load_irnet, predict_boundary, propagate_labels, \
    train_irnet
from .metrics import ConfusionMatrix, accumulate, evaluate_split, miou, render_table
from .refine import CrfParams, Trimap, dense_crf, filter_small_regions, mark_degenerate, probabilities_from_maps, \
    threshold_to_trimap
from .segmentation import SegmenterSpec, SegmenterTrainConfig, labels_from_probabilities, load_segmenter, \
    predict_probabilities, train_segmenter
from .visualize import visualize

log = logging.getLogger(__name__)

STAGES = ("classify", "extract-cam", "refine", "irnet", "propagate", "segment", "evaluate")
_OWN_SECTIONS = {
    "classify": ("dataset", "classifier"),
    "extract-cam": ("cam",),
    "refine": ("refine",),
    "irnet": ("irnet",),
    "propagate": (),
    "segment": ("segmenter",),
    "evaluate": ("evaluate",),
}
EVAL_NOTE = "Step-1/2 pseudo-labels are scored as argmax trimaps with ignore treated as background"


def upstream(stage):
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
    return STAGES[:STAGES.index(stage)]


def stage_sections(stage):
    out = []
    for s in upstream(stage) + (stage,):
        out.extend(_OWN_SECTIONS[s])
    return tuple(out)


def stage_fingerprint(cfg, stage):
    return cfg.fingerprint(stage_sections(stage))


# ---------------------------------------------------------------------------
# manifest


@dataclass
class StageEntry:
    stage: str
    fingerprint: str
    checkpoint: str | None = None
    metrics: dict = field(default_factory=dict)
    wall_time: float = 0.0


class RunManifest:
    """Ordered stage outcomes for one output directory."""

    def __init__(self, path, entries=None, config_fingerprint=None):
        self.path = Path(path)
        self.entries = list(entries or [])
        self.config_fingerprint = config_fingerprint

    @classmethod
    def load(cls, output_dir):
        path = Path(output_dir) / "manifest.json"
        if not path.exists():
            return cls(path)
        data = json.loads(path.read_text())
        return cls(path, [StageEntry(**e) for e in data["entries"]], data.get("config_fingerprint"))

    def save(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        data = {"config_fingerprint": self.config_fingerprint, "entries": [asdict(e) for e in self.entries]}
        self.path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")

    def get(self, stage):
        for e in self.entries:
            if e.stage == stage:
                return e
        return None

    def record(self, entry):
        """Add ``entry``; older entries for it and for every downstream stage are dropped."""
        later = set(STAGES[STAGES.index(entry.stage):])
        self.entries = [e for e in self.entries if e.stage not in later] + [entry]
        self.entries.sort(key=lambda e: STAGES.index(e.stage))

    @property
    def stages(self):
        return [e.stage for e in self.entries]


# ---------------------------------------------------------------------------
# context


class Context:
    def __init__(self, cfg):
        self.cfg = cfg
        self.out = cfg.output_dir
        self._index = None

    @property
    def index(self):
        if self._index is None:
            if not self.cfg.dataset.manifest:
                raise ConfigError("[dataset] manifest is not set")
            if not self.cfg.dataset.class_names:
                raise ConfigError("[dataset] class_names is not set")
            self._index = load_index(self.cfg.dataset.manifest, self.cfg.dataset.class_names)
        return self._index

    @property
    def num_classes(self):
        return len(self.cfg.dataset.class_names)

    def stage_dir(self, stage):
        d = self.out / stage
        d.mkdir(parents=True, exist_ok=True)
        return d

    def ids(self, splits):
        return [r.id for s in splits for r in self.index.split(s)]

    def image(self, image_id):
        return load_image(self.index, self.index.get(image_id))

    def gt(self, image_id):
        rec = self.index.get(image_id)
        return load_mask(self.index, rec) if rec.has_mask else None


def classifier_spec(cfg):
    c = cfg.classifier
    return ClassifierSpec(
        backbone_id=c.backbone, num_classes=len(cfg.dataset.class_names), output_stride=c.output_stride,
        head_channels=c.head_channels,
        dropblock=DropBlockConfig(c.dropblock_block_size, c.dropblock_prob, tuple(c.dropblock_stages)))


def segmenter_spec(cfg):
    s = cfg.segmenter
    return SegmenterSpec(s.arch, s.backbone, len(cfg.dataset.class_names), s.input_size)


def crf_params(cfg):
    r = cfg.refine
    return CrfParams(r.crf_iterations, r.crf_gaussian_weight, r.crf_gaussian_sigma_xy, r.crf_bilateral_weight,
                     r.crf_bilateral_sigma_xy, r.crf_bilateral_sigma_rgb)


def _methods(cfg):
    other = "gradcam" if cfg.cam.method == "gradcampp" else "gradcampp"
    return [cfg.cam.method, other] if cfg.cam.compare_methods else [cfg.cam.method]


def _map_store(ctx, method):
    return cam_mod.MapStore(ctx.out / "extract-cam" / "maps" / method)


# ---------------------------------------------------------------------------
# per-image helpers shared by stages and the sweep


def step1_trimap(maps, cfg, k, size):
    r = cfg.refine
    return mark_degenerate(threshold_to_trimap(maps, r.fg_thresh, r.bg_thresh, k, size=size), maps)


def refine_image(maps, image, cfg, k):
    """(Step-1 threshold trimap, refined training trimap) for one image."""
    size = np.asarray(image).shape[:2]
    r = cfg.refine
    step1 = step1_trimap(maps, cfg, k, size)
    if not maps:
        return step1, step1
    if r.crf:
        probs = probabilities_from_maps(maps, k, size)
        # the ambiguous band left by thresholding gets no unary preference; the pairwise terms fill it
        probs[:, step1.labels == IGNORE] = 1.0 / (k + 1)
        q = dense_crf(image, probs, crf_params(cfg))
        labels = q.argmax(axis=0).astype(np.uint8)
        conf = q.max(axis=0)
        labels[conf < r.crf_confidence] = IGNORE
        trimap = Trimap(labels, k)
    else:
        trimap = step1
        conf = np.max([m.upsample(size) for m in maps], axis=0)
    trimap = filter_small_regions(trimap, r.min_area, conf, r.min_conf)
    return step1, mark_degenerate(trimap, maps)


def pseudo_miou(preds, ctx, ids):
    cm = ConfusionMatrix.empty(ctx.num_classes + 1)
    for i in ids:
        cm = accumulate(cm, preds[i], ctx.gt(i))
    return miou(cm)


def labelled(ctx, ids):
    return [i for i in ids if ctx.index.get(i).has_mask]


def refine_score(cfg, ctx, ids):
    """Held-out pseudo-label mIoU of the refined trimaps (ignore as background)."""
    store = _map_store(ctx, cfg.cam.method)
    preds = {}
    for i in ids:
        _, refined = refine_image(store.get(i), ctx.image(i), cfg, ctx.num_classes)
        preds[i] = refined.as_prediction()
    return pseudo_miou(preds, ctx, ids)


# ---------------------------------------------------------------------------
# stages


def _stage_classify(ctx):
    cfg, d = ctx.cfg, ctx.stage_dir("classify")
    c = cfg.classifier
    train_cfg = ClassifierTrainConfig(epochs=c.epochs, batch_size=c.batch_size, lr=c.lr, optimizer=c.optimizer,
                                      weight_decay=c.weight_decay, momentum=c.momentum, threshold=c.threshold,
                                      seed=cfg.seed)
    ckpt = train_classifier(classifier_spec(cfg), ctx.index, train_cfg, d / "train_log.jsonl",
                            stage_fingerprint(cfg, "classify"))
    path = ckpt.save(d / "classifier")
    return str(path), {"val_f1": ckpt.best_metric, "best_epoch": ckpt.epoch}


def _load_classifier(ctx):
    ckpt = load_checkpoint(ctx.out / "classify" / "classifier", stage_fingerprint(ctx.cfg, "classify"),
                           stage="classifier")
    return load_classifier(classifier_spec(ctx.cfg), ckpt)


def _stage_extract_cam(ctx):
    cfg = ctx.cfg
    model = _load_classifier(ctx)
    metrics = {}
    for method in _methods(cfg):
        summary = cam_mod.extract_maps(model, ctx.index, method, cfg.cam.layer,
                                       ctx.out / "extract-cam" / "maps" / method, splits=cfg.cam.splits)
        metrics[method] = {"images": summary.n_images, "maps": summary.n_maps, "failures": len(summary.failures)}
    return None, metrics


def _stage_refine(ctx):
    cfg, d = ctx.cfg, ctx.stage_dir("refine")
    store = _map_store(ctx, cfg.cam.method)
    (d / "step1").mkdir(exist_ok=True)
    (d / "trimaps").mkdir(exist_ok=True)
    preds = {}
    for i in ctx.ids(cfg.refine.splits):
        step1, refined = refine_image(store.get(i), ctx.image(i), cfg, ctx.num_classes)
        write_label_png(d / "step1" / f"{i}.png", step1.labels)
        write_label_png(d / "trimaps" / f"{i}.png", refined.labels)
        preds[i] = refined.as_prediction()
    held_out = labelled(ctx, [i for i in ctx.ids(("val",)) if i in preds])
    metrics = {"images": len(preds)}
    if held_out:
        metrics["val_pseudo_miou"] = pseudo_miou(preds, ctx, held_out)
    return None, metrics


def _read_trimaps(ctx, folder, ids):
    out = {}
    for i in ids:
        path = ctx.out / folder / f"{i}.png"
        if path.exists():
            out[i] = Trimap(read_label_png(path), ctx.num_classes)
    return out


def _irnet_train_cfg(cfg):
    r = cfg.irnet
    return IrnetTrainConfig(epochs=r.epochs, batch_size=r.batch_size, lr=r.lr, optimizer=r.optimizer,
                            weight_decay=r.weight_decay, momentum=r.momentum, radius=r.radius,
                            max_pairs=r.max_pairs, seed=cfg.seed,
                            loss=IrnetLossConfig(r.boundary_weight, r.displacement_weight))


def _stage_irnet(ctx):
    cfg, d = ctx.cfg, ctx.stage_dir("irnet")
    trimaps = _read_trimaps(ctx, "refine/trimaps", ctx.ids(("train", "val")))
    model = build_irnet(cfg.irnet.backbone, seed=cfg.seed)
    ckpt = train_irnet(model, trimaps, ctx.index, _irnet_train_cfg(cfg), d / "train_log.jsonl",
                       stage_fingerprint(cfg, "irnet"))
    path = ckpt.save(d / "irnet")
    return str(path), {"val_pair_acc": ckpt.best_metric, "best_epoch": ckpt.epoch}


def _stage_propagate(ctx):
    cfg, d = ctx.cfg, ctx.stage_dir("propagate")
    r = cfg.irnet
    ckpt = load_checkpoint(ctx.out / "irnet" / "irnet", stage_fingerprint(cfg, "irnet"), stage="irnet")
    model = load_irnet(ckpt, r.backbone)
    store = _map_store(ctx, cfg.cam.method)
    walked_store = cam_mod.MapStore(d / "maps")
    (d / "labels").mkdir(exist_ok=True)
    k = ctx.num_classes
    n = 0
    for i in ctx.ids(cfg.cam.splits):
        maps = store.get(i)
        image = ctx.image(i)
        size = image.shape[:2]
        labels, walked = propagate_labels(maps, predict_boundary(model, image), size, r.beta, r.radius,
                                          r.steps, r.seed_thresh)
        trimap = mark_degenerate(Trimap(labels, k), maps)
        if r.post_crf and maps and not np.all(trimap.labels == IGNORE):
            soft = np.zeros((k + 1,) + size)
            for c in range(k + 1):
                soft[c] = np.where(trimap.labels == c, 0.7, 0.3 / k)
            q = dense_crf(image, soft / soft.sum(axis=0, keepdims=True), crf_params(cfg))
            trimap = Trimap(q.argmax(axis=0).astype(np.uint8), k)
        write_label_png(d / "labels" / f"{i}.png", trimap.labels)
        walked_store.put(i, walked)
        n += 1
    walked_store.flush()
    return None, {"images": n}


def _stage_segment(ctx):
    cfg, d = ctx.cfg, ctx.stage_dir("segment")
    s = cfg.segmenter
    labels = _read_trimaps(ctx, "propagate/labels", ctx.ids(("train", "val")))
    train_cfg = SegmenterTrainConfig(optimizer=s.optimizer, lr=s.lr, momentum=s.momentum,
                                     weight_decay=s.weight_decay, batch_size=s.batch_size,
                                     input_size=s.input_size, epochs=s.epochs,
                                     positive_fraction=s.positive_fraction, pos_weight=s.pos_weight, seed=cfg.seed)
    spec = segmenter_spec(cfg)
    ckpt = train_segmenter(spec, labels, ctx.index, train_cfg, d / "train_log.jsonl",
                           stage_fingerprint(cfg, "segment"))
    path = ckpt.save(d / "segmenter")
    model = load_segmenter(spec, ckpt)
    (d / "pred").mkdir(exist_ok=True)
    ids = ctx.ids(("train", "val", "test"))
    for s0 in range(0, len(ids), 64):
        chunk = ids[s0:s0 + 64]
        probs = predict_probabilities(model, [ctx.image(i) for i in chunk])
        for i, p in zip(chunk, probs):
            write_label_png(d / "pred" / f"{i}.png", labels_from_probabilities(p, s.prob_threshold))
    return str(path), {"val_pseudo_miou": ckpt.best_metric, "best_epoch": ckpt.epoch, "pos_weight": ckpt.pos_weight}


def _reports(ctx, preds, ids):
    gts = {i: ctx.gt(i) for i in ids}
    out = {}
    for mode in ("all", "positive_only"):
        try:
            out[mode] = evaluate_split({i: preds[i] for i in ids}, gts, mode, ctx.num_classes + 1)
        except UndefinedMetricError:
            out[mode] = None
    return out


def _read_preds(ctx, folder, ids, as_prediction=True):
    out = {}
    for i in ids:
        lab = read_label_png(ctx.out / folder / f"{i}.png")
        out[i] = Trimap(lab, ctx.num_classes).as_prediction() if as_prediction else lab
    return out


def render_figure(ctx, image_id, out_path):
    """Composite for one image from whatever stage artifacts exist."""
    image = ctx.image(image_id)
    size = image.shape[:2]

    def class_map(store_dir):
        if not (store_dir / f"{image_id}.npz").exists():
            return None
        try:
            maps = cam_mod.MapStore(store_dir).get(image_id)
        except WssegError:
            return None
        if not maps:
            return np.zeros(size)
        return np.max([m.upsample(size) for m in maps], axis=0)

    step1 = class_map(ctx.out / "extract-cam" / "maps" / ctx.cfg.cam.method)
    step2 = class_map(ctx.out / "propagate" / "maps")
    pred_path = ctx.out / "segment" / "pred" / f"{image_id}.png"
    step3 = read_label_png(pred_path) if pred_path.exists() else None
    panels = [("step1", step1), ("step2", step2), ("step3", step3)]
    return visualize(image_id, image, panels, ctx.gt(image_id), out_path)


def _stage_evaluate(ctx):
    cfg, d = ctx.cfg, ctx.stage_dir("evaluate")
    train_ids = labelled(ctx, ctx.ids(("train",)))
    val_ids = labelled(ctx, ctx.ids(("val",)))
    k = ctx.num_classes
    report = {"note": EVAL_NOTE, "train": {}, "val": {}}
    for method in _methods(cfg):
        store = _map_store(ctx, method)
        preds = {i: step1_trimap(store.get(i), cfg, k, ctx.image(i).shape[:2]).as_prediction() for i in train_ids}
        report["train"][f"step1_{method}"] = _reports(ctx, preds, train_ids)
    report["train"]["step1"] = report["train"][f"step1_{cfg.cam.method}"]
    report["train"]["refine"] = _reports(ctx, _read_preds(ctx, "refine/trimaps", train_ids), train_ids)
    report["train"]["step2"] = _reports(ctx, _read_preds(ctx, "propagate/labels", train_ids), train_ids)
    report["train"]["step3"] = _reports(ctx, _read_preds(ctx, "segment/pred", train_ids, False), train_ids)
    if val_ids:
        report["val"]["step3"] = _reports(ctx, _read_preds(ctx, "segment/pred", val_ids, False), val_ids)

    def plain(rep):
        return {m: (None if r is None else asdict(r)) for m, r in rep.items()}

    data = {"note": EVAL_NOTE,
            "train": {name: plain(rep) for name, rep in report["train"].items()},
            "val": {name: plain(rep) for name, rep in report["val"].items()}}
    (d / "report.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")

    rows = {}
    for split in ("train", "val"):
        for name, rep in report[split].items():
            if name == "step1" and len(_methods(cfg)) > 1:
                continue  # alias of step1_<method>
            rows.setdefault(name, {})[split] = {"pos": rep["positive_only"], "all": rep["all"]}
    (d / "report.txt").write_text(render_table(rows) + f"\n{EVAL_NOTE}.\n")

    figs = d / "figures"
    for i in sorted(val_ids or train_ids)[:cfg.evaluate.visualize_count]:
        render_figure(ctx, i, figs / f"{i}.png")
    t = report["train"]
    return None, {name: t[name]["all"].miou for name in t if t[name]["all"] is not None}


_RUNNERS = {
    "classify": _stage_classify,
    "extract-cam": _stage_extract_cam,
    "refine": _stage_refine,
    "irnet": _stage_irnet,
    "propagate": _stage_propagate,
    "segment": _stage_segment,
    "evaluate": _stage_evaluate,
}


# ---------------------------------------------------------------------------
# entry points


def _check_upstream(manifest, cfg, stage):
    for up in upstream(stage):
        entry = manifest.get(up)
        if entry is None:
            raise DependencyError(f"stage {stage!r} needs {up!r}, which has not run in {cfg.output_dir}")
        want = stage_fingerprint(cfg, up)
        if entry.fingerprint != want:
            raise StaleArtifactError(
                f"{up!r} artifacts were built with config {entry.fingerprint}, current config is {want}; "
                f"rerun {up!r} first")


def _lock(out):
    out.mkdir(parents=True, exist_ok=True)
    return FileLock(str(out / ".wsseg.lock"))


def run_stage(stage, cfg, force=False):
    """Run one stage; returns its manifest entry (the existing one on a no-op)."""
    validate(cfg)
    ctx = Context(cfg)
    with _lock(ctx.out):
        manifest = RunManifest.load(ctx.out)
        _check_upstream(manifest, cfg, stage)
        fp = stage_fingerprint(cfg, stage)
        done = manifest.get(stage)
        if done is not None and done.fingerprint == fp and not force:
            log.info("%s is up to date (%s)", stage, fp)
            return done
        torch.manual_seed(cfg.seed)
        np.random.seed(cfg.seed % (2 ** 32))
        t0 = time.perf_counter()
        ckpt_path, metrics = _RUNNERS[stage](ctx)
        entry = StageEntry(stage, fp, ckpt_path, metrics, round(time.perf_counter() - t0, 3))
        (ctx.stage_dir(stage) / "config.ini").write_text(dump_config(cfg))
        (ctx.out / "config.ini").write_text(dump_config(cfg))
        manifest.config_fingerprint = cfg.fingerprint()
        manifest.record(entry)
        manifest.save()
        return entry


def run_all(cfg, force=False, until="evaluate"):
    entries = []
    for stage in STAGES[:STAGES.index(until) + 1]:
        entries.append(run_stage(stage, cfg, force))
    return entries


def parse_grid(text):
    """``section.key = v1, v2, ...`` lines (optionally under a [grid] header)."""
    grid = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            raise ConfigError(f"bad grid line {raw!r}; expected 'section.key = v1, v2'")
        key, values = (p.strip() for p in line.split("=", 1))
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not vals:
            raise ConfigError(f"grid key {key!r} has no values")
        grid[key] = vals
    if not grid:
        raise ConfigError("empty sweep grid")
    return grid


def sweep(grid, cfg, stage="refine", out_csv=None):
    """Score every grid point on the labelled val images; CSV sorted by mIoU."""
    if stage != "refine":
        raise ConfigError(f"sweeps are supported for the refine stage only, not {stage!r}")
    if not grid:
        raise ConfigError("empty sweep grid")
    for key in grid:
        if not key.startswith("refine."):
            raise ConfigError(f"sweep key {key!r} is outside [refine]")
    ctx = Context(cfg)
    manifest = RunManifest.load(ctx.out)
    _check_upstream(manifest, cfg, "refine")
    ids = labelled(ctx, ctx.ids(("val",)))
    if not ids:
        raise ConfigError("sweep needs labelled val images")
    keys = list(grid)
    rows = []
    for values in itertools.product(*(grid[k] for k in keys)):
        point = dict(zip(keys, values))
        row = {k: str(v) for k, v in point.items()}
        try:
            pcfg = validate(cfg.with_overrides(point))
            row["miou"] = refine_score(pcfg, ctx, ids)
            row["status"] = "ok"
        except ConfigError as exc:
            row["miou"] = None
            row["status"] = f"ConfigError: {exc}"
        rows.append(row)
    rows.sort(key=lambda r: (r["miou"] is None, -(r["miou"] or 0.0)))
    out_csv = Path(out_csv or ctx.stage_dir("sweep") / "sweep.csv")
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys + ["miou", "status"])
        writer.writeheader()
        for r in rows:
            writer.writerow({**r, "miou": "" if r["miou"] is None else f"{r['miou']:.6f}"})
    return rows, out_csv
