"""Stage checkpoints: a torch weight blob plus a JSON sidecar."""

import dataclasses
import hashlib
import io
import json
from dataclasses import dataclass
from pathlib import Path

import torch

from .errors import CheckpointError

STAGES = ("classifier", "irnet", "segmenter")


def _plain(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def fingerprint(config):
    """Stable hash of a (possibly nested) config of dataclasses, dicts and scalars."""
    blob = json.dumps(_plain(config), sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class StageCheckpoint:
    stage: str
    weights: dict
    config_fingerprint: str
    epoch: int
    best_metric: float

    def __post_init__(self):
        if self.stage not in STAGES:
            raise CheckpointError(f"unknown stage {self.stage!r}")

    def sidecar(self):
        return {
            "stage": self.stage,
            "fingerprint": self.config_fingerprint,
            "epoch": self.epoch,
            "best_metric": self.best_metric,
        }

    def save(self, path):
        """Write ``<path>.pt`` and ``<path>.json``; returns the weight path."""
        path = Path(path).with_suffix("")
        buf = io.BytesIO()
        torch.save({k: v.detach().cpu() for k, v in self.weights.items()}, buf)
        path.with_suffix(".pt").write_bytes(buf.getvalue())
        path.with_suffix(".json").write_text(json.dumps(self.sidecar(), sort_keys=True, indent=2) + "\n")
        return path.with_suffix(".pt")


def load_checkpoint(path, expected_fingerprint=None, stage=None):
    path = Path(path).with_suffix("")
    try:
        meta = json.loads(path.with_suffix(".json").read_text())
        weights = torch.load(path.with_suffix(".pt"), map_location="cpu", weights_only=True)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc
    if stage is not None and meta["stage"] != stage:
        raise CheckpointError(f"{path}: expected a {stage} checkpoint, found {meta['stage']}")
    if expected_fingerprint is not None and meta["fingerprint"] != expected_fingerprint:
        raise CheckpointError(
            f"{path}: config fingerprint {meta['fingerprint']} does not match {expected_fingerprint}")
    return StageCheckpoint(meta["stage"], weights, meta["fingerprint"], meta["epoch"], meta["best_metric"])
