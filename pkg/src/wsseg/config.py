"""Pipeline configuration: flat INI sections mapped onto dataclasses.

Every key has a default; unknown sections or keys are errors. The resolved
config is written back in the same format, and reloading it gives the same
fingerprint.
"""

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .checkpoint import fingerprint
from .classifier import DEFAULT_CAM_LAYER
from .errors import ConfigError

OUTPUT_ENV = "WSSEG_OUTPUT_DIR"


@dataclass
class DatasetSection:
    manifest: str = ""
    class_names: tuple = ()
    input_size: int = 64


@dataclass
class ClassifierSection:
    backbone: str = "toy-cnn"
    output_stride: int = 8
    head_channels: int = 64
    dropblock_block_size: int = 3
    dropblock_prob: float = 0.1
    dropblock_stages: tuple = ("head3",)
    optimizer: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 12
    threshold: float = 0.5


@dataclass
class CamSection:
    method: str = "gradcampp"
    layer: str = DEFAULT_CAM_LAYER
    splits: tuple = ("train", "val")
    # also extract the other method, for the Step-1 method comparison
    compare_methods: bool = True


@dataclass
class RefineSection:
    fg_thresh: float = 0.35
    bg_thresh: float = 0.15
    crf: bool = True
    crf_iterations: int = 10
    crf_gaussian_weight: float = 3.0
    crf_gaussian_sigma_xy: float = 3.0
    crf_bilateral_weight: float = 4.0
    crf_bilateral_sigma_xy: float = 49.0
    crf_bilateral_sigma_rgb: float = 5.0
    crf_confidence: float = 0.7
    min_area: int = 10
    min_conf: float = 0.8
    splits: tuple = ("train", "val")


@dataclass
class IrnetSection:
    backbone: str = "toy-cnn"
    optimizer: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 8
    radius: int = 5
    max_pairs: int = 20000
    boundary_weight: float = 1.0
    displacement_weight: float = 1.0
    beta: float = 8.0
    steps: int = 16
    seed_thresh: float = 0.35
    post_crf: bool = False


@dataclass
class SegmenterSection:
    arch: str = "toy-unet"
    backbone: str = "toy"
    optimizer: str = "sgd-momentum"
    lr: float = 6e-5
    momentum: float = 0.9
    weight_decay: float = 1e-6
    batch_size: int = 48
    input_size: int = 512
    epochs: int = 20
    positive_fraction: float = 0.25
    pos_weight: float | None = None  # "auto": negative/positive pixel ratio
    prob_threshold: float = 0.5


@dataclass
class EvaluateSection:
    visualize_count: int = 4


@dataclass
class RunSection:
    seed: int = 0
    output_dir: str = ""


SECTIONS = {
    "run": RunSection,
    "dataset": DatasetSection,
    "classifier": ClassifierSection,
    "cam": CamSection,
    "refine": RefineSection,
    "irnet": IrnetSection,
    "segmenter": SegmenterSection,
    "evaluate": EvaluateSection,
}


@dataclass
class PipelineConfig:
    run: RunSection = field(default_factory=RunSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    cam: CamSection = field(default_factory=CamSection)
    refine: RefineSection = field(default_factory=RefineSection)
    irnet: IrnetSection = field(default_factory=IrnetSection)
    segmenter: SegmenterSection = field(default_factory=SegmenterSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    source: str | None = field(default=None, compare=False)

    @property
    def seed(self):
        return self.run.seed

    @property
    def output_dir(self):
        out = self.run.output_dir or os.environ.get(OUTPUT_ENV, "")
        if not out:
            raise ConfigError(f"no output_dir in [run] and {OUTPUT_ENV} is unset")
        return Path(out)

    def section(self, name):
        return getattr(self, name)

    def fingerprint(self, sections=None):
        names = sections or list(SECTIONS)
        return fingerprint({n: getattr(self, n) for n in names if n != "run"} | {"seed": self.run.seed})

    def with_overrides(self, overrides):
        """Copy with ``{"section.key": value}`` applied; values may be strings."""
        cfg = dataclasses.replace(self, **{n: dataclasses.replace(getattr(self, n)) for n in SECTIONS})
        for dotted, value in overrides.items():
            sec, _, key = dotted.partition(".")
            _set(cfg, sec, key, value)
        return cfg


def _field_types(cls):
    return {f.name: f for f in dataclasses.fields(cls)}


def _parse_value(raw, f, where):
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    text = raw.strip() if isinstance(raw, str) else raw
    if not isinstance(text, str):
        return text
    try:
        if f.type in ("float | None",) or (default is None and "float" in str(f.type)):
            return None if text.lower() in ("", "auto", "none") else float(text)
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(f"not a boolean: {text!r}")
            return low in ("true", "yes", "1", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(p.strip() for p in text.split(",") if p.strip())
        return text
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _set(cfg, section, key, value):
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section [{section}]")
    fields = _field_types(SECTIONS[section])
    if key not in fields:
        raise ConfigError(f"unknown key {key!r} in [{section}]; known: {sorted(fields)}")
    setattr(getattr(cfg, section), key, _parse_value(value, fields[key], f"[{section}] {key}"))


def parse_config(text, source=None):
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source or "<config>")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    cfg = PipelineConfig(source=source)
    for section in parser.sections():
        for key, value in parser.items(section):
            _set(cfg, section, key, value)
    validate(cfg)
    return cfg


def load_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = parse_config(text, source=str(path))
    # relative dataset paths are taken from the config file's directory
    base = Path(path).resolve().parent
    if cfg.dataset.manifest and not Path(cfg.dataset.manifest).is_absolute():
        cfg.dataset.manifest = os.path.normpath(base / cfg.dataset.manifest)
    if cfg.run.output_dir and not Path(cfg.run.output_dir).is_absolute():
        cfg.run.output_dir = os.path.normpath(base / cfg.run.output_dir)
    return cfg


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if value is None:
        return "auto"
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(cfg):
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        sec = getattr(cfg, name)
        for f in dataclasses.fields(sec):
            lines.append(f"{f.name} = {_format(getattr(sec, f.name))}")
        lines.append("")
    return "\n".join(lines)


def validate(cfg):
    """Cross-field checks that do not need the dataset."""
    if cfg.refine.bg_thresh > cfg.refine.fg_thresh:
        raise ConfigError(f"refine.bg_thresh {cfg.refine.bg_thresh} exceeds fg_thresh {cfg.refine.fg_thresh}")
    if cfg.cam.method not in ("gradcam", "gradcampp"):
        raise ConfigError(f"unknown cam.method {cfg.cam.method!r}")
    for name in ("classifier", "irnet", "segmenter"):
        opt = getattr(cfg, name).optimizer
        if opt not in ("sgd", "sgd-momentum", "adam", "radam"):
            raise ConfigError(f"{name}.optimizer {opt!r} is not one of sgd-momentum, adam, radam")
    if cfg.dataset.input_size < 16:
        raise ConfigError("dataset.input_size must be >= 16")
    return cfg
