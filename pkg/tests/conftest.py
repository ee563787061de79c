import sys
import time
from pathlib import Path
from types import SimpleNamespace

import pytest
from hypothesis import HealthCheck, settings

from wsseg.config import load_config

sys.path.insert(0, str(Path(__file__).parent))

ROOT = Path(__file__).resolve().parents[1]
TOY_CONFIG = ROOT / "configs" / "toy.ini"

settings.register_profile("wsseg", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("wsseg")


def toy_config(manifest, out_dir, **overrides):
    cfg = load_config(TOY_CONFIG)
    return cfg.with_overrides({"dataset.manifest": str(manifest), "run.output_dir": str(out_dir), **overrides})


@pytest.fixture(scope="session")
def blobs(tmp_path_factory):
    """The acceptance dataset: 500 train / 100 val blobs at 64x64."""
    from wsseg.synthetic import make_blobs
    return make_blobs(tmp_path_factory.mktemp("blobs"), n_train=500, n_val=100, size=64, seed=0)


@pytest.fixture(scope="session")
def small_blobs(tmp_path_factory):
    from wsseg.synthetic import make_blobs
    return make_blobs(tmp_path_factory.mktemp("small_blobs"), n_train=48, n_val=16, n_test=4, size=32, seed=1)


@pytest.fixture(scope="session")
def toy_runs(blobs, tmp_path_factory):
    """Two complete pipeline runs with the same config and seed."""
    from wsseg.pipeline import run_all
    runs = []
    for name in ("run_a", "run_b"):
        cfg = toy_config(blobs, tmp_path_factory.mktemp(name))
        t0 = time.perf_counter()
        entries = run_all(cfg)
        runs.append(SimpleNamespace(cfg=cfg, out=cfg.output_dir, entries={e.stage: e for e in entries},
                                    seconds=time.perf_counter() - t0))
    return runs


@pytest.fixture(scope="session")
def toy_run(toy_runs):
    return toy_runs[0]


@pytest.fixture
def report_line(capsys):
    """Print one always-visible PASS/FAIL line, then assert."""
    def report(tag, ok, detail):
        with capsys.disabled():
            print(f"\n[{tag}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return report


@pytest.fixture(scope="session")
def toy_classifier(toy_run):
    from wsseg.pipeline import Context, _load_classifier
    return _load_classifier(Context(toy_run.cfg))


@pytest.fixture(scope="session")
def toy_context(toy_run):
    from wsseg.pipeline import Context
    return Context(toy_run.cfg)
