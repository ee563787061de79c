"""``wsseg`` command line.

    wsseg <stage> --config run.ini [--force] [--seed N] [--set section.key=value ...]
    wsseg run --config run.ini            # every stage in order
    wsseg sweep --config run.ini --grid grid.txt
    wsseg visualize --config run.ini --id train_0003 [--out fig.png]
    wsseg make-blobs DIR [--n-train 500 --n-val 100 --size 64 --seed 0]

Exit codes: 0 ok, 2 config/data error, 3 missing or stale upstream artifacts,
4 training failure, 1 anything else.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import load_config
from .errors import (CheckpointError, ConfigError, DataError, DependencyError, ParseError, SchemaError,
                     StaleArtifactError, TrainingError, WssegError)

log = logging.getLogger("wsseg")

EXIT_CODES = (
    (ConfigError, 2),
    (SchemaError, 2),
    (ParseError, 2),
    (DataError, 2),
    (DependencyError, 3),
    (StaleArtifactError, 3),
    (CheckpointError, 3),
    (TrainingError, 4),
)


def exit_code(exc):
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return 1


def _common(p, config_required=True):
    p.add_argument("--config", required=config_required, help="INI config file")
    p.add_argument("--seed", type=int, default=None, help="override [run] seed")
    p.add_argument("--output-dir", default=None, help="override [run] output_dir")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="wsseg", description="weakly-supervised segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in pipeline.STAGES + ("run",):
        p = sub.add_parser(stage, help="run all stages" if stage == "run" else f"run the {stage} stage")
        _common(p)
        p.add_argument("--force", action="store_true", help="rerun even when up to date")
    p = sub.add_parser("sweep", help="grid search over [refine] post-processing keys")
    _common(p)
    p.add_argument("--grid", required=True, help="file of 'refine.key = v1, v2' lines")
    p.add_argument("--out", default=None, help="CSV path (default <output_dir>/sweep/sweep.csv)")
    p = sub.add_parser("visualize", help="composite figure for one image")
    _common(p)
    p.add_argument("--id", required=True, dest="image_id")
    p.add_argument("--out", default=None, help="PNG path (default <output_dir>/visualize/<id>.png)")
    p = sub.add_parser("make-blobs", help="write the synthetic blobs dataset")
    p.add_argument("out_dir")
    p.add_argument("--n-train", type=int, default=500)
    p.add_argument("--n-val", type=int, default=100)
    p.add_argument("--n-test", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--noise", type=float, default=12.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args):
    cfg = load_config(args.config)
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    if args.output_dir is not None:
        overrides["run.output_dir"] = str(Path(args.output_dir).resolve())
    if overrides:
        from .config import validate
        cfg = validate(cfg.with_overrides(overrides))
    return cfg


def _dispatch(args):
    if args.command == "make-blobs":
        from .synthetic import make_blobs
        path = make_blobs(args.out_dir, args.n_train, args.n_val, args.n_test, args.size, args.seed,
                          noise=args.noise)
        print(path)
        return
    cfg = resolve_config(args)
    if args.command == "sweep":
        try:
            text = Path(args.grid).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read grid file {args.grid}: {exc}") from exc
        grid = pipeline.parse_grid(text)
        rows, path = pipeline.sweep(grid, cfg, out_csv=args.out)
        for r in rows:
            score = "-" if r["miou"] is None else f"{r['miou']:.4f}"
            point = " ".join(f"{k}={v}" for k, v in r.items() if k not in ("miou", "status"))
            print(f"{score}  {point}  {r['status']}")
        print(path)
    elif args.command == "visualize":
        ctx = pipeline.Context(cfg)
        if args.image_id not in {r.id for r in ctx.index.records}:
            raise DataError(f"unknown image id {args.image_id!r}")
        out = args.out or cfg.output_dir / "visualize" / f"{args.image_id}.png"
        print(pipeline.render_figure(ctx, args.image_id, out))
    elif args.command == "run":
        for entry in pipeline.run_all(cfg, args.force):
            print(f"{entry.stage}: {json.dumps(entry.metrics, sort_keys=True)}")
    else:
        entry = pipeline.run_stage(args.command, cfg, args.force)
        print(f"{entry.stage}: {json.dumps(entry.metrics, sort_keys=True)}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except WssegError as exc:
        print(f"wsseg: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
