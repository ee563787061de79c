"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 3] [--size 48] [--json out.json]

Every kernel is run on the same inputs under both backends; outputs are
checked for agreement before timings are reported.
"""

import argparse
import json
import sys
import timeit

import numpy as np

from wsseg import kernels
from wsseg.irnet import neighbor_offsets, offset_paths


def _gauss(n, sigma):
    d = np.arange(n, dtype=np.float64)
    return np.exp(-0.5 * (d / sigma) ** 2)


def make_cases(size, seed=0):
    rng = np.random.default_rng(seed)
    h = w = size
    n = h * w
    image = rng.integers(0, 256, (h, w, 3))
    yy, xx = np.divmod(np.arange(n), w)
    pos = np.stack([yy / 3.0, xx / 3.0], 1)
    feat = np.concatenate([np.stack([yy / 49.0, xx / 49.0], 1), image.reshape(n, 3) / 5.0], 1)
    q = rng.random((3, n))
    flat = (rng.random(256 * 256) < 0.3).astype(np.uint8)
    runs = kernels.rle_runs(flat)
    gt = rng.integers(0, 21, 512 * 512).astype(np.int64)
    gt[rng.random(gt.size) < 0.05] = 255
    pred = rng.integers(0, 21, 512 * 512).astype(np.int64)
    boundary = rng.random((64, 64))
    paths = offset_paths(neighbor_offsets(5, half=False)).astype(np.int64)
    colour = np.ascontiguousarray(image.reshape(n, 3), dtype=np.int64)
    return {
        "rle_runs": (flat,),
        "rle_fill": (runs, flat.size),
        "confusion": (gt, pred, 21, 255),
        "crf_kernel_matrix": (pos, feat, 3.0, 4.0),
        "crf_message": (pos, feat, q, 3.0, 4.0),
        "crf_kernel_grid": (colour, h, w, _gauss(h, 3.0), _gauss(w, 3.0), _gauss(h, 49.0), _gauss(w, 49.0),
                            _gauss(256, 5.0), 3.0, 4.0),
        "path_max": (boundary, paths),
    }


def run(size=48, repeat=3):
    found = kernels.backends()
    cases = make_cases(size)
    rows = []
    for name, args in cases.items():
        times, outs = {}, {}
        for backend, mod in found.items():
            fn = getattr(mod, name)
            outs[backend] = np.asarray(fn(*args))
            times[backend] = min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))
        if len(outs) == 2:
            a, b = outs["python"].astype(np.float64), outs["cython"].astype(np.float64)
            fin = np.isfinite(a)
            agree = bool(np.array_equal(fin, np.isfinite(b)) and np.allclose(a[fin], b[fin], rtol=1e-5, atol=1e-6))
        else:
            agree = None
        rows.append({"kernel": name, "python_s": times["python"], "cython_s": times.get("cython"),
                     "speedup": times["python"] / times["cython"] if "cython" in times else None,
                     "agree": agree})
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=48, help="image side for the CRF kernels")
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--json", default=None)
    args = ap.parse_args(argv)
    rows = run(args.size, args.repeat)
    print(f"default backend: {kernels.BACKEND}")
    print(f"{'kernel':<20} {'python [s]':>11} {'cython [s]':>11} {'speedup':>8}  agree")
    for r in rows:
        cy = "-" if r["cython_s"] is None else f"{r['cython_s']:.4f}"
        sp = "-" if r["speedup"] is None else f"{r['speedup']:.1f}x"
        print(f"{r['kernel']:<20} {r['python_s']:>11.4f} {cy:>11} {sp:>8}  {r['agree']}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=2)
    return 0 if all(r["agree"] is not False for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
