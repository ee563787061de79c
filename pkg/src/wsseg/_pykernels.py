"""Pure numpy implementations of the inner loops in ``_ckernels.pyx``."""

import numpy as np

_CHUNK = 512


def rle_runs(flat):
    flat = np.asarray(flat, dtype=np.uint8)
    padded = np.concatenate([[0], flat != 0, [0]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    starts, stops = edges[0::2], edges[1::2]
    return np.stack([starts, stops - starts], axis=1).astype(np.int64)


def rle_fill(runs, n):
    out = np.zeros(n, dtype=np.uint8)
    for start, length in np.asarray(runs, dtype=np.int64).reshape(-1, 2):
        out[start:start + length] = 1
    return out


def confusion(gt, pred, k, ignore):
    keep = gt != ignore
    idx = gt[keep] * k + pred[keep]
    return np.bincount(idx, minlength=k * k).reshape(k, k).astype(np.int64)


def _kernel_rows(pos, feat, start, stop, w_g, w_b):
    rows = np.zeros((stop - start, pos.shape[0]))
    if w_g != 0.0:
        d = ((pos[start:stop, None, :] - pos[None, :, :]) ** 2).sum(-1)
        rows += w_g * np.exp(-0.5 * d)
    if w_b != 0.0:
        d = ((feat[start:stop, None, :] - feat[None, :, :]) ** 2).sum(-1)
        rows += w_b * np.exp(-0.5 * d)
    rows[np.arange(stop - start), np.arange(start, stop)] = 0.0
    return rows


def crf_kernel_matrix(pos, feat, w_g, w_b):
    n = pos.shape[0]
    out = np.empty((n, n))
    for s in range(0, n, _CHUNK):
        e = min(n, s + _CHUNK)
        out[s:e] = _kernel_rows(pos, feat, s, e, w_g, w_b)
    return out


def crf_message(pos, feat, q, w_g, w_b):
    n = pos.shape[0]
    out = np.empty((q.shape[0], n))
    for s in range(0, n, _CHUNK):
        e = min(n, s + _CHUNK)
        out[:, s:e] = q @ _kernel_rows(pos, feat, s, e, w_g, w_b).T
    return out


def path_max(boundary, paths):
    H, W = boundary.shape
    P = paths.shape[0]
    out = np.full((P, H, W), np.inf)
    for p in range(P):
        ey, ex = paths[p, -1]
        ys = slice(max(0, -ey), min(H, H - ey))
        xs = slice(max(0, -ex), min(W, W - ex))
        if ys.start >= ys.stop or xs.start >= xs.stop:
            continue
        acc = boundary[ys, xs].copy()
        for dy, dx in paths[p]:
            acc = np.maximum(acc, boundary[ys.start + dy:ys.stop + dy, xs.start + dx:xs.stop + dx])
        out[p, ys, xs] = acc
    return out


def crf_kernel_grid(colour, h, w, tg_y, tg_x, tb_y, tb_x, tc, w_g, w_b):
    n = h * w
    yy, xx = np.divmod(np.arange(n), w)
    out = np.empty((n, n), dtype=np.float32)
    for s in range(0, n, _CHUNK):
        e = min(n, s + _CHUNK)
        dy = np.abs(yy[s:e, None] - yy[None, :])
        dx = np.abs(xx[s:e, None] - xx[None, :])
        rows = w_g * tg_y[dy] * tg_x[dx] if w_g != 0.0 else np.zeros((e - s, n))
        if w_b != 0.0:
            b = w_b * tb_y[dy] * tb_x[dx]
            for c in range(colour.shape[1]):
                b = b * tc[np.abs(colour[s:e, None, c] - colour[None, :, c])]
            rows = rows + b
        rows[np.arange(e - s), np.arange(s, e)] = 0.0
        rows[rows <= 1e-30] = 0.0
        out[s:e] = rows
    return out
