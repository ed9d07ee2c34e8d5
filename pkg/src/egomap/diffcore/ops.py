"""Differentiable operators over :class:`Tensor`.

Every op accepts Tensors or numpy constants and returns a Tensor. A
backward closure is recorded only when a tape is active and some input
requires gradient; closures return one gradient (or None) per input.
Most ops accept a leading batch axis so a pool of environments can be
evaluated in one call.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, get_dtype, record

__all__ = [
    "add", "sub", "mul", "sum_", "mean", "reshape", "transpose", "slice_",
    "concat", "stack", "relu", "tanh", "sigmoid", "oneplus", "linear",
    "conv2d", "gru_cell", "softmax", "softmax_with_temperature", "log_softmax",
    "categorical_log_prob", "categorical_entropy", "mse", "bilinear_grid_sample",
    "scatter_mean", "cosine_scan", "l1_scan", "weighted_sum", "ShapeError",
]


class ShapeError(ValueError):
    pass


# Piecewise ops report their active branch here while a finite-difference
# probe is running, so probes that cross a kink can be recognised.
_branch_log: list | None = None


def _log_branch(mask: np.ndarray) -> None:
    if _branch_log is not None:
        _branch_log.append(np.packbits(mask.ravel()).tobytes())


def _d(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=get_dtype())


def _needs(x) -> bool:
    return isinstance(x, Tensor) and x.requires_grad


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    ad, bd = _d(a), _d(b)

    def backward(g):
        return (_unbroadcast(g, ad.shape) if _needs(a) else None,
                _unbroadcast(g, bd.shape) if _needs(b) else None)
    return record("add", ad + bd, (a, b), backward)


def sub(a, b) -> Tensor:
    ad, bd = _d(a), _d(b)

    def backward(g):
        return (_unbroadcast(g, ad.shape) if _needs(a) else None,
                _unbroadcast(-g, bd.shape) if _needs(b) else None)
    return record("sub", ad - bd, (a, b), backward)


def mul(a, b) -> Tensor:
    ad, bd = _d(a), _d(b)

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if _needs(a) else None,
                _unbroadcast(g * ad, bd.shape) if _needs(b) else None)
    return record("mul", ad * bd, (a, b), backward)


def relu(x) -> Tensor:
    xd = _d(x)
    mask = xd > 0
    _log_branch(mask)

    def backward(g):
        return (g * mask,)
    return record("relu", xd * mask, (x,), backward)


def tanh(x) -> Tensor:
    y = np.tanh(_d(x))

    def backward(g):
        return (g * (1.0 - y * y),)
    return record("tanh", y, (x,), backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x) -> Tensor:
    y = _sigmoid(_d(x))

    def backward(g):
        return (g * y * (1.0 - y),)
    return record("sigmoid", y, (x,), backward)


def oneplus(x) -> Tensor:
    """1 + log(1 + e^x); always >= 1."""
    xd = _d(x)
    y = 1.0 + np.logaddexp(0.0, xd)

    def backward(g):
        return (g * _sigmoid(xd),)
    return record("oneplus", y.astype(xd.dtype, copy=False), (x,), backward)


# ---------------------------------------------------------------- reductions and shape

def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    xd = _d(x)
    y = np.asarray(xd.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xd.shape),)
    return record("sum", y, (x,), backward)


def mean(x, axis=None) -> Tensor:
    xd = _d(x)
    n = xd.size if axis is None else xd.shape[axis]
    y = np.asarray(xd.mean(axis=axis))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, xd.shape),)
    return record("mean", y, (x,), backward)


def reshape(x, shape) -> Tensor:
    xd = _d(x)

    def backward(g):
        return (g.reshape(xd.shape),)
    return record("reshape", xd.reshape(shape), (x,), backward)


def transpose(x, axes) -> Tensor:
    xd = _d(x)
    inv = np.argsort(axes)

    def backward(g):
        return (g.transpose(inv),)
    return record("transpose", xd.transpose(axes), (x,), backward)


def slice_(x, index) -> Tensor:
    xd = _d(x)

    def backward(g):
        out = np.zeros_like(xd)
        out[index] = g
        return (out,)
    return record("slice", xd[index], (x,), backward)


def concat(xs, axis: int = -1) -> Tensor:
    datas = [_d(x) for x in xs]
    ax = axis % datas[0].ndim
    for d in datas[1:]:
        if d.ndim != datas[0].ndim or any(
                d.shape[i] != datas[0].shape[i] for i in range(d.ndim) if i != ax):
            raise ShapeError(f"concat along axis {axis}: incompatible shapes {[x.shape for x in datas]}")
    bounds = np.cumsum([0] + [d.shape[ax] for d in datas])

    def backward(g):
        return tuple(
            np.take(g, range(bounds[i], bounds[i + 1]), axis=ax) if _needs(x) else None
            for i, x in enumerate(xs))
    return record("concat", np.concatenate(datas, axis=ax), tuple(xs), backward)


def stack(xs, axis: int = 0) -> Tensor:
    datas = [_d(x) for x in xs]

    def backward(g):
        parts = np.moveaxis(g, axis, 0)
        return tuple(parts[i] if _needs(x) else None for i, x in enumerate(xs))
    return record("stack", np.stack(datas, axis=axis), tuple(xs), backward)


# ---------------------------------------------------------------- dense layers

def linear(x, weight, bias=None) -> Tensor:
    """y = x W^T + b for x of shape (..., n) and W of shape (m, n)."""
    xd, wd = _d(x), _d(weight)
    if wd.ndim != 2 or xd.shape[-1] != wd.shape[1]:
        raise ShapeError(f"linear: input {xd.shape} incompatible with weight {wd.shape}")
    y = xd @ wd.T
    if bias is not None:
        bd = _d(bias)
        if bd.shape != (wd.shape[0],):
            raise ShapeError(f"linear: bias {bd.shape} does not match weight {wd.shape}")
        y = y + bd

    def backward(g):
        g2 = g.reshape(-1, wd.shape[0])
        gx = (g @ wd) if _needs(x) else None
        gw = (g2.T @ xd.reshape(-1, wd.shape[1])) if _needs(weight) else None
        gb = g2.sum(axis=0) if bias is not None and _needs(bias) else None
        return gx, gw, gb
    return record("linear", y, (x, weight, bias), backward)


def _im2col(xp: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N, C, H, W) or (C, H, W) input with (O, C, k, k) filters."""
    xd, wd = _d(x), _d(weight)
    unbatched = xd.ndim == 3
    if unbatched:
        xd = xd[None]
    if xd.ndim != 4 or wd.ndim != 4 or wd.shape[2] != wd.shape[3]:
        raise ShapeError(f"conv2d: expected (N,C,H,W) input and (O,C,k,k) weight, got {xd.shape} and {wd.shape}")
    n, c, h, w = xd.shape
    o, ci, k, _ = wd.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {ci}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError(f"conv2d: spatial extent {h}x{w} (pad {padding}) smaller than kernel {k}")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols, ho, wo = _im2col(xp, k, stride)
    wmat = wd.reshape(o, -1)
    y = cols @ wmat.T
    if bias is not None:
        y += _d(bias)
    y = y.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    if unbatched:
        y = y[0]
    y = np.ascontiguousarray(y)
    del cols  # recomputed in backward; keeping it would dominate rollout memory

    def backward(g):
        g4 = g[None] if unbatched else g
        g2 = g4.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = gb = gx = None
        if _needs(weight):
            cols_b, _, _ = _im2col(xp, k, stride)
            gw = (g2.T @ cols_b).reshape(wd.shape)
        if bias is not None and _needs(bias):
            gb = g2.sum(axis=0)
        if _needs(x):
            gcols = (g2 @ wmat).reshape(n, ho, wo, c, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            if unbatched:
                gx = gx[0]
        return gx, gw, gb
    return record("conv2d", y, (x, weight, bias), backward)


def gru_cell(h, x, w_ih, w_hh, b_ih, b_hh) -> Tensor:
    """Two-gate GRU step; gate rows are stacked as (reset, update, candidate).

    h' = (1 - u) * h + u * n, so a saturated update gate u = 1 returns the
    candidate and u = 0 keeps the previous state.
    """
    hd, xd = _d(h), _d(x)
    wi, wh, bi, bh = _d(w_ih), _d(w_hh), _d(b_ih), _d(b_hh)
    size = hd.shape[-1]
    if wh.shape != (3 * size, size) or wi.shape != (3 * size, xd.shape[-1]):
        raise ShapeError(f"gru_cell: hidden {hd.shape}, input {xd.shape}, weights {wi.shape}/{wh.shape}")
    gi = xd @ wi.T + bi
    gh = hd @ wh.T + bh
    r = _sigmoid(gi[..., :size] + gh[..., :size])
    u = _sigmoid(gi[..., size:2 * size] + gh[..., size:2 * size])
    nh = gh[..., 2 * size:]
    n = np.tanh(gi[..., 2 * size:] + r * nh)
    out = (1.0 - u) * hd + u * n

    def backward(g):
        dn = g * u * (1.0 - n * n)
        du = g * (n - hd) * u * (1.0 - u)
        dr = dn * nh * r * (1.0 - r)
        dgi = np.concatenate([dr, du, dn], axis=-1)
        dgh = np.concatenate([dr, du, dn * r], axis=-1)
        gi2, gh2 = dgi.reshape(-1, 3 * size), dgh.reshape(-1, 3 * size)
        return (
            g * (1.0 - u) + dgh @ wh if _needs(h) else None,
            dgi @ wi if _needs(x) else None,
            gi2.T @ xd.reshape(-1, xd.shape[-1]) if _needs(w_ih) else None,
            gh2.T @ hd.reshape(-1, size) if _needs(w_hh) else None,
            gi2.sum(axis=0) if _needs(b_ih) else None,
            gh2.sum(axis=0) if _needs(b_hh) else None,
        )
    return record("gru_cell", out, (h, x, w_ih, w_hh, b_ih, b_hh), backward)


# ---------------------------------------------------------------- distributions

def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x) -> Tensor:
    return softmax_with_temperature(x, 1.0)


def softmax_with_temperature(scores, beta) -> Tensor:
    """exp(beta * x_i) / sum_j exp(beta * x_j) over the last axis.

    ``beta`` is a scalar or has one entry per leading index of ``scores``.
    """
    sd, bd = _d(scores), _d(beta)
    if not np.all(np.isfinite(sd)):
        raise ValueError("softmax_with_temperature: scores must be finite")
    if np.any(bd < 1.0 - 1e-6):
        raise ValueError(f"softmax_with_temperature: temperature must be >= 1, got min {bd.min()}")
    bexp = bd[..., None] if bd.ndim else bd
    p = _softmax(bexp * sd)

    def backward(g):
        dz = p * (g - (g * p).sum(axis=-1, keepdims=True))
        gs = dz * bexp if _needs(scores) else None
        gb = None
        if _needs(beta):
            gb = (dz * sd).sum(axis=-1)
            if bd.ndim == 0:
                gb = gb.sum()
        return gs, gb
    return record("softmax", p, (scores, beta), backward)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def log_softmax(logits) -> Tensor:
    ls = _log_softmax(_d(logits))
    p = np.exp(ls)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)
    return record("log_softmax", ls, (logits,), backward)


def categorical_log_prob(logits, actions) -> Tensor:
    """log pi(a) for logits (B, K) and integer actions (B,)."""
    ld = _d(logits)
    actions = np.asarray(actions, dtype=np.int64)
    ls = _log_softmax(ld)
    rows = np.arange(ld.shape[0])
    out = ls[rows, actions]

    def backward(g):
        grad = -np.exp(ls) * g[:, None]
        grad[rows, actions] += g
        return (grad,)
    return record("categorical_log_prob", out, (logits,), backward)


def categorical_entropy(logits) -> Tensor:
    ls = _log_softmax(_d(logits))
    p = np.exp(ls)
    ent = -(p * ls).sum(axis=-1)

    def backward(g):
        return (-g[..., None] * p * (ls + ent[..., None]),)
    return record("categorical_entropy", ent, (logits,), backward)


def mse(a, b) -> Tensor:
    ad, bd = _d(a), _d(b)
    diff = ad - bd
    n = diff.size

    def backward(g):
        gd = 2.0 * g * diff / n
        return (gd if _needs(a) else None, -gd if _needs(b) else None)
    return record("mse", np.asarray((diff * diff).mean()), (a, b), backward)


# ---------------------------------------------------------------- spatial memory primitives

def _grid_corners(grid: np.ndarray, h: int, w: int):
    """Bilinear corner indices/weights for normalized (x, y) grid coordinates.

    Normalized -1/+1 are the centers of the first/last cells. Coordinates
    within 1e-6 cells of an integer are snapped so axis-aligned grids
    reproduce cells exactly.
    """
    gx = (grid[..., 0].astype(np.float64) + 1.0) * 0.5 * (w - 1)
    gy = (grid[..., 1].astype(np.float64) + 1.0) * 0.5 * (h - 1)
    for arr in (gx, gy):
        r = np.rint(arr)
        snap = np.abs(arr - r) < 1e-6
        arr[snap] = r[snap]
    x0, y0 = np.floor(gx), np.floor(gy)
    fx, fy = gx - x0, gy - y0
    x0, y0 = x0.astype(np.int64), y0.astype(np.int64)
    corners = []
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            wgt = wx * wy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h) & (wgt > 0)
            idx = np.where(valid, yi * w + xi, 0)
            corners.append((idx, np.where(valid, wgt, 0.0)))
    return corners


def bilinear_grid_sample(source, grid) -> Tensor:
    """Sample (N, C, H, W) maps at an (N, H', W', 2) grid of normalized (x, y).

    Out-of-bounds neighbours contribute zero. The grid is a constant: no
    gradient flows into the sampling coordinates.
    """
    sd = _d(source)
    grid = np.asarray(grid)
    if sd.ndim != 4 or grid.ndim != 4 or grid.shape[-1] != 2 or grid.shape[0] != sd.shape[0]:
        raise ShapeError(f"bilinear_grid_sample: source {sd.shape}, grid {grid.shape}")
    n, c, h, w = sd.shape
    ho, wo = grid.shape[1:3]
    corners = _grid_corners(grid, h, w)
    flat = sd.reshape(n, c, h * w)
    out = np.zeros((n, c, ho * wo), dtype=sd.dtype)
    for idx, wgt in corners:
        idx2 = idx.reshape(n, 1, -1)
        out += np.take_along_axis(flat, np.broadcast_to(idx2, (n, c, idx2.shape[-1])), axis=2) \
            * wgt.reshape(n, 1, -1).astype(sd.dtype)

    def backward(g):
        g2 = g.reshape(n, c, ho * wo)
        offsets = (np.arange(n * c) * (h * w)).reshape(n, c, 1)
        total = np.zeros(n * c * h * w, dtype=np.float64)
        for idx, wgt in corners:
            flat_idx = (offsets + idx.reshape(n, 1, -1)).ravel()
            vals = (g2 * wgt.reshape(n, 1, -1)).ravel()
            total += np.bincount(flat_idx, weights=vals, minlength=total.size)
        return (total.reshape(sd.shape).astype(sd.dtype),)
    return record("bilinear_grid_sample", out.reshape(n, c, ho, wo), (source,), backward)


def scatter_mean(features, cells, n_cells: int) -> tuple[Tensor, np.ndarray]:
    """Average (B, K, C) feature vectors into ``n_cells`` cells per batch row.

    ``cells`` is (B, K) with -1 marking discarded entries. Returns the dense
    (B, n_cells, C) result (unoccupied rows are zero) and (B, n_cells) counts.
    """
    fd = _d(features)
    cells = np.asarray(cells, dtype=np.int64)
    if fd.ndim != 3 or cells.shape != fd.shape[:2]:
        raise ShapeError(f"scatter_mean: features {fd.shape} vs cells {cells.shape}")
    b, k, c = fd.shape
    if np.any(cells >= n_cells):
        raise ShapeError("scatter_mean: cell index out of range")
    valid = cells >= 0
    flat = (np.arange(b)[:, None] * n_cells + cells)[valid]
    counts = np.bincount(flat, minlength=b * n_cells)
    sums = np.zeros((b * n_cells, c), dtype=fd.dtype)
    np.add.at(sums, flat, fd[valid])
    occupied = counts > 0
    sums[occupied] /= counts[occupied, None].astype(fd.dtype)
    out = sums.reshape(b, n_cells, c)

    def backward(g):
        gflat = g.reshape(b * n_cells, c)
        grad = np.zeros_like(fd)
        grad[valid] = gflat[flat] / counts[flat, None].astype(fd.dtype)
        return (grad,)
    return record("scatter_mean", out, (features,), backward), counts.reshape(b, n_cells)


COSINE_EPS = 1e-8


def cosine_scan(values, query) -> Tensor:
    """Cosine similarity of a (B, C) query against every cell of (B, C, P)."""
    vd, qd = _d(values), _d(query)
    dot = np.einsum("bcp,bc->bp", vd, qd)
    nv = np.sqrt((vd * vd).sum(axis=1))
    nq = np.sqrt((qd * qd).sum(axis=1))[:, None]
    prod = nv * nq
    clamped = prod <= COSINE_EPS
    _log_branch(clamped)
    denom = np.where(clamped, COSINE_EPS, prod)
    s = dot / denom

    def backward(g):
        gd = g / denom
        # d(denom)/d(.) vanishes where the floor is active
        coef = np.where(clamped, 0.0, g * dot / (denom * denom))
        gv = gq = None
        if _needs(values):
            safe_nv = np.where(nv > 0, nv, 1.0)
            gv = qd[:, :, None] * gd[:, None, :] - vd * (coef * nq / safe_nv)[:, None, :]
        if _needs(query):
            safe_nq = np.where(nq > 0, nq, 1.0)
            gq = np.einsum("bcp,bp->bc", vd, gd) - qd * (coef * nv).sum(axis=1, keepdims=True) / safe_nq
        return gv, gq
    return record("cosine_scan", s, (values, query), backward)


def l1_scan(values, query) -> Tensor:
    """Negative L1 distance of a (B, C) query to every cell of (B, C, P)."""
    vd, qd = _d(values), _d(query)
    diff = vd - qd[:, :, None]
    _log_branch(diff > 0)
    s = -np.abs(diff).sum(axis=1)

    def backward(g):
        sg = -np.sign(diff) * g[:, None, :]
        return (sg if _needs(values) else None, -sg.sum(axis=2) if _needs(query) else None)
    return record("l1_scan", s, (values, query), backward)


def weighted_sum(weights, values) -> Tensor:
    """sum_p w[b, p] * v[b, d, p] -> (B, D)."""
    wd, vd = _d(weights), _d(values)
    out = np.einsum("bp,bdp->bd", wd, vd)

    def backward(g):
        gw = np.einsum("bd,bdp->bp", g, vd) if _needs(weights) else None
        gv = g[:, :, None] * wd[:, None, :] if _needs(values) else None
        return gw, gv
    return record("weighted_sum", out, (weights, values), backward)
