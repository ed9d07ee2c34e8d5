"""Spatially structured agent memory.

The map is stored in a fixed allocentric frame anchored at the environment
center (heading 0), so features are written by pose-indexed scatter and the
only resampling happens when a read builds the agent-centred view. Writes
blend new and stored features with a momentum rule chosen per cell from
(previously written?, new feature present?).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .geometry import (CameraIntrinsics, affine_grid, ego_to_allocentric, ego_to_grid_index,
                       feature_sample_pixels, pose_in_anchor_frame, unproject)

MAP_CHANNELS = 16
MAP_SIZE = 24
BLEND_ALPHA = 0.9
MAP_PADDING = 1.2
METRICS = ("cosine", "l1")


def map_cell_size(extent: float, map_size: int = MAP_SIZE, padding: float = MAP_PADDING) -> float:
    """Cell edge in meters so the map covers the environment plus a margin."""
    return padding * extent / map_size


def coordinate_planes(size: int = MAP_SIZE) -> np.ndarray:
    """(2, size, size): x grows to the right, y grows towards the top (ego forward)."""
    lin = np.linspace(-1.0, 1.0, size)
    x = np.broadcast_to(lin[None, :], (size, size))
    y = np.broadcast_to(lin[::-1, None], (size, size))
    return np.stack([x, y])


@dataclass
class EgoMapState:
    """Batched allocentric map: features (B, C, H, W), integer occupancy (B, H, W)."""
    features: Tensor
    occupancy: np.ndarray
    anchor: np.ndarray  # (B, 2) world coordinates of the map center
    cell_size: float

    @classmethod
    def empty(cls, anchors, cell_size: float, channels: int = MAP_CHANNELS, size: int = MAP_SIZE) -> "EgoMapState":
        anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
        b = anchors.shape[0]
        feats = Tensor(np.zeros((b, channels, size, size), dtype=dc.get_dtype()))
        return cls(feats, np.zeros((b, size, size), dtype=np.int64), anchors.copy(), float(cell_size))

    @property
    def batch(self) -> int:
        return self.features.shape[0]

    @property
    def size(self) -> int:
        return self.features.shape[-1]

    def detach(self) -> "EgoMapState":
        return EgoMapState(self.features.detach(), self.occupancy.copy(), self.anchor.copy(), self.cell_size)

    def reset(self, mask, anchors=None) -> "EgoMapState":
        """Clear the rows flagged in ``mask`` (episode boundaries)."""
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            return self
        keep = (~mask).astype(self.features.data.dtype)[:, None, None, None]
        anchor = self.anchor.copy()
        if anchors is not None:
            anchor[mask] = np.asarray(anchors, dtype=np.float64)[mask]
        occ = self.occupancy.copy()
        occ[mask] = 0
        return EgoMapState(dc.mul(self.features, keep), occ, anchor, self.cell_size)


# ---------------------------------------------------------------- write

def world_to_map_cells(points, state: EgoMapState) -> np.ndarray:
    """Nearest map cell (flat index) of (B, ..., 2) world points; -1 when outside or NaN."""
    p = np.asarray(points, dtype=np.float64)
    b = p.shape[0]
    lead = p.shape[1:-1]
    anchor = state.anchor.reshape((b,) + (1,) * len(lead) + (2,))
    # the map is the ego grid of a heading-0 agent at the anchor: forward = +x, right = -y
    fwd = p[..., 0] - anchor[..., 0]
    right = -(p[..., 1] - anchor[..., 1])
    n = state.size
    row, col = ego_to_grid_index(np.stack([fwd, right], axis=-1), n, n, state.cell_size)
    ok = np.isfinite(row) & np.isfinite(col)
    ri = np.rint(np.where(ok, row, -1)).astype(np.int64)
    ci = np.rint(np.where(ok, col, -1)).astype(np.int64)
    ok &= (ri >= 0) & (ri < n) & (ci >= 0) & (ci < n)
    return np.where(ok, ri * n + ci, -1)


def blend_weights(occupied: np.ndarray, present: np.ndarray, alpha: float = BLEND_ALPHA) -> np.ndarray:
    """Per-cell weight on the stored value: 1 if nothing new, 0 if first write, else alpha."""
    return np.where(~present, 1.0, np.where(occupied, alpha, 0.0))


def write_cells(state: EgoMapState, vectors, cells, alpha: float = BLEND_ALPHA) -> EgoMapState:
    """Scatter-average (B, K, C) vectors into flat cells (B, K) and blend into the map."""
    b, c, n = state.batch, state.features.shape[1], state.size
    scattered, counts = dc.scatter_mean(vectors, cells, n * n)
    present = (counts > 0).reshape(b, n, n)
    occupied = state.occupancy > 0
    eta = blend_weights(occupied, present, alpha).astype(state.features.data.dtype)[:, None]
    new = dc.reshape(dc.transpose(scattered, (0, 2, 1)), (b, c, n, n))
    feats = dc.add(dc.mul(state.features, eta), dc.mul(new, 1.0 - eta))
    return EgoMapState(feats, state.occupancy + present, state.anchor, state.cell_size)


def project_features(depth: np.ndarray, poses: np.ndarray, intr: CameraIntrinsics,
                     grid_hw: tuple[int, int] = (4, 10)) -> np.ndarray:
    """World (x, y) of each perception cell, (B, h*w, 2); NaN where depth is not positive.

    Each cell takes the depth at its receptive-field center pixel and is
    unprojected through that pixel's own ray.
    """
    rows, cols = feature_sample_pixels(intr, out_shape=grid_hw)
    d = np.asarray(depth, dtype=np.float64)[:, rows[:, None], cols[None, :]]
    u = np.broadcast_to(cols[None, :] + 0.5, d.shape[1:])
    v = np.broadcast_to(rows[:, None] + 0.5, d.shape[1:])
    ego = unproject(u[None], v[None], d, intr)
    world = ego_to_allocentric(ego, poses)
    return world.reshape(d.shape[0], -1, 2)


def write(state: EgoMapState, features, depth: np.ndarray, poses: np.ndarray, intr: CameraIntrinsics,
          alpha: float = BLEND_ALPHA) -> EgoMapState:
    """Inverse-projective write of (B, C, h, w) perception features."""
    fd = features.shape
    b, c = fd[0], fd[1]
    cells = world_to_map_cells(project_features(depth, poses, intr, fd[2:]), state)
    vectors = dc.transpose(dc.reshape(features, (b, c, -1)), (0, 2, 1))
    return write_cells(state, vectors, cells, alpha)


# ---------------------------------------------------------------- reads

def egocentric_view(state: EgoMapState, poses, size: int = MAP_SIZE) -> Tensor:
    """(B, C + 2, size, size) agent-centred view: one resample plus coordinate planes."""
    delta = pose_in_anchor_frame(np.asarray(poses, dtype=np.float64), state.anchor)
    grid = affine_grid(delta, (size, size), (state.size, state.size), state.cell_size)
    feats = dc.bilinear_grid_sample(state.features, grid)
    planes = np.broadcast_to(coordinate_planes(size), (state.batch, 2, size, size)).astype(feats.data.dtype)
    return dc.concat([feats, planes], axis=1)


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return dc.parameter(rng.uniform(-bound, bound, size=shape))


class GlobalRead:
    """Conv (k 3,4,4; s 1,2,2; 16 filters) on the feature channels, then FC 256 ReLU, FC 32 tanh."""

    KERNELS = ((3, 1), (4, 2), (4, 2))
    HIDDEN = 256
    OUT = 32

    def __init__(self, rng: np.random.Generator, channels: int = MAP_CHANNELS, size: int = MAP_SIZE,
                 filters: int = 16):
        self.params: dict[str, Tensor] = {}
        cin, hw = channels, size
        for i, (k, s) in enumerate(self.KERNELS):
            self.params[f"conv{i}.w"] = init_uniform(rng, (filters, cin, k, k), cin * k * k)
            self.params[f"conv{i}.b"] = init_uniform(rng, (filters,), cin * k * k)
            cin, hw = filters, (hw - k) // s + 1
        self.flat = cin * hw * hw
        self.channels = channels
        self.params["fc0.w"] = init_uniform(rng, (self.HIDDEN, self.flat), self.flat)
        self.params["fc0.b"] = init_uniform(rng, (self.HIDDEN,), self.flat)
        self.params["fc1.w"] = init_uniform(rng, (self.OUT, self.HIDDEN), self.HIDDEN)
        self.params["fc1.b"] = init_uniform(rng, (self.OUT,), self.HIDDEN)

    def __call__(self, view: Tensor) -> Tensor:
        p = self.params
        x = dc.slice_(view, (slice(None), slice(0, self.channels)))
        for i, (_, s) in enumerate(self.KERNELS):
            x = dc.relu(dc.conv2d(x, p[f"conv{i}.w"], p[f"conv{i}.b"], stride=s))
        x = dc.reshape(x, (x.shape[0], -1))
        x = dc.relu(dc.linear(x, p["fc0.w"], p["fc0.b"]))
        return dc.tanh(dc.linear(x, p["fc1.w"], p["fc1.b"]))


@dataclass
class QueryResult:
    context: Tensor  # (B, C + 2): attended features then (x, y) position
    attention: Tensor  # (B, H * W)
    beta: np.ndarray  # (B,)


def attention_read(view: Tensor, query, beta_raw=None, metric: str = "cosine",
                   use_temperature: bool = True, use_position: bool = True,
                   channels: int = MAP_CHANNELS) -> QueryResult:
    """Score every view cell against ``query`` and return the attended average.

    Scores use the feature channels only; the context averages all
    channels, so its last two entries are the attended (x, y) position.
    With the position planes disabled those two entries are zero.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown similarity metric {metric!r}; expected one of {METRICS}")
    b, c_all, h, w = view.shape
    flat = dc.reshape(view, (b, c_all, h * w))
    values = dc.slice_(flat, (slice(None), slice(0, channels)))
    scores = dc.cosine_scan(values, query) if metric == "cosine" else dc.l1_scan(values, query)
    if use_temperature and beta_raw is not None:
        beta = dc.oneplus(beta_raw)
    else:
        beta = np.ones(b, dtype=view.data.dtype)
    attn = dc.softmax_with_temperature(scores, beta)
    context = dc.weighted_sum(attn, flat)
    if not use_position:
        mask = np.ones(c_all, dtype=view.data.dtype)
        mask[channels:] = 0.0
        context = dc.mul(context, mask)
    beta_vals = beta.data if isinstance(beta, Tensor) else beta
    return QueryResult(context, attn, np.array(beta_vals, dtype=np.float64))


# ---------------------------------------------------------------- snapshots

def save_snapshot(path, state: EgoMapState, index: int = 0, extra: dict | None = None) -> Path:
    """Write one map as ``<path>.npy`` plus a ``<path>.json`` metadata record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path.with_suffix(".npy"), np.asarray(state.features.data[index], dtype=np.float32))
    meta = {"anchor": state.anchor[index].tolist(), "cell_size": state.cell_size,
            "channels": int(state.features.shape[1]), "size": state.size,
            "occupancy": state.occupancy[index].tolist()}
    meta.update(extra or {})
    path.with_suffix(".json").write_text(json.dumps(meta))
    return path.with_suffix(".npy")


def load_snapshot(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    return np.load(path.with_suffix(".npy")), json.loads(path.with_suffix(".json").read_text())


# ---------------------------------------------------------------- resampling drift

def rotate_map(maps: np.ndarray, angle: float) -> np.ndarray:
    """Resample (B, C, H, W) maps under a rotation about the center (one bilinear pass)."""
    b, _, h, w = maps.shape
    grid = affine_grid(np.tile([0.0, 0.0, angle], (b, 1)), (h, w), (h, w), 1.0)
    with dc.no_tape():
        return dc.bilinear_grid_sample(maps, grid).data


def rotation_drift(stored: np.ndarray, step: float = np.radians(2.0), steps: int = 180):
    """Repeated-resample versus allocentric reads over ``steps`` rotations of ``step``.

    The naive pipeline keeps only the egocentric map and resamples it every
    step; the allocentric pipeline resamples the untouched stored map once
    per read with the cumulative angle. Returns the two final maps, each
    viewed at the cumulative angle, and per-step lists of both.
    """
    naive = [stored]
    allo = [stored]
    current = stored
    for k in range(1, steps + 1):
        current = rotate_map(current, step)
        naive.append(current)
        allo.append(rotate_map(stored, k * step))
    return naive, allo


def checkerboard(size: int = MAP_SIZE, channels: int = MAP_CHANNELS, square: int = 1) -> np.ndarray:
    """(1, C, size, size) +/-1 checkerboard, channel c shifted by c squares so channels differ."""
    i, j = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    out = np.empty((1, channels, size, size))
    for c in range(channels):
        out[0, c] = np.where(((i // square + j // square + c) % 2) == 0, 1.0, -1.0)
    return out
