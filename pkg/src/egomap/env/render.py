"""Column raycaster producing RGBD frames for a batch of block-grid worlds.

Each image column casts one ray through the pinhole model. Walls are
found by intersecting the ray with every grid line at once (no stepping
loop), so a whole batch is rendered with a handful of array operations.
Depth is the perpendicular (z-buffer) distance: the ray direction is
heading + a * right with a = (u - cx) / f, so the ray parameter already
measures distance along the optical axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import CameraIntrinsics

WALL_HEIGHT = 1.0
CAMERA_HEIGHT = 0.5
FLOOR_RGB = (0.35, 0.33, 0.30)
CEILING_RGB = (0.18, 0.18, 0.22)
Y_SIDE_SHADE = 0.75


@dataclass
class Billboard:
    x: float
    y: float
    rgb: tuple[float, float, float]
    half_width: float = 0.2
    height: float = 0.8


def cast_rays(grids: np.ndarray, block: np.ndarray, poses: np.ndarray, intr: CameraIntrinsics):
    """Perpendicular wall distance per column.

    grids: (B, n, n) bool; block: (B,) block size in meters; poses: (B, 3).
    Returns depth (B, W), hit cell (row, col) each (B, W), and a y-side flag.
    """
    b, n, _ = grids.shape
    u = np.arange(intr.width) + 0.5
    a = (u - intr.cx) / intr.focal
    c, s = np.cos(poses[:, 2])[:, None], np.sin(poses[:, 2])[:, None]
    # direction = heading + a * right, right = (sin, -cos)
    dx = c + a[None, :] * s
    dy = s - a[None, :] * c
    px = (poses[:, 0] / block)[:, None]
    py = (poses[:, 1] / block)[:, None]
    lines = np.arange(n + 1, dtype=np.float64)
    bi = np.arange(b)[:, None, None]

    def family(p_main, d_main, p_other, d_other, vertical):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (lines[None, None, :] - p_main[..., None]) / d_main[..., None]
        t = np.where(np.isfinite(t) & (t > 1e-12), t, np.inf)
        entered = np.where(d_main[..., None] > 0, lines, lines - 1).astype(int)
        other = np.floor(p_other[..., None] + t * d_other[..., None])
        other = np.where(np.isfinite(other), other, -1).astype(int)
        inside = (entered >= 0) & (entered < n) & (other >= 0) & (other < n)
        e_c, o_c = np.clip(entered, 0, n - 1), np.clip(other, 0, n - 1)
        solid = grids[bi, o_c, e_c] if vertical else grids[bi, e_c, o_c]
        hit = np.where(~inside | solid, t, np.inf)
        k = np.argmin(hit, axis=-1)
        tk = np.take_along_axis(hit, k[..., None], -1)[..., 0]
        ek = np.take_along_axis(e_c, k[..., None], -1)[..., 0]
        ok = np.take_along_axis(o_c, k[..., None], -1)[..., 0]
        return tk, (ok, ek) if vertical else (ek, ok)

    tv, (rv, cv) = family(px, dx, py, dy, vertical=True)
    th, (rh, ch) = family(py, dy, px, dx, vertical=False)
    yside = th < tv
    t = np.where(yside, th, tv)
    rows = np.where(yside, rh, rv)
    cols = np.where(yside, ch, cv)
    return t * block[:, None], rows, cols, yside


def render_batch(grids: np.ndarray, block: np.ndarray, wall_rgb: np.ndarray, poses: np.ndarray,
                 billboards: list[list[Billboard]], intr: CameraIntrinsics,
                 dtype=np.float64) -> np.ndarray:
    """Render (B, 4, H, W) frames: RGB in [0, 1] then depth in meters."""
    b = grids.shape[0]
    h, w = intr.height, intr.width
    f = intr.focal
    wall_d, rows, cols, yside = cast_rays(grids, block, poses, intr)
    v = np.arange(h) + 0.5
    off = v - intr.cy  # positive below the horizon
    with np.errstate(divide="ignore"):
        floor_d = np.where(off > 0, CAMERA_HEIGHT * f / off, np.inf)
        ceil_d = np.where(off < 0, (WALL_HEIGHT - CAMERA_HEIGHT) * f / -off, np.inf)
    plane_d = np.minimum(floor_d, ceil_d)
    # a pixel shows wall when the wall is nearer than the floor/ceiling point on its ray
    is_wall = wall_d[:, None, :] <= plane_d[None, :, None]
    out = np.empty((b, 4, h, w), dtype=dtype)
    depth = out[:, 3]
    np.copyto(depth, np.where(is_wall, wall_d[:, None, :], plane_d[None, :, None]))
    bi = np.arange(b)[:, None]
    col_rgb = wall_rgb[bi, rows, cols] * np.where(yside, Y_SIDE_SHADE, 1.0)[..., None]
    below = (off > 0)[:, None]
    for ch in range(3):
        plane = np.where(below, FLOOR_RGB[ch], CEILING_RGB[ch])
        np.copyto(out[:, ch], np.where(is_wall, col_rgb[:, None, :, ch], plane[None]))
    u = np.arange(w) + 0.5
    for e in range(b):
        if not billboards[e]:
            continue
        x, y, phi = poses[e]
        c, s = np.cos(phi), np.sin(phi)
        drawn = []
        for bb in billboards[e]:
            ox, oy = bb.x - x, bb.y - y
            z = ox * c + oy * s
            r = ox * s - oy * c
            if z > 0.05:
                drawn.append((z, r, bb))
        for z, r, bb in sorted(drawn, key=lambda t: -t[0]):
            uc = intr.cx + f * r / z
            col_mask = (np.abs(u - uc) <= f * bb.half_width / z) & (z < wall_d[e])
            if not col_mask.any():
                continue
            top = intr.cy - f * (bb.height - CAMERA_HEIGHT) / z
            bottom = intr.cy + f * CAMERA_HEIGHT / z
            row_mask = (v >= top) & (v <= bottom)
            mask = row_mask[:, None] & col_mask[None, :] & (z < depth[e])
            depth[e][mask] = z
            for ch in range(3):
                out[e, ch][mask] = bb.rgb[ch]
    return out
