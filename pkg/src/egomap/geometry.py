"""Camera model, inverse projection and frame conversions.

Axis conventions (used by every module):

* World frame: x east, y north, heading phi counter-clockwise from +x,
  wrapped to (-pi, pi].
* Egocentric frame: (forward, right) in meters. A PoseDelta (dx, dy, dphi)
  is the new pose expressed in the previous egocentric frame: dx forward,
  dy to the right, dphi counter-clockwise (a left turn is positive).
* Map grids: ego forward is map "up" (decreasing row), ego right is
  increasing column. The allocentric map is the egocentric grid of a
  virtual agent standing at the map anchor with heading 0, so world +x is
  up and world -y is right in storage.
* Normalized grid coordinates follow the align-corners convention: -1 and
  +1 are the centers of the first and last cells.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PERCEPTION_LAYERS = ((8, 4), (4, 2), (3, 1))


def wrap_angle(phi):
    """Wrap to (-pi, pi]."""
    out = np.pi - np.mod(np.pi - np.asarray(phi, dtype=np.float64), 2 * np.pi)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int = 112
    height: int = 64
    fov: float = math.pi / 2
    cx: float | None = None
    cy: float | None = None

    def __post_init__(self):
        if not 0 < self.fov < math.pi:
            raise ValueError(f"field of view must lie in (0, pi), got {self.fov}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        # pixel (i, j) covers [j, j+1) x [i, i+1); the principal point defaults to the image center
        if self.cx is None:
            object.__setattr__(self, "cx", self.width / 2)
        if self.cy is None:
            object.__setattr__(self, "cy", self.height / 2)

    @property
    def focal(self) -> float:
        return (self.width / 2) / math.tan(self.fov / 2)


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    phi: float

    def __post_init__(self):
        object.__setattr__(self, "phi", wrap_angle(self.phi))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.phi])


@dataclass(frozen=True)
class PoseDelta:
    dx: float
    dy: float
    dphi: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dphi])


def integrate(poses: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Apply (..., 3) egocentric deltas to (..., 3) world poses."""
    x, y, phi = poses[..., 0], poses[..., 1], poses[..., 2]
    dx, dy, dphi = deltas[..., 0], deltas[..., 1], deltas[..., 2]
    c, s = np.cos(phi), np.sin(phi)
    return np.stack([x + dx * c + dy * s, y + dx * s - dy * c, wrap_angle(phi + dphi)], axis=-1)


def relative_delta(prev: np.ndarray, new: np.ndarray) -> np.ndarray:
    """PoseDelta taking world pose ``prev`` to ``new`` (inverse of :func:`integrate`)."""
    ox, oy = new[..., 0] - prev[..., 0], new[..., 1] - prev[..., 1]
    c, s = np.cos(prev[..., 2]), np.sin(prev[..., 2])
    return np.stack([ox * c + oy * s, ox * s - oy * c, wrap_angle(new[..., 2] - prev[..., 2])], axis=-1)


# ---------------------------------------------------------------- receptive fields

def receptive_field_centers(layers=PERCEPTION_LAYERS, out_shape: tuple[int, int] = (4, 10)):
    """Center of each output cell's receptive field, in continuous pixel coordinates.

    Returns (rows, cols): 1-D arrays of length out_shape[0] and out_shape[1].
    Index i in a layer's output sees input indices [i*s, i*s + k), centered
    at i*s + (k - 1)/2; composing layers maps back to a pixel index, and +0.5
    converts an index to the pixel's continuous center.
    """
    def centers(n):
        c = np.arange(n, dtype=np.float64)
        for k, s in reversed(layers):
            c = c * s + (k - 1) / 2
        return c + 0.5
    return centers(out_shape[0]), centers(out_shape[1])


def effective_stride_and_field(layers=PERCEPTION_LAYERS) -> tuple[int, int]:
    stride, field = 1, 1
    for k, s in layers:
        field += (k - 1) * stride
        stride *= s
    return stride, field


def feature_sample_pixels(intr: CameraIntrinsics, layers=PERCEPTION_LAYERS,
                          out_shape: tuple[int, int] = (4, 10)) -> tuple[np.ndarray, np.ndarray]:
    """Integer (row, col) pixel whose depth stands for each feature cell."""
    rows, cols = receptive_field_centers(layers, out_shape)
    r = np.clip(np.floor(rows).astype(int), 0, intr.height - 1)
    c = np.clip(np.floor(cols).astype(int), 0, intr.width - 1)
    return r, c


# ---------------------------------------------------------------- projection

def unproject(u, v, depth, intr: CameraIntrinsics):
    """Pixel (u, v) at perpendicular depth d -> egocentric (forward, right).

    The vertical coordinate is dropped. Entries with non-positive depth come
    back as NaN so callers can discard them.
    """
    u = np.asarray(u, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    ok = d > 0
    forward = np.where(ok, d, np.nan)
    right = np.where(ok, d * (u - intr.cx) / intr.focal, np.nan)
    return np.stack(np.broadcast_arrays(forward, right), axis=-1)


def project(forward, right, intr: CameraIntrinsics):
    """Horizontal pixel coordinate of an egocentric point in front of the camera."""
    return intr.cx + intr.focal * np.asarray(right) / np.asarray(forward)


def _pose_parts(pose, point_ndim: int):
    pose = np.asarray(pose.as_array() if isinstance(pose, Pose) else pose, dtype=np.float64)
    x, y, phi = pose[..., 0], pose[..., 1], pose[..., 2]
    # batched poses broadcast against any trailing point axes
    shape = pose.shape[:-1] + (1,) * (point_ndim - pose.ndim)
    return tuple(a.reshape(shape) for a in (x, y, np.cos(phi), np.sin(phi)))


def ego_to_allocentric(p_ego, pose) -> np.ndarray:
    """(..., 2) egocentric (forward, right) -> world (x, y) for pose (x, y, phi)."""
    p = np.asarray(p_ego, dtype=np.float64)
    x, y, c, s = _pose_parts(pose, p.ndim)
    f, r = p[..., 0], p[..., 1]
    return np.stack([x + f * c + r * s, y + f * s - r * c], axis=-1)


def allocentric_to_ego(p_world, pose) -> np.ndarray:
    p = np.asarray(p_world, dtype=np.float64)
    x, y, c, s = _pose_parts(pose, p.ndim)
    ox, oy = p[..., 0] - x, p[..., 1] - y
    return np.stack([ox * c + oy * s, ox * s - oy * c], axis=-1)


# ---------------------------------------------------------------- grids

def cell_ego_coords(h: int, w: int, cell_size: float) -> np.ndarray:
    """(h, w, 2) egocentric (forward, right) of each cell center of a grid centered on its frame origin."""
    rows = np.arange(h, dtype=np.float64)
    cols = np.arange(w, dtype=np.float64)
    fwd = ((h - 1) / 2 - rows) * cell_size
    right = (cols - (w - 1) / 2) * cell_size
    f, r = np.meshgrid(fwd, right, indexing="ij")
    return np.stack([f, r], axis=-1)


def ego_to_grid_index(p_ego, h: int, w: int, cell_size: float) -> tuple[np.ndarray, np.ndarray]:
    """Continuous (row, col) index of egocentric points in a centered grid."""
    p = np.asarray(p_ego, dtype=np.float64)
    row = (h - 1) / 2 - p[..., 0] / cell_size
    col = (w - 1) / 2 + p[..., 1] / cell_size
    return row, col


def affine_grid(delta, out_hw: tuple[int, int], in_hw: tuple[int, int], cell_size: float) -> np.ndarray:
    """Sampling grid realizing Affine(M, dx, dy, dphi).

    ``delta`` is (..., 3): the output frame's pose expressed in the source
    map's egocentric frame. Returns (..., H', W', 2) normalized (x, y)
    source coordinates for bilinear_grid_sample.
    """
    d = np.asarray(delta.as_array() if isinstance(delta, (Pose, PoseDelta)) else delta, dtype=np.float64)
    lead = d.shape[:-1]
    cells = cell_ego_coords(out_hw[0], out_hw[1], cell_size)
    c = np.cos(d[..., 2]).reshape(lead + (1, 1))
    s = np.sin(d[..., 2]).reshape(lead + (1, 1))
    f, r = cells[..., 0], cells[..., 1]
    src_f = d[..., 0].reshape(lead + (1, 1)) + f * c + r * s
    src_r = d[..., 1].reshape(lead + (1, 1)) - f * s + r * c
    hi, wi = in_hw
    row = (hi - 1) / 2 - src_f / cell_size
    col = (wi - 1) / 2 + src_r / cell_size
    return np.stack([col * 2 / (wi - 1) - 1, row * 2 / (hi - 1) - 1], axis=-1)


def pose_in_anchor_frame(pose, anchor) -> np.ndarray:
    """World pose -> pose relative to the heading-0 frame at ``anchor`` (x, y)."""
    p = np.asarray(pose.as_array() if isinstance(pose, Pose) else pose, dtype=np.float64)
    a = np.asarray(anchor, dtype=np.float64)
    return np.stack([p[..., 0] - a[..., 0], -(p[..., 1] - a[..., 1]), p[..., 2]], axis=-1)


def invert_delta(delta) -> np.ndarray:
    """Delta taking the output frame back to the source frame."""
    d = np.asarray(delta.as_array() if isinstance(delta, (Pose, PoseDelta)) else delta, dtype=np.float64)
    c, s = np.cos(d[..., 2]), np.sin(d[..., 2])
    # source origin expressed in the output frame
    f = -(d[..., 0] * c - d[..., 1] * s)
    r = -(d[..., 0] * s + d[..., 1] * c)
    return np.stack([f, r, -d[..., 2]], axis=-1)
