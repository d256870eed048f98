"""Pinhole cameras, depth-induced homographies, and inverse-depth coordinates.

Conventions used throughout the package:

* world-to-camera maps are x_cam = R @ X + t;
* pixel (i, j) covers the unit square [i, i+1) x [j, j+1) and projection
  yields coordinates in index space, so the sample stored at column i sits
  at continuous coordinate i;
* when an image is rescaled by s the intrinsics transform as
  f -> f*s and c -> (c + 0.5)*s - 0.5, which keeps multi-scale warping
  consistent with the pixel-center rule above;
* fronto-parallel planes (normal along the reference viewing axis) induce
  the homographies used for plane sweeps.

All camera math runs in float64; only feature payloads are float32.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import ConfigurationError, ParseError


class BehindCameraError(ValueError):
    """Requested projection of a point at non-positive camera depth."""


@dataclass(eq=False)
class Camera:
    """Pinhole camera with its usable depth range (scene units)."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    d_min: float
    d_max: float

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not (0.0 < self.d_min < self.d_max):
            raise ConfigurationError(f"need 0 < d_min < d_max, got [{self.d_min}, {self.d_max}]")
        if np.abs(self.R.T @ self.R - np.eye(3)).max() > 1e-6 or np.linalg.det(self.R) < 0:
            raise ConfigurationError("rotation must be orthonormal with determinant +1")
        if abs(self.K[1, 0]) > 0 or abs(self.K[2, 0]) > 0 or abs(self.K[2, 1]) > 0:
            raise ConfigurationError("intrinsics must be upper triangular")
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0 or abs(self.K[2, 2] - 1.0) > 1e-9:
            raise ConfigurationError("intrinsics need positive focal lengths and K[2,2] == 1")

    @property
    def center(self):
        """Camera center in world coordinates."""
        return -self.R.T @ self.t


@dataclass(frozen=True)
class DepthDomain:
    """Normalized inverse-depth coordinates for a scene depth range.

    z runs in [0, 1] (1 at d_min, 0 at d_max). The mixture coordinate used
    by the probabilistic heads is y = z * m0_init, one unit per initial
    inverse-depth interval.
    """

    d_min: float
    d_max: float
    m0_init: int = 16

    def __post_init__(self):
        if not (0.0 < self.d_min < self.d_max):
            raise ConfigurationError(f"need 0 < d_min < d_max, got [{self.d_min}, {self.d_max}]")
        if self.m0_init < 1:
            raise ConfigurationError("m0_init must be >= 1")

    @property
    def _span(self):
        return 1.0 / self.d_min - 1.0 / self.d_max

    def normalize(self, d, warn_out_of_range=False):
        """Depth (scene units) -> z in [0, 1]; out-of-range depths clamp."""
        d = np.asarray(d, dtype=np.float64)
        if warn_out_of_range and ((d < self.d_min).any() or (d > self.d_max).any()):
            warnings.warn("depth outside [d_min, d_max]; clamping", stacklevel=2)
        d = np.clip(d, self.d_min, self.d_max)
        return (1.0 / d - 1.0 / self.d_max) / self._span

    def denormalize(self, z):
        """z in [0, 1] -> depth in scene units."""
        z = np.clip(np.asarray(z, dtype=np.float64), 0.0, 1.0)
        return 1.0 / (z * self._span + 1.0 / self.d_max)

    def z_to_y(self, z):
        return np.asarray(z, dtype=np.float64) * self.m0_init

    def y_to_z(self, y):
        return np.asarray(y, dtype=np.float64) / self.m0_init


def project_point(cam, X):
    """Project a world point; returns ((u, v), depth).

    Depth is the third camera-frame coordinate. Points at depth <= 0 raise
    BehindCameraError.
    """
    Xc = cam.R @ np.asarray(X, dtype=np.float64) + cam.t
    if Xc[2] <= 0:
        raise BehindCameraError(f"point at camera depth {Xc[2]:.6g}")
    p = cam.K @ Xc
    return p[:2] / p[2], float(Xc[2])


def back_project(cam, uv, depth):
    """Pixel + depth -> world point (inverse of project_point)."""
    uv = np.asarray(uv, dtype=np.float64)
    ray = np.linalg.solve(cam.K, np.array([uv[0], uv[1], 1.0]))
    Xc = ray * float(depth)  # ray has unit z, so depth scales directly
    return cam.R.T @ (Xc - cam.t)


def relative_motion(ref, src):
    """(R_rel, t_rel) mapping reference-camera coordinates to source."""
    R_rel = src.R @ ref.R.T
    t_rel = src.t - R_rel @ ref.t
    return R_rel, t_rel


def homography_for_depth(ref, src, d):
    """3x3 map from reference pixels to source pixels for the
    fronto-parallel plane at depth d in the reference frame."""
    if d <= 0:
        raise ConfigurationError(f"plane depth must be positive, got {d}")
    R_rel, t_rel = relative_motion(ref, src)
    n = np.array([0.0, 0.0, 1.0])
    try:
        Kr_inv = np.linalg.inv(ref.K)
    except np.linalg.LinAlgError as exc:
        raise ConfigurationError("singular intrinsics") from exc
    return src.K @ (R_rel + np.outer(t_rel, n) / d) @ Kr_inv


def warp_terms(ref, src):
    """Decompose pixel warping as p_src ~ A @ p~ + b / d.

    With A = K_s R_rel K_r^-1 and b = K_s t_rel, the source position of a
    reference pixel at depth d is the perspective division of
    A @ (u, v, 1) + b / d. This makes per-pixel candidate depths cheap to
    warp without building one homography per pixel.
    """
    R_rel, t_rel = relative_motion(ref, src)
    try:
        A = src.K @ R_rel @ np.linalg.inv(ref.K)
    except np.linalg.LinAlgError as exc:
        raise ConfigurationError("singular intrinsics") from exc
    b = src.K @ t_rel
    return A, b


def pixel_grid(h, w):
    """[2,H,W] float64 grid; channel 0 = x (column), channel 1 = y (row)."""
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([xs, ys]).astype(np.float64)


def apply_homography(H, grid):
    """Apply a 3x3 homography to a [2,H,W] pixel grid."""
    x, y = grid[0], grid[1]
    denom = H[2, 0] * x + H[2, 1] * y + H[2, 2]
    u = (H[0, 0] * x + H[0, 1] * y + H[0, 2]) / denom
    v = (H[1, 0] * x + H[1, 1] * y + H[1, 2]) / denom
    return np.stack([u, v])


def warp_feature(feat_src, H, grid=None):
    """Warp a source feature map into the reference view under H.

    feat_src is a diffcore Array [C,H,W]; gradients flow to feat_src. The
    warp coordinates are constants here (H comes from plain camera math).
    """
    c, h, w = feat_src.data.shape
    if grid is None:
        grid = pixel_grid(h, w)
    coords = apply_homography(H, grid)
    return dc.bilinear_sample(feat_src, dc.Array(coords.astype(feat_src.data.dtype), dtype=feat_src.data.dtype))


def scale_camera(cam, s):
    """Intrinsics for the same view rendered at scale s (e.g. 1/8)."""
    K = cam.K.copy()
    K[0, 0] *= s
    K[1, 1] *= s
    K[0, 1] *= s
    K[0, 2] = (K[0, 2] + 0.5) * s - 0.5
    K[1, 2] = (K[1, 2] + 0.5) * s - 0.5
    return Camera(K, cam.R, cam.t, cam.d_min, cam.d_max)


# ---------------------------------------------------------------------------
# camera text files


def save_camera_txt(path, cam):
    """Write the fixed camera text layout (extrinsic 4x4, intrinsic 3x3,
    depth range)."""
    E = np.eye(4)
    E[:3, :3] = cam.R
    E[:3, 3] = cam.t
    lines = ["extrinsic"]
    for row in E:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    lines.append("")
    lines.append("intrinsic")
    for row in cam.K:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    lines.append("")
    lines.append(f"{cam.d_min:.17g} {cam.d_max:.17g}")
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def load_camera_txt(path):
    try:
        with open(path, "r", encoding="ascii") as f:
            lines = [ln.rstrip("\n") for ln in f]
    except OSError as exc:
        raise ParseError(f"cannot read camera file: {exc}", path=path) from exc
    try:
        if lines[0].strip() != "extrinsic":
            raise ParseError("expected 'extrinsic' on line 1", path=path)
        E = np.array([[float(v) for v in lines[1 + i].split()] for i in range(4)])
        if lines[6].strip() != "intrinsic":
            raise ParseError("expected 'intrinsic' on line 7", path=path)
        K = np.array([[float(v) for v in lines[7 + i].split()] for i in range(3)])
        d_min, d_max = (float(v) for v in lines[11].split())
    except (IndexError, ValueError) as exc:
        raise ParseError(f"malformed camera file: {exc}", path=path) from exc
    if E.shape != (4, 4) or K.shape != (3, 3):
        raise ParseError("matrix block has wrong extent", path=path)
    return Camera(K, E[:3, :3], E[:3, 3], d_min, d_max)
