"""Piecewise-planar synthetic multi-view scenes with exact analytic depth.

Scenes are rendered by casting one ray per pixel against a small set of
analytic primitives (a background plane, finite planar patches, cuboids),
so the ground-truth depth is exact by construction. Appearance is a
Lambertian procedural value-noise texture evaluated in world coordinates,
which makes surface points photoconsistent across views. Scenes always
contain at least one strong depth discontinuity and one weakly-textured
primitive, the two regimes the solver has to survive.

Rays are parameterized by camera-frame z, so the intersection parameter is
the ground-truth depth directly.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ConfigurationError, ParseError
from .geometry import Camera, back_project, load_camera_txt, project_point, save_camera_txt


@dataclass
class SceneSpec:
    """Knobs for one generated scene."""

    seed: int = 0
    n_patches: int = 2
    n_cuboids: int = 1
    d_min: float = 2.0
    d_max: float = 6.0
    texture_octaves: int = 4
    n_views: int = 3
    height: int = 64
    width: int = 80
    baseline: float = 0.35
    background: bool = True
    background_slope: float = 0.15
    parallel_views: bool = False  # identity rotations (rectified-style rig)
    texture_base_freq: float = 0.3  # lattice cells per scene unit, coarsest octave
    texture_amp: float | None = None  # force one shading amplitude on every surface

    def __post_init__(self):
        if self.n_views < 2:
            raise ConfigurationError("need at least two views")
        if not (0 < self.d_min < self.d_max):
            raise ConfigurationError("need 0 < d_min < d_max")
        if not self.background and self.n_patches + self.n_cuboids == 0:
            raise ConfigurationError("scene has no surfaces")


@dataclass
class ViewRecord:
    image: np.ndarray  # [H,W,3] float32 in [0,1]
    depth_gt: np.ndarray  # [H,W] float32 scene units, 0 marks invalid
    camera: Camera


# ---------------------------------------------------------------------------
# procedural texture: hashed 3-D value noise


def _hash01(ix, iy, iz, salt):
    salt_mix = (int(salt) * 0x27D4EB2F165667C5) & 0xFFFFFFFFFFFFFFFF
    h = (ix.astype(np.uint64) * np.uint64(0x9E3779B185EBCA87)
         ^ iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
         ^ iz.astype(np.uint64) * np.uint64(0x165667B19E3779F9)
         ^ np.uint64(salt_mix))
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xFF51AFD7ED558CCD)
    h ^= h >> np.uint64(33)
    h *= np.uint64(0xC4CEB9FE1A85EC53)
    h ^= h >> np.uint64(33)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def _value_noise(p, salt):
    """Trilinearly interpolated lattice noise at world points p [...,3]."""
    base = np.floor(p)
    f = p - base
    f = f * f * (3.0 - 2.0 * f)  # smoothstep fade
    idx = base.astype(np.int64)
    out = np.zeros(p.shape[:-1])
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (np.where(dx, f[..., 0], 1 - f[..., 0])
                     * np.where(dy, f[..., 1], 1 - f[..., 1])
                     * np.where(dz, f[..., 2], 1 - f[..., 2]))
                out += w * _hash01(idx[..., 0] + dx, idx[..., 1] + dy, idx[..., 2] + dz, salt)
    return out


def _texture(p, octaves, salt, base_freq=2.0):
    acc = np.zeros(p.shape[:-1])
    amp_total = 0.0
    for o in range(octaves):
        amp = 0.55 ** o
        acc += amp * _value_noise(p * (base_freq * 2.0 ** o), salt * 131 + o)
        amp_total += amp
    return acc / amp_total


# ---------------------------------------------------------------------------
# analytic primitives


class _Plane:
    """Plane patch (or infinite background when extents are None)."""

    def __init__(self, p0, normal, e1=None, e2=None):
        self.p0 = np.asarray(p0, dtype=np.float64)
        self.n = np.asarray(normal, dtype=np.float64)
        self.n = self.n / np.linalg.norm(self.n)
        self.e1 = e1
        self.e2 = e2

    def intersect(self, origin, dirs):
        denom = dirs @ self.n
        with np.errstate(divide="ignore", invalid="ignore"):
            s = ((self.p0 - origin) @ self.n) / denom
        hit = (np.abs(denom) > 1e-12) & (s > 1e-9) & np.isfinite(s)
        if self.e1 is not None:
            X = origin + s[..., None] * dirs
            d = X - self.p0
            a = (d @ self.e1) / (self.e1 @ self.e1)
            b = (d @ self.e2) / (self.e2 @ self.e2)
            hit &= (a >= 0) & (a <= 1) & (b >= 0) & (b <= 1)
        return np.where(hit, s, np.inf)


class _Cuboid:
    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)

    def intersect(self, origin, dirs):
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (self.lo - origin) / dirs
            t1 = (self.hi - origin) / dirs
        enter = np.nanmax(np.minimum(t0, t1), axis=-1)
        exit_ = np.nanmin(np.maximum(t0, t1), axis=-1)
        hit = (exit_ >= enter) & (enter > 1e-9) & np.isfinite(enter)
        return np.where(hit, enter, np.inf)


# ---------------------------------------------------------------------------
# rig and scene assembly


def _look_at(center, target):
    fwd = np.asarray(target, dtype=np.float64) - center
    nrm = np.linalg.norm(fwd)
    if nrm < 1e-12:
        return np.eye(3)
    z = fwd / nrm
    x = np.cross([0.0, 1.0, 0.0], z)
    xn = np.linalg.norm(x)
    x = np.array([1.0, 0.0, 0.0]) if xn < 1e-9 else x / xn
    y = np.cross(z, x)
    return np.stack([x, y, z])


def _build_cameras(spec, rng):
    f = 0.95 * spec.width
    cx = (spec.width - 1) / 2.0
    cy = (spec.height - 1) / 2.0
    K = np.array([[f, 0, cx], [0, f, cy], [0, 0, 1.0]])
    target = np.array([0.0, 0.0, 0.5 * (spec.d_min + spec.d_max)])
    cams = []
    for i in range(spec.n_views):
        if i == 0:
            center = np.zeros(3)
        else:
            center = rng.uniform(-1, 1, 3) * np.array([1.0, 0.7, 0.25]) * (spec.baseline / 2.0)
        R = np.eye(3) if spec.parallel_views else _look_at(center, target)
        cams.append(Camera(K, R, -R @ center, spec.d_min, spec.d_max))
    return cams


@dataclass
class _Surface:
    prim: object
    color: np.ndarray
    tex_amp: float
    tex_salt: int


def _build_surfaces(spec, rng, ref_cam):
    rg = spec.d_max - spec.d_min
    surfaces = []
    if spec.background:
        zb = spec.d_min + rng.uniform(0.58, 0.68) * rg
        tilt = rng.uniform(-1, 1, 2) * spec.background_slope
        n = np.array([tilt[0], tilt[1], -1.0])
        surfaces.append(_Surface(_Plane((0, 0, zb), n),
                                 rng.uniform(0.55, 0.95, 3), 0.35, int(rng.integers(1 << 30))))
    # one guaranteed near patch facing the reference camera creates a depth
    # step of at least ~0.15 * range against the background
    n_patches = spec.n_patches
    if n_patches > 0:
        d_near = spec.d_min + rng.uniform(0.12, 0.4) * rg
        uv = np.array([rng.uniform(0.3, 0.7) * spec.width, rng.uniform(0.3, 0.7) * spec.height])
        c0 = back_project(ref_cam, uv, d_near)
        half = rng.uniform(0.28, 0.5) * d_near * spec.width / ref_cam.K[0, 0] * 0.5
        tilt = rng.uniform(-0.35, 0.35, 2)
        n = np.array([tilt[0], tilt[1], -1.0])
        e1 = np.array([1.0, 0.0, tilt[0]]) * half * 2
        e2 = np.array([0.0, 1.0, tilt[1]]) * half * 2 * rng.uniform(0.5, 1.0)
        surfaces.append(_Surface(_Plane(c0 - 0.5 * e1 - 0.5 * e2, n, e1, e2),
                                 rng.uniform(0.3, 0.95, 3), 0.03, int(rng.integers(1 << 30))))
        n_patches -= 1
    for _ in range(n_patches):
        d0 = spec.d_min + rng.uniform(0.15, 0.5) * rg
        uv = np.array([rng.uniform(0.1, 0.9) * spec.width, rng.uniform(0.1, 0.9) * spec.height])
        c0 = back_project(ref_cam, uv, d0)
        half = rng.uniform(0.15, 0.4) * d0 * spec.width / ref_cam.K[0, 0] * 0.5
        tilt = rng.uniform(-0.4, 0.4, 2)
        e1 = np.array([1.0, 0.0, tilt[0]]) * half * 2
        e2 = np.array([0.0, 1.0, tilt[1]]) * half * 2 * rng.uniform(0.5, 1.2)
        surfaces.append(_Surface(_Plane(c0 - 0.5 * e1 - 0.5 * e2, (tilt[0], tilt[1], -1.0), e1, e2),
                                 rng.uniform(0.3, 0.95, 3), rng.uniform(0.2, 0.4), int(rng.integers(1 << 30))))
    for _ in range(spec.n_cuboids):
        d0 = spec.d_min + rng.uniform(0.2, 0.5) * rg
        uv = np.array([rng.uniform(0.15, 0.85) * spec.width, rng.uniform(0.15, 0.85) * spec.height])
        c0 = back_project(ref_cam, uv, d0)
        half = rng.uniform(0.08, 0.25, 3) * d0 * spec.width / ref_cam.K[0, 0]
        surfaces.append(_Surface(_Cuboid(c0 - half, c0 + half),
                                 rng.uniform(0.3, 0.95, 3), rng.uniform(0.25, 0.4), int(rng.integers(1 << 30))))
    return surfaces


def _render_view(spec, cam, surfaces):
    h, w = spec.height, spec.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    pix = np.stack([xs, ys, np.ones_like(xs)], axis=-1)
    dirs_cam = pix @ np.linalg.inv(cam.K).T  # unit camera-frame z
    dirs = dirs_cam @ cam.R  # rows of R are cam axes, so this is R^T applied
    origin = cam.center
    depth = np.full((h, w), np.inf)
    prim_id = np.full((h, w), -1, dtype=np.int32)
    for i, s in enumerate(surfaces):
        d = s.prim.intersect(origin, dirs)
        closer = d < depth
        depth = np.where(closer, d, depth)
        prim_id = np.where(closer, i, prim_id)
    valid = np.isfinite(depth) & (depth >= spec.d_min) & (depth <= spec.d_max)
    pts = origin + depth[..., None] * dirs
    img = np.zeros((h, w, 3))
    for i, s in enumerate(surfaces):
        mask = (prim_id == i) & valid
        if not mask.any():
            continue
        amp = s.tex_amp if spec.texture_amp is None else spec.texture_amp
        tex = _texture(pts[mask], spec.texture_octaves, s.tex_salt, base_freq=spec.texture_base_freq)
        shade = 0.62 + amp * (tex - 0.5) * 2.0
        img[mask] = np.clip(s.color * shade[:, None], 0.0, 1.0)
    depth_out = np.where(valid, depth, 0.0).astype(np.float32)
    return img.astype(np.float32), depth_out


def generate_scene(spec):
    """Render all views of one scene; deterministic for a fixed seed."""
    rng = np.random.default_rng(spec.seed)
    cams = _build_cameras(spec, rng)
    surfaces = _build_surfaces(spec, rng, cams[0])
    records = []
    for cam in cams:
        img, depth = _render_view(spec, cam, surfaces)
        records.append(ViewRecord(img, depth, cam))
    return records


# ---------------------------------------------------------------------------
# photoconsistency oracle


def photoconsistency_check(records, n_samples=1000, seed=0):
    """Max color deviation between mutually visible surface points.

    Samples valid pixels of each view, reprojects them into the others, and
    compares bilinearly interpolated colors. Occluded points (projected
    depth disagreeing with the target view's ground truth by >1%) are
    excluded.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    h, w = records[0].depth_gt.shape
    for ia, rec_a in enumerate(records):
        valid = np.argwhere(rec_a.depth_gt > 0)
        if len(valid) == 0:
            continue
        pick = valid[rng.integers(0, len(valid), size=n_samples // len(records) + 1)]
        for iy, ix in pick:
            d = float(rec_a.depth_gt[iy, ix])
            X = back_project(rec_a.camera, (ix, iy), d)
            ca = rec_a.image[iy, ix]
            for ib, rec_b in enumerate(records):
                if ib == ia:
                    continue
                try:
                    uv, db = project_point(rec_b.camera, X)
                except ValueError:
                    continue
                x, y = uv
                if not (1.0 <= x <= w - 2.0 and 1.0 <= y <= h - 2.0):
                    continue
                x0, y0 = int(np.floor(x)), int(np.floor(y))
                corners = rec_b.depth_gt[y0:y0 + 2, x0:x0 + 2]
                if (corners <= 0).any() or np.abs(corners - db).max() > 0.01 * db:
                    continue  # occluded, or the bilinear footprint spans a depth edge
                fx, fy = x - x0, y - y0
                cb = ((1 - fx) * (1 - fy) * rec_b.image[y0, x0]
                      + fx * (1 - fy) * rec_b.image[y0, x0 + 1]
                      + (1 - fx) * fy * rec_b.image[y0 + 1, x0]
                      + fx * fy * rec_b.image[y0 + 1, x0 + 1])
                worst = max(worst, float(np.abs(ca - cb).max()))
    return worst


# ---------------------------------------------------------------------------
# on-disk dataset layout


def write_dataset(records, scene_dir):
    """Write images/%08d.png, cams/%08d_cam.txt, depths/%08d.pfm, pair.txt."""
    from . import pfm

    for sub in ("images", "cams", "depths"):
        os.makedirs(os.path.join(scene_dir, sub), exist_ok=True)
    for i, rec in enumerate(records):
        img8 = np.clip(rec.image * 255.0 + 0.5, 0, 255).astype(np.uint8)
        Image.fromarray(img8).save(os.path.join(scene_dir, "images", f"{i:08d}.png"))
        save_camera_txt(os.path.join(scene_dir, "cams", f"{i:08d}_cam.txt"), rec.camera)
        pfm.write_pfm(os.path.join(scene_dir, "depths", f"{i:08d}.pfm"), rec.depth_gt)
    centers = [rec.camera.center for rec in records]
    lines = [str(len(records))]
    for i in range(len(records)):
        others = sorted((j for j in range(len(records)) if j != i),
                        key=lambda j: (np.linalg.norm(centers[i] - centers[j]), j))
        lines.append(str(i))
        lines.append(f"{len(others)} " + " ".join(f"{j} {1.0:g}" for j in others))
    with open(os.path.join(scene_dir, "pair.txt"), "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def read_pair_file(scene_dir):
    """pair.txt -> list of source-view index lists, one per reference."""
    path = os.path.join(scene_dir, "pair.txt")
    try:
        with open(path, "r", encoding="ascii") as f:
            tokens = f.read().split("\n")
    except OSError as exc:
        raise ParseError(f"cannot read pair file: {exc}", path=path) from exc
    try:
        n = int(tokens[0])
        pairs = []
        for i in range(n):
            row = tokens[2 + 2 * i].split()
            k = int(row[0])
            pairs.append([int(row[1 + 2 * j]) for j in range(k)])
    except (IndexError, ValueError) as exc:
        raise ParseError(f"malformed pair file: {exc}", path=path) from exc
    return pairs


def read_dataset(scene_dir):
    """Load a scene directory back into ViewRecords (images as float32)."""
    from . import pfm

    img_dir = os.path.join(scene_dir, "images")
    if not os.path.isdir(img_dir):
        raise ParseError("missing images directory", path=img_dir)
    names = sorted(n for n in os.listdir(img_dir) if re.fullmatch(r"\d{8}\.png", n))
    records = []
    for name in names:
        idx = name[:-4]
        cam_path = os.path.join(scene_dir, "cams", f"{idx}_cam.txt")
        if not os.path.exists(cam_path):
            raise ParseError("missing camera file", path=cam_path)
        cam = load_camera_txt(cam_path)
        img = np.asarray(Image.open(os.path.join(img_dir, name)), dtype=np.float32) / 255.0
        depth = pfm.read_pfm(os.path.join(scene_dir, "depths", f"{idx}.pfm"))
        records.append(ViewRecord(img, depth, cam))
    if not records:
        raise ParseError("scene directory holds no views", path=scene_dir)
    return records
