"""Multi-view depth fusion with geometric-consistency filtering, plus the
distance metrics used to score reconstructions.

A pixel survives fusion when at least `n_consist` other views agree with
it: its point reprojects into the other view, the other view's depth there
round-trips back within `tau_px` pixels and `tau_rel` relative depth.
Surviving depths are averaged over the agreeing views and back-projected.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigurationError


@dataclass
class PointCloud:
    points: np.ndarray  # [N,3] float64, scene units
    colors: np.ndarray | None = None  # [N,3] uint8


def _backproject_all(cam, depth, mask):
    ys, xs = np.nonzero(mask)
    d = depth[ys, xs].astype(np.float64)
    pts_h = np.stack([xs, ys, np.ones_like(xs)]).astype(np.float64)
    rays = np.linalg.solve(cam.K, pts_h)
    Xc = rays * d
    Xw = cam.R.T @ (Xc - cam.t[:, None])
    return Xw.T, ys, xs, d


def _project_all(cam, Xw):
    Xc = (cam.R @ Xw.T + cam.t[:, None])
    z = Xc[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        p = cam.K @ Xc
        uv = p[:2] / p[2]
    return uv.T, z


def fuse(depth_maps, cameras, images=None, tau_px=1.0, tau_rel=0.01, n_consist=2):
    """Filter per-view depth maps by cross-view consistency and merge.

    Returns a PointCloud; colors are attached when images ([H,W,3] float or
    uint8 per view) are given. n_consist larger than the number of other
    views yields an empty cloud.
    """
    if len(depth_maps) < 2 or len(depth_maps) != len(cameras):
        raise ConfigurationError("need >= 2 depth maps with matching cameras")
    h, w = depth_maps[0].shape
    all_pts, all_cols = [], []
    for a, (depth_a, cam_a) in enumerate(zip(depth_maps, cameras)):
        mask = depth_a > 0
        if not mask.any():
            continue
        Xw, ys, xs, d_a = _backproject_all(cam_a, depth_a, mask)
        n = len(d_a)
        consistent = np.zeros(n, dtype=np.int32)
        depth_sum = d_a.copy()
        for b, (depth_b, cam_b) in enumerate(zip(depth_maps, cameras)):
            if b == a:
                continue
            uv, z_ab = _project_all(cam_b, Xw)
            x0 = np.floor(uv[:, 0]).astype(np.int64)
            y0 = np.floor(uv[:, 1]).astype(np.int64)
            ok = (z_ab > 0) & (x0 >= 0) & (x0 < w - 1) & (y0 >= 0) & (y0 < h - 1)
            sub = np.nonzero(ok)[0]
            if len(sub) == 0:
                continue
            corners = np.stack([depth_b[y0[sub], x0[sub]], depth_b[y0[sub], x0[sub] + 1],
                                depth_b[y0[sub] + 1, x0[sub]], depth_b[y0[sub] + 1, x0[sub] + 1]])
            valid = (corners > 0).all(axis=0)
            sub = sub[valid]
            if len(sub) == 0:
                continue
            # interpolate inverse depth at the exact projection: affine in
            # pixel coordinates for planar surfaces, hence exact there
            fx = uv[sub, 0] - x0[sub]
            fy = uv[sub, 1] - y0[sub]
            inv = 1.0 / corners[:, valid]
            inv_d = ((1 - fx) * (1 - fy) * inv[0] + fx * (1 - fy) * inv[1]
                     + (1 - fx) * fy * inv[2] + fx * fy * inv[3])
            d_b = 1.0 / inv_d
            # round trip: lift view b's surface depth back and reproject to a
            pts_h = np.stack([uv[sub, 0], uv[sub, 1], np.ones(len(sub))]).astype(np.float64)
            rays_b = np.linalg.solve(cam_b.K, pts_h)
            Xb = cam_b.R.T @ (rays_b * d_b - cam_b.t[:, None])
            uv_back, d_back = _project_all(cam_a, Xb.T)
            err_px = np.hypot(uv_back[:, 0] - xs[sub], uv_back[:, 1] - ys[sub])
            err_d = np.abs(d_back - d_a[sub]) / d_a[sub]
            good = (d_back > 0) & (err_px <= tau_px) & (err_d <= tau_rel)
            gi = sub[good]
            consistent[gi] += 1
            depth_sum[gi] += d_back[good]
        keep = consistent >= n_consist
        if not keep.any():
            continue
        fused_d = depth_sum[keep] / (consistent[keep] + 1.0)
        pts_h = np.stack([xs[keep], ys[keep], np.ones(keep.sum())]).astype(np.float64)
        rays = np.linalg.solve(cam_a.K, pts_h)
        Xf = cam_a.R.T @ (rays * fused_d - cam_a.t[:, None])
        all_pts.append(Xf.T)
        if images is not None:
            img = images[a]
            col = img[ys[keep], xs[keep]]
            if col.dtype != np.uint8:
                col = np.clip(col * 255.0 + 0.5, 0, 255).astype(np.uint8)
            all_cols.append(col)
    if not all_pts:
        return PointCloud(np.zeros((0, 3)), None)
    pts = np.concatenate(all_pts)
    cols = np.concatenate(all_cols) if all_cols else None
    return PointCloud(pts, cols)


def backproject_ground_truth(records):
    """Dense sample cloud from every valid ground-truth pixel of every view
    (points lie exactly on the analytic surfaces)."""
    pts = []
    for rec in records:
        mask = rec.depth_gt > 0
        if mask.any():
            pts.append(_backproject_all(rec.camera, rec.depth_gt, mask)[0])
    return np.concatenate(pts) if pts else np.zeros((0, 3))


# ---------------------------------------------------------------------------
# metrics


def depth_metrics(depth, depth_gt, mask, thresholds=(0.04, 0.2)):
    """Masked mean absolute depth error plus threshold inlier fractions."""
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise ValueError("empty evaluation mask")
    err = np.abs(np.asarray(depth, np.float64) - np.asarray(depth_gt, np.float64))[mask]
    out = {"mae": float(err.mean())}
    for th in thresholds:
        out[f"frac_{th:g}"] = float((err < th).mean())
    return out


def cloud_metrics(cloud_points, gt_points):
    """Accuracy (cloud -> truth), completeness (truth -> cloud), and their
    mean. An empty reconstruction scores infinite with a warning."""
    gt_points = np.asarray(gt_points, dtype=np.float64)
    cloud_points = np.asarray(cloud_points, dtype=np.float64)
    if len(cloud_points) == 0:
        warnings.warn("empty reconstruction; metrics are infinite")
        return {"acc": float("inf"), "comp": float("inf"), "overall": float("inf")}
    acc = float(cKDTree(gt_points).query(cloud_points)[0].mean())
    comp = float(cKDTree(cloud_points).query(gt_points)[0].mean())
    return {"acc": acc, "comp": comp, "overall": 0.5 * (acc + comp)}


def nearest_distances_brute(points, queries):
    """O(N*M) nearest-neighbor oracle the spatial index is checked against."""
    out = np.empty(len(queries))
    for i, q in enumerate(queries):
        out[i] = np.sqrt(((points - q) ** 2).sum(axis=1).min())
    return out


# ---------------------------------------------------------------------------
# PLY output


def write_ply(path, cloud):
    """ASCII PLY with xyz floats and optional uchar rgb."""
    n = len(cloud.points)
    has_color = cloud.colors is not None
    with open(path, "w", encoding="ascii") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {n}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        if has_color:
            f.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        f.write("end_header\n")
        for i in range(n):
            x, y, z = cloud.points[i]
            if has_color:
                r, g, b = cloud.colors[i]
                f.write(f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}\n")
            else:
                f.write(f"{x:.6f} {y:.6f} {z:.6f}\n")
