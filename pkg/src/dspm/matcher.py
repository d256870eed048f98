"""Probabilistic matching: per-source-view cost volumes, two-component
Laplace mixture fitting, uncertainty maps, unified-volume depth regression,
and uncertainty-scaled perturbation.

Depth candidates live in normalized inverse depth z; mixture parameters use
the coordinate y = z * m0_init so that one unit equals one initial
inverse-depth interval, which makes sigma1 = 1 and the acceptance radius
R2 = 1 scene-scale free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import mixture as mx
from . import nn
from .errors import ConfigurationError
from .geometry import pixel_grid, warp_terms

_SQRT2 = math.sqrt(2.0)


def build_cost_volumes(ref_feat, src_feats, ref_cam, src_cams, z_cands, domain, groups):
    """Group-correlation volumes [G, m, H, W], one per source view.

    Each pixel's candidates induce their own warp (plane sweep applied
    pixel-wise): the source position of pixel p at inverse depth z is the
    perspective division of A p~ + b * (z * span + 1/d_max). Candidates are
    Arrays, so gradients flow into the hypotheses through the sampling
    coordinates as well as through the regression weights.
    """
    c, h, w = ref_feat.data.shape
    if c % groups:
        raise ConfigurationError(f"{groups} groups do not divide {c} channels")
    m = z_cands.data.shape[0]
    dt = ref_feat.data.dtype
    grid = pixel_grid(h, w)
    span = 1.0 / domain.d_min - 1.0 / domain.d_max
    inv_dmax = 1.0 / domain.d_max
    ref_g = dc.reshape(ref_feat, (groups, c // groups, h, w))
    scale = float(groups) / float(c)
    volumes = []
    for feat, cam in zip(src_feats, src_cams):
        A, b = warp_terms(ref_cam, cam)
        hx = (A[0, 0] * grid[0] + A[0, 1] * grid[1] + A[0, 2]).astype(dt)[None]
        hy = (A[1, 0] * grid[0] + A[1, 1] * grid[1] + A[1, 2]).astype(dt)[None]
        hz = (A[2, 0] * grid[0] + A[2, 1] * grid[1] + A[2, 2]).astype(dt)[None]
        inv_d = dc.add(dc.mul(z_cands, float(span)), float(inv_dmax))  # [m,h,w]
        den = dc.add(dc.mul(inv_d, float(b[2])), dc.Array(hz, dtype=dt))
        cx = dc.div(dc.add(dc.mul(inv_d, float(b[0])), dc.Array(hx, dtype=dt)), den)
        cy = dc.div(dc.add(dc.mul(inv_d, float(b[1])), dc.Array(hy, dtype=dt)), den)
        per_cand = []
        for j in range(m):
            coords = dc.concat([dc.slice_axis(cx, 0, j, j + 1), dc.slice_axis(cy, 0, j, j + 1)], axis=0)
            warped = dc.bilinear_sample(feat, coords)
            wg = dc.reshape(warped, (groups, c // groups, h, w))
            s_j = dc.mul(dc.reduce_sum(dc.mul(ref_g, wg), axis=1), scale)  # [G,h,w]
            per_cand.append(dc.reshape(s_j, (groups, 1, h, w)))
        volumes.append(dc.concat(per_cand, axis=1))
    return volumes


@dataclass
class ViewMixtureMaps:
    """Per-source-view mixture parameters (mean comes from regression)."""

    alpha_logits: dc.Array  # [2,H,W]
    alpha1: dc.Array  # [H,W]
    alpha2: dc.Array  # [H,W]
    sigma2: dc.Array  # [H,W], y units
    u: dc.Array  # [H,W], P(|y-mu| < R2)


@dataclass
class EvaluationResult:
    mu: dc.Array  # [H,W] regressed depth, z domain
    weights: dc.Array  # [m,H,W] softmax over candidates
    scores: dc.Array  # [m,H,W] regularized volume
    views: list  # ViewMixtureMaps per source view
    e_sigma: dc.Array  # [H,W] visibility-weighted sigma2, y units


def normalized_visibility(us, eps_u=1e-6):
    """u_i / (sum_i u_i + eps): visibility weights summing to ~1."""
    total = us[0]
    for u in us[1:]:
        total = dc.add(total, u)
    inv = dc.div(1.0, dc.add(total, eps_u))
    return [dc.mul(u, inv) for u in us]


def expected_sigma(us, sigmas, eps_u=1e-6):
    """Visibility-weighted sigma2 across views (a convex combination)."""
    acc = None
    for w, s in zip(normalized_visibility(us, eps_u), sigmas):
        term = dc.mul(w, s)
        acc = term if acc is None else dc.add(acc, term)
    return acc


class UncertaintyHead(nn.Module):
    """Cost volume -> per-pixel (sigma2, alpha) for one source view.

    A candidate-axis 3-D conv embeds the score profile, max+mean pooling
    removes the variable candidate count, and a small 2-D stack decodes the
    three output channels (two alpha logits, one raw sigma).
    """

    def __init__(self, rng, groups=8, width=16):
        super().__init__()
        self.embed = nn.Conv3d(groups, width // 2, (3, 1, 1), rng)
        self.mix1 = nn.CBL(width, width, 3, rng)
        self.mix2 = nn.CBL(width, width, 3, rng)
        self.out = nn.Conv2d(width, 3, 3, rng, weight_scale=0.1)

    def __call__(self, volume):
        e = dc.leaky_relu(self.embed(volume), slope=0.1)  # [width/2, m, h, w]
        pooled = dc.concat([dc.reduce_max(e, axis=1), dc.reduce_mean(e, axis=1)], axis=0)
        return self.out(self.mix2(self.mix1(pooled)))  # [3,h,w]


class Regularizer(nn.Module):
    """3-layer 3-D conv stack (G -> 8 -> 8 -> 1, kernel 3, shape preserving)
    mapping the unified volume to per-candidate scores.

    Weights initialize near a group-averaging identity so the untrained
    solver already scores photoconsistent candidates highest; training only
    has to refine that.
    """

    def __init__(self, rng, groups=8, width=8, gain=20.0):
        super().__init__()
        self.c1 = nn.Conv3d(groups, width, 3, rng, weight_scale=0.05)
        self.c2 = nn.Conv3d(width, width, 3, rng, weight_scale=0.05)
        self.c3 = nn.Conv3d(width, 1, 3, rng, weight_scale=0.05)
        # spatially box-averaged group mean at the candidate-center slice;
        # the gain sets the initial softmax temperature over candidates
        # (without it the fresh regression collapses to the candidate mean)
        self.c1.weight.data[:, :, 1, :, :] += 1.0 / (groups * 9.0)
        self.c2.weight.data[np.arange(width), np.arange(width), 1, 1, 1] += 1.0
        self.c3.weight.data[0, :, 1, 1, 1] += gain / width

    def __call__(self, volume):
        y = dc.leaky_relu(self.c1(volume), slope=0.1)
        y = dc.leaky_relu(self.c2(y), slope=0.1)
        s = self.c3(y)  # [1,m,h,w]
        return dc.reshape(s, s.data.shape[1:])


class Matcher(nn.Module):
    def __init__(self, rng, groups=8, sigma1=1.0, sigma_max=16.0, r2=1.0,
                 eps_u=1e-6, eps_sigma=1e-3, sigma_scale=1.0, eq5_squared=False):
        super().__init__()
        self.head = UncertaintyHead(rng, groups=groups)
        self.regularizer = Regularizer(rng, groups=groups)
        self._groups = groups
        self._sigma1 = float(sigma1)
        self._sigma_max = float(sigma_max)
        self._r2 = float(r2)
        self._eps_u = float(eps_u)
        self._eps_sigma = float(eps_sigma)
        self._sigma_scale = float(sigma_scale)
        self._eq5_squared = bool(eq5_squared)

    def infer_view(self, volume):
        """Branch 1: decode (alpha, sigma2, u) from one view's volume."""
        raw = self.head(volume)
        logits = dc.slice_axis(raw, 0, 0, 2)
        alphas = dc.softmax(logits, axis=0)
        h, w = raw.data.shape[-2:]
        a1 = dc.reshape(dc.slice_axis(alphas, 0, 0, 1), (h, w))
        a2 = dc.reshape(dc.slice_axis(alphas, 0, 1, 2), (h, w))
        raw_sigma = dc.reshape(dc.slice_axis(raw, 0, 2, 3), (h, w))
        sigma2 = dc.add(dc.mul(dc.softplus(raw_sigma), self._sigma_scale),
                        self._sigma1 + self._eps_sigma)
        sigma2 = dc.clip(sigma2, None, self._sigma_max)
        u = self.uncertainty(a1, a2, sigma2)
        return ViewMixtureMaps(logits, a1, a2, sigma2, u)

    def uncertainty(self, alpha1, alpha2, sigma2):
        """P(|y - mu| < R2) under the mixture; strictly inside (0, 1)."""
        c1 = 1.0 - math.exp(-_SQRT2 * self._r2 / self._sigma1)
        b2 = dc.sub(1.0, dc.exp(dc.div(-_SQRT2 * self._r2, sigma2)))
        if self._eq5_squared:
            c1 = c1 * c1
            b2 = dc.mul(b2, b2)
        return dc.add(dc.mul(alpha1, c1), dc.mul(alpha2, b2))

    def evaluate(self, ref_feat, src_feats, ref_cam, src_cams, z_cands, domain):
        """Stage III: volumes, mixture branch, unified volume, regression."""
        volumes = build_cost_volumes(ref_feat, src_feats, ref_cam, src_cams,
                                     z_cands, domain, self._groups)
        views = [self.infer_view(v) for v in volumes]
        vis = normalized_visibility([vm.u for vm in views], self._eps_u)
        h, w = ref_feat.data.shape[1], ref_feat.data.shape[2]
        unified = None
        for w_i, vol in zip(vis, volumes):
            term = dc.mul(vol, dc.reshape(w_i, (1, 1, h, w)))
            unified = term if unified is None else dc.add(unified, term)
        scores = self.regularizer(unified)
        weights = dc.softmax(scores, axis=0)
        mu = dc.reduce_sum(dc.mul(weights, z_cands), axis=0)
        e_sigma = expected_sigma([vm.u for vm in views], [vm.sigma2 for vm in views], self._eps_u)
        return EvaluationResult(mu, weights, scores, views, e_sigma)

    def negative_log_likelihood(self, mu_z, view, y_gt, domain):
        """Per-pixel -log p(y_gt | psi) for one source view, in y units.

        Computed in log-sum-exp form from the alpha logits, so extreme
        mixture weights stay stable.
        """
        mu_y = dc.mul(mu_z, float(domain.m0_init))
        dev = dc.absolute(dc.sub(mu_y, dc.Array(y_gt.astype(np.float32))))
        lsm = dc.sub(view.alpha_logits, dc.logsumexp(view.alpha_logits, axis=0, keepdims=True))
        h, w = dev.data.shape
        la1 = dc.reshape(dc.slice_axis(lsm, 0, 0, 1), (h, w))
        la2 = dc.reshape(dc.slice_axis(lsm, 0, 1, 2), (h, w))
        c1 = dc.sub(dc.sub(la1, math.log(_SQRT2 * self._sigma1)),
                    dc.mul(dev, _SQRT2 / self._sigma1))
        c2 = dc.sub(dc.sub(la2, dc.log(dc.mul(view.sigma2, _SQRT2))),
                    dc.mul(dc.div(dev, view.sigma2), _SQRT2))
        top = dc.maximum(c1, c2)
        logp = dc.add(top, dc.log(dc.add(dc.exp(dc.sub(c1, top)), dc.exp(dc.sub(c2, top)))))
        return dc.neg(logp)


def perturb(mu_z, e_sigma_y, eps, m2, domain):
    """Stage IV candidates: equal-mass bin midpoints of the Laplace
    centered on mu with scale E(sigma2), range +-eps*E(sigma2).

    Covered mass is sigma-free, so candidates are mu_y + E(sigma2) * c_j
    with fixed coefficients; output is [m2,H,W] clamped back to z in [0,1].
    """
    coeffs, _ = mx.perturbation_coefficients(eps, m2)
    m0 = float(domain.m0_init)
    mu_y = dc.mul(mu_z, m0)
    rows = [dc.add(mu_y, dc.mul(e_sigma_y, float(cj))) for cj in coeffs]
    cands_y = dc.clip(dc.stack(rows, axis=0), 0.0, m0)
    return dc.mul(cands_y, 1.0 / m0)


def perturb_uniform(mu_z, half_range_y, m2, domain):
    """Fixed-range baseline: evenly spaced bin midpoints over
    [mu - r, mu + r] with the same half range r at every pixel."""
    m0 = float(domain.m0_init)
    mu_y = dc.mul(mu_z, m0)
    offsets = (-half_range_y + (np.arange(m2) + 0.5) * (2.0 * half_range_y / m2))
    rows = [dc.add(mu_y, float(o)) for o in offsets]
    cands_y = dc.clip(dc.stack(rows, axis=0), 0.0, m0)
    return dc.mul(cands_y, 1.0 / m0)
