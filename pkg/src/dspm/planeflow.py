"""Plane-structure estimation: intra-view correlation pyramid, coarse-to-fine
flow decoding, and flow-guided hypothesis propagation.

The flow field stores, per pixel, M 2-D offsets pointing at image locations
predicted to lie on the same scene plane. Channel layout is [2M, H, W] with
channels (2k, 2k+1) holding (dx, dy) of offset k, in pixels of the field's
own level. Magnitudes are bounded by `max_offset` via a scaled tanh on the
predictor outputs plus a hard clamp after residual refinement.
"""

from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc
from . import nn
from .errors import ConfigurationError
from .geometry import pixel_grid

# fixed 8-neighbor ring; also the bias initialization of the flow head and
# the non-learned baseline template for propagation ablations
NEIGHBOR_TEMPLATE = np.array(
    [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)],
    dtype=np.float64,
)


def build_correlation(feat, radius):
    """Dot products of each pixel's feature with its (2R+1)^2 neighborhood,
    scaled by 1/sqrt(channels); border neighbors clamp."""
    if radius < 1:
        raise ConfigurationError("correlation radius must be >= 1")
    return dc.local_correlation(feat, radius)


def build_correlation_pyramid(ref_levels, radius):
    """Correlation volumes for the coarse L-1 levels of the reference
    pyramid (the finest level is never correlated)."""
    return [build_correlation(f, radius) for f in ref_levels[:-1]]


class PlaneFlowDecoder(nn.Module):
    """Four densely connected CBL blocks plus per-level predictor heads.

    Level 1 predicts the full 2M-channel field; finer levels predict a
    shared 2-channel residual that is fetched at the coarse-flow target of
    each offset and added to the upsampled coarse field.
    """

    def __init__(self, rng, radius=3, n_offsets=8, max_offset=16.0, width=32):
        super().__init__()
        cin = (2 * radius + 1) ** 2
        self.blocks = [
            nn.CBL(cin, width, 3, rng),
            nn.CBL(cin + width, width, 3, rng),
            nn.CBL(cin + 2 * width, width, 3, rng),
            nn.CBL(cin + 3 * width, width, 3, rng),
        ]
        bundle = cin + 4 * width
        self.head_full = nn.Conv2d(bundle, 2 * n_offsets, 3, rng, weight_scale=0.01)
        self.head_residual = nn.Conv2d(bundle, 2, 3, rng, weight_scale=0.01)
        # start at the fixed neighbor ring so propagation is useful from the
        # first step; training deforms it
        if n_offsets == len(NEIGHBOR_TEMPLATE):
            bias = max_offset * np.arctanh(NEIGHBOR_TEMPLATE.reshape(-1) / max_offset)
            self.head_full.bias.data[...] = bias.astype(np.float32)
        self.n_offsets = n_offsets
        self.max_offset = float(max_offset)
        self.radius = radius

    def _bundle(self, corr):
        feats = [corr]
        for blk in self.blocks:
            feats.append(blk(dc.concat(feats, axis=0)))
        return dc.concat(feats, axis=0)

    def _bounded(self, raw):
        r = self.max_offset
        return dc.mul(dc.tanh(dc.mul(raw, 1.0 / r)), r)

    def __call__(self, corr_levels):
        """Correlation pyramid (coarse to fine) -> flow field per level."""
        flows = []
        coarse_full = None
        for ell, corr in enumerate(corr_levels, start=1):
            bundle = self._bundle(corr)
            if ell == 1:
                coarse_full = self._bounded(self.head_full(bundle))
                flows.append(coarse_full)
                continue
            residual = self._bounded(self.head_residual(bundle))
            gamma = float(2 ** (ell - 1))
            up = coarse_full
            for _ in range(ell - 1):
                up = dc.upsample2x_bilinear(up)
            up = dc.mul(up, gamma)
            h, w = up.data.shape[-2:]
            grid = pixel_grid(h, w).astype(np.float32)
            parts = []
            for k in range(self.n_offsets):
                off_k = dc.slice_axis(up, 0, 2 * k, 2 * k + 2)
                coords = dc.add(off_k, dc.Array(grid))
                fetched = dc.bilinear_sample(residual, coords)
                parts.append(dc.clip(dc.add(off_k, fetched), -self.max_offset, self.max_offset))
            flows.append(dc.concat(parts, axis=0))
        return flows


def upscale_flow(flow, max_offset=16.0):
    """Field for the next finer level: 2x spatially, magnitudes doubled,
    re-clamped. Used at the finest solver scale, one level past the
    correlation pyramid."""
    return dc.clip(dc.mul(dc.upsample2x_bilinear(flow), 2.0), -max_offset, max_offset)


def template_flow(h, w, n_offsets=None, dtype=np.float32):
    """Constant fixed-template field (the non-learned propagation baseline)."""
    offs = NEIGHBOR_TEMPLATE if n_offsets is None else NEIGHBOR_TEMPLATE[:n_offsets]
    data = np.repeat(offs.reshape(-1), h * w).reshape(-1, h, w).astype(dtype)
    return dc.Array(data, dtype=dtype)


def propagate(best_z, flow, m1):
    """Append m1 flow-guided neighbor hypotheses.

    best_z is the current best per-pixel depth estimate in normalized
    inverse depth, shape [H,W] or [1,H,W]; fetches are bilinear at p + o_k
    and the results clamp to [0, 1].
    """
    if best_z.data.ndim == 2:
        best_z = dc.reshape(best_z, (1,) + best_z.data.shape)
    n_off = flow.data.shape[0] // 2
    if m1 > n_off:
        raise ConfigurationError(f"requested {m1} propagation offsets but the field holds {n_off}")
    h, w = best_z.data.shape[-2:]
    if flow.data.shape[-2:] != (h, w):
        raise ConfigurationError("flow field and depth resolution disagree")
    grid = pixel_grid(h, w).astype(best_z.data.dtype)
    parts = []
    for k in range(m1):
        coords = dc.add(dc.slice_axis(flow, 0, 2 * k, 2 * k + 2), dc.Array(grid, dtype=best_z.data.dtype))
        parts.append(dc.clip(dc.bilinear_sample(best_z, coords), 0.0, 1.0))
    return dc.concat(parts, axis=0)
