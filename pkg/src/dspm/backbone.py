"""Shared-weight encoder producing the four-scale feature pyramid.

A strided conv stack descends to 1/8 resolution, then a top-down pathway
with lateral 1x1 connections and 3x3 smoothing emits features at 1/8, 1/4,
1/2 and full resolution with 64, 32, 16 and 8 channels. Total parameter
count stays under 0.2M.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from . import nn
from .errors import ConfigurationError

# channel widths, coarse (1/8) to fine (full resolution)
LEVEL_CHANNELS = (64, 32, 16, 8)


class FeatureEncoder(nn.Module):
    def __init__(self, rng):
        super().__init__()
        self.stem = nn.CBL(3, 8, 3, rng, spatial_zero_mean=True)
        self.down1 = nn.CBL(8, 16, 3, rng, stride=2)
        self.conv1 = nn.CBL(16, 16, 3, rng)
        self.down2 = nn.CBL(16, 32, 3, rng, stride=2)
        self.conv2 = nn.CBL(32, 32, 3, rng)
        self.down3 = nn.CBL(32, 64, 3, rng, stride=2)
        self.conv3 = nn.CBL(64, 64, 3, rng)
        # output smoothers end in per-image standardization (no activation):
        # zero-mean unit-variance responses per view give the dot-product
        # matcher usable contrast before any training, identically in
        # training and inference
        self.smooth_l1 = nn.CS(64, 64, 3, rng)
        self.lat_l2 = nn.Conv2d(32, 32, 1, rng)
        self.proj_l2 = nn.Conv2d(64, 32, 1, rng)
        self.smooth_l2 = nn.CS(32, 32, 3, rng)
        self.lat_l3 = nn.Conv2d(16, 16, 1, rng)
        self.proj_l3 = nn.Conv2d(32, 16, 1, rng)
        self.smooth_l3 = nn.CS(16, 16, 3, rng)
        self.lat_l4 = nn.Conv2d(8, 8, 1, rng)
        self.proj_l4 = nn.Conv2d(16, 8, 1, rng)
        self.smooth_l4 = nn.CS(8, 8, 3, rng)
        # each level starts as (a standardized copy of) its trunk tap: the
        # laterals and smoothers initialize near identity and the top-down
        # context path starts small. Deep random mixing otherwise whitens
        # the features until sub-pixel matching stops working; training is
        # free to grow both mixing and context.
        for lat in (self.lat_l2, self.lat_l3, self.lat_l4):
            c = lat.weight.data.shape[0]
            lat.weight.data *= 0.1
            lat.weight.data[np.arange(c), np.arange(c), 0, 0] += 1.0
        for smooth in (self.smooth_l1, self.smooth_l2, self.smooth_l3, self.smooth_l4):
            w = smooth.conv.weight.data
            w *= 0.1
            w[np.arange(w.shape[0]), np.arange(w.shape[0]), 1, 1] += 1.0
        for proj in (self.proj_l2, self.proj_l3, self.proj_l4):
            proj.weight.data *= 0.3

    def __call__(self, images):
        """[B,3,H,W] (H, W divisible by 8) -> four levels, coarse to fine."""
        h, w = images.data.shape[-2:]
        if h % 8 or w % 8:
            raise ConfigurationError(f"resolution {h}x{w} not divisible by 8; pad the input")
        e1 = self.stem(images)  # full res, 8ch
        e2 = self.conv1(self.down1(e1))  # 1/2, 16ch
        e3 = self.conv2(self.down2(e2))  # 1/4, 32ch
        e4 = self.conv3(self.down3(e3))  # 1/8, 64ch
        p1 = self.smooth_l1(e4)
        p2 = self.smooth_l2(dc.add(self.lat_l2(e3), dc.upsample2x_nearest(self.proj_l2(p1))))
        p3 = self.smooth_l3(dc.add(self.lat_l3(e2), dc.upsample2x_nearest(self.proj_l3(p2))))
        p4 = self.smooth_l4(dc.add(self.lat_l4(e1), dc.upsample2x_nearest(self.proj_l4(p3))))
        return [unit_features(p) for p in (p1, p2, p3, p4)]


def unit_features(f, eps=1e-6):
    """Scale per-pixel feature vectors to norm sqrt(C).

    Dot products of the result behave like cosines at unit per-channel
    scale, which removes the magnitude bias that otherwise dominates
    matching scores.
    """
    caxis = f.data.ndim - 3
    sq = dc.reduce_sum(dc.mul(f, f), axis=caxis, keepdims=True)
    c = f.data.shape[caxis]
    inv = dc.exp(dc.mul(dc.log(dc.add(sq, eps)), -0.5))
    return dc.mul(dc.mul(f, inv), float(np.sqrt(c)))


def encode_views(encoder, images):
    """Encode a stack of views [N,3,H,W] into per-view pyramids.

    Returns a list over levels of lists over views of [C,h,w] Arrays.
    The views share one batch so train-mode batch statistics are pooled.
    """
    levels = encoder(dc.Array(np.ascontiguousarray(images), dtype=np.float32)
                     if not isinstance(images, dc.Array) else images)
    n = levels[0].data.shape[0]
    out = []
    for lv in levels:
        c, hh, ww = lv.data.shape[1:]
        out.append([dc.reshape(dc.slice_axis(lv, 0, i, i + 1), (c, hh, ww)) for i in range(n)])
    return out
