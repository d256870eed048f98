"""Four-scale PatchMatch solver: initialization, propagation, evaluation,
perturbation, the losses, and the training loop.

One iteration runs per scale. Scale 1 (1/8 resolution) stratifies random
hypotheses over the inverse-depth range, scores them once to pick a
propagation source, propagates along the plane flow field, and evaluates.
Scales 2..4 upsample the previous mean and its uncertainty, sample new
hypotheses around the mean with the uncertainty-scaled equal-mass binning,
propagate, and evaluate. All candidate bookkeeping happens in normalized
inverse depth.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import checkpoint as ckpt_io
from . import diffcore as dc
from . import matcher as mt
from . import planeflow as pf
from .backbone import LEVEL_CHANNELS, FeatureEncoder, encode_views
from .errors import ConfigurationError
from .geometry import DepthDomain, scale_camera
from . import nn


@dataclass
class SolverConfig:
    m0: int = 16
    m1: int = 8
    m2: int = 8
    eps: tuple = (2.0, 2.0, 1.0)
    lambda1: float = 1.0
    lambda2: float = 0.1
    r2: float = 1.0
    groups: int = 8
    lr: float = 1e-3
    lr_matcher: float = 1e-5
    epochs: int = 4
    lr_decay: float = 0.2
    lr_decay_epochs: tuple = ()
    seed: int = 0
    views: int = 3
    radius: int = 3
    n_offsets: int = 8
    max_offset: float = 16.0
    sigma1: float = 1.0
    eq5_squared: bool = False
    propagation: str = "flow"  # "flow" | "checkerboard"
    perturbation: str = "uncertainty"  # "uncertainty" | "uniform"
    grad_clip: float = 5.0

    def __post_init__(self):
        self.eps = tuple(float(e) for e in self.eps)
        if len(self.eps) != 3:
            raise ConfigurationError("eps schedule needs one entry per perturbed scale (3)")
        if any(b > a for a, b in zip(self.eps, self.eps[1:])):
            raise ConfigurationError("eps schedule must be non-increasing")
        if any(e <= 0 for e in self.eps):
            raise ConfigurationError("eps entries must be positive")
        if self.m0 < 1 or self.m1 < 0 or self.m2 < 1:
            raise ConfigurationError("candidate counts out of range")
        if self.m1 > self.n_offsets:
            raise ConfigurationError("m1 cannot exceed the offset count")
        if any(c % self.groups for c in LEVEL_CHANNELS):
            raise ConfigurationError(f"{self.groups} groups must divide all feature widths {LEVEL_CHANNELS}")
        if self.views < 2:
            raise ConfigurationError("need at least two views")
        if self.propagation not in ("flow", "checkerboard"):
            raise ConfigurationError(f"unknown propagation mode {self.propagation!r}")
        if self.perturbation not in ("uncertainty", "uniform"):
            raise ConfigurationError(f"unknown perturbation mode {self.perturbation!r}")


_CONFIG_FILE_KEYS = ("m0", "m1", "m2", "eps", "lambda1", "lambda2", "r2", "groups",
                     "lr", "lr_matcher", "epochs", "seed", "views")


def parse_config_file(path):
    """Flat key=value text -> SolverConfig (unknown keys rejected)."""
    kw = {}
    with open(path, "r", encoding="ascii") as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in _CONFIG_FILE_KEYS:
                raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
            if key == "eps":
                kw[key] = tuple(float(v) for v in val.split(","))
            elif key in ("m0", "m1", "m2", "groups", "epochs", "seed", "views"):
                kw[key] = int(val)
            else:
                kw[key] = float(val)
    return SolverConfig(**kw)


def format_config(config):
    pairs = [f"{f.name}={getattr(config, f.name)}" for f in fields(config)]
    return " ".join(pairs)


# ---------------------------------------------------------------------------
# networks and checkpoints


class PipelineNets(nn.Module):
    def __init__(self, config, seed=None):
        super().__init__()
        rng = np.random.default_rng(config.seed if seed is None else seed)
        self.backbone = FeatureEncoder(rng)
        self.planeflow = pf.PlaneFlowDecoder(rng, radius=config.radius,
                                             n_offsets=config.n_offsets,
                                             max_offset=config.max_offset)
        self.matcher = mt.Matcher(rng, groups=config.groups, sigma1=config.sigma1,
                                  sigma_max=float(config.m0), r2=config.r2,
                                  eq5_squared=config.eq5_squared)


def config_to_tensors(config):
    out = {}
    for f in fields(config):
        v = getattr(config, f.name)
        if f.name in ("propagation", "perturbation"):
            v = 0.0 if v in ("flow", "uncertainty") else 1.0
        out[f"config.{f.name}"] = np.atleast_1d(np.asarray(v, dtype=np.float32))
    return out


def config_from_tensors(tensors):
    kw = {}
    for f in fields(SolverConfig):
        key = f"config.{f.name}"
        if key not in tensors:
            continue
        raw = tensors[key]
        if f.name == "eps":
            kw[f.name] = tuple(float(v) for v in raw)
        elif f.name == "lr_decay_epochs":
            kw[f.name] = tuple(int(v) for v in raw)
        elif f.name in ("m0", "m1", "m2", "groups", "epochs", "seed", "views",
                        "radius", "n_offsets"):
            kw[f.name] = int(raw[0])
        elif f.name == "eq5_squared":
            kw[f.name] = bool(raw[0])
        elif f.name == "propagation":
            kw[f.name] = "flow" if raw[0] == 0 else "checkerboard"
        elif f.name == "perturbation":
            kw[f.name] = "uncertainty" if raw[0] == 0 else "uniform"
        else:
            kw[f.name] = float(raw[0])
    return SolverConfig(**kw)


def save_checkpoint(path, nets, config):
    tensors = {name: p.data for name, p in nets.named_params().items()}
    tensors.update({name: buf for name, buf in nets.named_state().items()})
    tensors.update(config_to_tensors(config))
    ckpt_io.save(path, tensors)


def load_checkpoint(path):
    tensors = ckpt_io.load(path)
    config = config_from_tensors(tensors)
    nets = PipelineNets(config)
    nets.load_tensors(tensors)
    return nets, config


# ---------------------------------------------------------------------------
# pipeline


def initialize(m0, shape, rng):
    """Stratified random hypotheses: one uniform draw per inverse-depth
    interval per pixel, candidate j inside [j/m0, (j+1)/m0)."""
    if m0 < 1:
        raise ConfigurationError("m0 must be >= 1")
    h, w = shape
    u = rng.random((m0, h, w), dtype=np.float64)
    base = np.arange(m0, dtype=np.float64)[:, None, None]
    return ((base + u) / m0).astype(np.float32)


@dataclass
class ScaleOutput:
    mu: dc.Array  # [h,w] z domain
    e_sigma: dc.Array  # [h,w] y units
    views: list  # ViewMixtureMaps per source view
    candidates: dc.Array  # [m,h,w]
    weights: dc.Array  # [m,h,w]


@dataclass
class PipelineResult:
    scales: list  # ScaleOutput, coarse to fine
    depth: np.ndarray  # [H,W] scene units
    flows: list  # flow field Array per scale
    domain: DepthDomain

    @property
    def final_mu(self):
        return self.scales[-1].mu


def run_pipeline(images, cameras, config, nets, rng, training=False):
    """Full four-scale solve for one reference view.

    images is [N,3,H,W] float32 with the reference first; cameras match.
    Returns per-scale outputs plus the final depth map in scene units.
    """
    images = np.asarray(images, dtype=np.float32)
    n = images.shape[0]
    if n != len(cameras):
        raise ConfigurationError("one camera per image required")
    if n < 2:
        raise ConfigurationError("need at least two views")
    h, w = images.shape[-2:]
    if h % 8 or w % 8:
        raise ConfigurationError(f"resolution {h}x{w} not divisible by 8")
    ref_cam = cameras[0]
    for cam in cameras[1:]:
        if np.allclose(cam.center, ref_cam.center, atol=1e-12):
            warnings.warn("zero baseline between reference and a source view")
    domain = DepthDomain(ref_cam.d_min, ref_cam.d_max, config.m0)
    nets.set_training(training)

    per_view = encode_views(nets.backbone, images)
    ref_levels = [lv[0] for lv in per_view]
    if config.propagation == "flow":
        corr = pf.build_correlation_pyramid(ref_levels, nets.planeflow.radius)
        flows = nets.planeflow(corr)
        flows.append(pf.upscale_flow(flows[-1], nets.planeflow.max_offset))
    else:
        flows = [pf.template_flow(*lv[0].data.shape[-2:], n_offsets=config.n_offsets)
                 for lv in per_view]

    scales = []
    mu_prev = None
    e_prev = None
    for ell in range(1, 5):
        level = ell - 1
        scale = 1.0 / 2 ** (3 - level)
        ref_feat = per_view[level][0]
        src_feats = per_view[level][1:]
        cams = [scale_camera(c, scale) for c in cameras]
        hh, ww = ref_feat.data.shape[-2:]
        if ell == 1:
            z0 = dc.Array(initialize(config.m0, (hh, ww), rng))
            pre = nets.matcher.evaluate(ref_feat, src_feats, cams[0], cams[1:], z0, domain)
            best = dc.select_argmax(z0, pre.scores)
        else:
            best = dc.upsample2x_nearest(mu_prev)
            e_up = dc.upsample2x_nearest(e_prev)
            if config.perturbation == "uncertainty":
                sampled = mt.perturb(best, e_up, config.eps[ell - 2], config.m2, domain)
            else:
                # classical bisection policy: fixed per-scale range halving
                # each iteration, identical at every pixel
                half = float(domain.m0_init) / (2.0 ** ell)
                sampled = mt.perturb_uniform(best, half, config.m2, domain)
            z0 = sampled
        prop = pf.propagate(best, flows[level], config.m1)
        cands = dc.concat([z0, prop], axis=0)
        res = nets.matcher.evaluate(ref_feat, src_feats, cams[0], cams[1:], cands, domain)
        scales.append(ScaleOutput(res.mu, res.e_sigma, res.views, cands, res.weights))
        mu_prev, e_prev = res.mu, res.e_sigma
    depth = domain.denormalize(scales[-1].mu.data).astype(np.float32)
    return PipelineResult(scales, depth, flows, domain)


# ---------------------------------------------------------------------------
# losses


def downsample_gt(depth_gt, domain):
    """Nearest-neighbor ground truth and validity masks at the four scales
    (coarse to fine), in normalized inverse depth."""
    z_levels, masks = [], []
    for f in (8, 4, 2, 1):
        d = depth_gt[f // 2::f, f // 2::f] if f > 1 else depth_gt
        mask = d > 0
        z = domain.normalize(np.where(mask, d, domain.d_max)).astype(np.float32)
        z_levels.append(z)
        masks.append(mask)
    return z_levels, masks


def loss_depth(result, z_levels, masks):
    """Masked mean |mu - z_gt| per scale, summed over the four scales."""
    total = None
    for out, zgt, mask in zip(result.scales, z_levels, masks):
        cnt = float(mask.sum())
        if cnt == 0:
            warnings.warn("empty validity mask at one scale; contributes zero")
            continue
        diff = dc.absolute(dc.sub(out.mu, dc.Array(zgt)))
        term = dc.mul(dc.reduce_sum(dc.mul(diff, dc.Array(mask.astype(np.float32)))), 1.0 / cnt)
        total = term if total is None else dc.add(total, term)
    return total if total is not None else dc.Array(0.0)


def loss_nll(result, z_levels, masks, nets, n_views):
    """Mixture negative log likelihood, mean over pixels, summed over
    scales and views, scaled by 1/(N-1)."""
    total = None
    dom = result.domain
    for out, zgt, mask in zip(result.scales, z_levels, masks):
        cnt = float(mask.sum())
        if cnt == 0:
            continue
        y_gt = zgt.astype(np.float64) * dom.m0_init
        mw = dc.Array(mask.astype(np.float32))
        for vm in out.views:
            nll = nets.matcher.negative_log_likelihood(out.mu, vm, y_gt, dom)
            term = dc.mul(dc.reduce_sum(dc.mul(nll, mw)), 1.0 / cnt)
            total = term if total is None else dc.add(total, term)
    if total is None:
        return dc.Array(0.0)
    return dc.mul(total, 1.0 / (n_views - 1))


def total_loss(result, depth_gt, nets, config):
    z_levels, masks = downsample_gt(depth_gt, result.domain)
    ld = loss_depth(result, z_levels, masks)
    ln = loss_nll(result, z_levels, masks, nets, config.views)
    lt = dc.add(dc.mul(ld, config.lambda1), dc.mul(ln, config.lambda2))
    return lt, ld, ln


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """First/second-moment optimizer with per-parameter learning rates and
    optional global-norm gradient clipping."""

    def __init__(self, named_params, lr_for, betas=(0.9, 0.999), eps=1e-8, grad_clip=None):
        self.params = list(named_params.items())
        self.base_lr = {name: lr_for(name) for name, _ in self.params}
        self.lr_scale = 1.0
        self.b1, self.b2 = betas
        self.eps = eps
        self.grad_clip = grad_clip
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        grads = {name: p.grad for name, p in self.params if p.grad is not None}
        if self.grad_clip is not None and grads:
            norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
                grads = {k: g * scale for k, g in grads.items()}
        for name, p in self.params:
            g = grads.get(name)
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mh = m / (1 - self.b1 ** self.t)
            vh = v / (1 - self.b2 ** self.t)
            lr = self.base_lr[name] * self.lr_scale
            p.data -= (lr * mh / (np.sqrt(vh) + self.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# training


@dataclass
class LossReport:
    step: int
    l_depth: float
    l_nll: float
    l_total: float
    per_scale_mae: tuple


def csv_line(report):
    return f"{report.step},{report.l_depth:.9e},{report.l_nll:.9e},{report.l_total:.9e}"


def _per_scale_mae(result, z_levels, masks):
    out = []
    for sc, zgt, mask in zip(result.scales, z_levels, masks):
        if mask.any():
            out.append(float(np.abs(sc.mu.data - zgt)[mask].mean()))
        else:
            out.append(float("nan"))
    return tuple(out)


def train(scenes, config, ckpt_path, csv_path=None, max_steps=None, log=None):
    """Seeded training over (scene, reference view) samples.

    scenes is a list of view-record lists; every view of every scene serves
    as reference once per epoch, sources picked by camera distance. Writes
    one checkpoint per epoch (atomically) and streams one CSV row per step.
    Returns the LossReport history.
    """
    if not scenes:
        raise ConfigurationError("no training scenes")
    nets = PipelineNets(config)
    opt = Adam(nets.named_params(),
               lr_for=lambda name: config.lr_matcher if name.startswith("matcher.") else config.lr,
               grad_clip=config.grad_clip)
    samples = [(si, ri) for si, recs in enumerate(scenes) for ri in range(len(recs))]
    order_rng = np.random.default_rng([config.seed, 0xD5])
    history = []
    step = 0
    csv_f = open(csv_path, "w", encoding="ascii") if csv_path else None
    try:
        done = False
        for epoch in range(config.epochs):
            if done:
                break
            for idx in order_rng.permutation(len(samples)):
                si, ri = samples[idx]
                recs = scenes[si]
                order = sorted((j for j in range(len(recs)) if j != ri),
                               key=lambda j: (float(np.linalg.norm(recs[ri].camera.center - recs[j].camera.center)), j))
                take = [ri] + order[:config.views - 1]
                images = np.stack([recs[j].image.transpose(2, 0, 1) for j in take])
                cams = [recs[j].camera for j in take]
                step_rng = np.random.default_rng([config.seed, 1, step])
                result = run_pipeline(images, cams, config, nets, step_rng, training=True)
                lt, ld, ln = total_loss(result, recs[ri].depth_gt, nets, config)
                if not np.isfinite(lt.data):
                    raise RuntimeError(f"non-finite loss at step {step}")
                opt.zero_grad()
                dc.backward(lt)
                opt.step()
                z_levels, masks = downsample_gt(recs[ri].depth_gt, result.domain)
                report = LossReport(step, float(ld.data), float(ln.data), float(lt.data),
                                    _per_scale_mae(result, z_levels, masks))
                history.append(report)
                line = csv_line(report)
                if csv_f:
                    csv_f.write(line + "\n")
                    csv_f.flush()
                if log:
                    log(line)
                step += 1
                if max_steps is not None and step >= max_steps:
                    done = True
                    break
            save_checkpoint(ckpt_path, nets, config)
            if (epoch + 1) in config.lr_decay_epochs:
                opt.lr_scale *= config.lr_decay
        save_checkpoint(ckpt_path, nets, config)
    finally:
        if csv_f:
            csv_f.close()
    return history, nets


def infer_views(records, config, nets, seed=0, refs=None):
    """Depth maps for each reference view of one scene (no gradients)."""
    nets.set_training(False)
    refs = range(len(records)) if refs is None else refs
    results = []
    with dc.no_grad():
        for ri in refs:
            order = sorted((j for j in range(len(records)) if j != ri),
                           key=lambda j: (float(np.linalg.norm(records[ri].camera.center - records[j].camera.center)), j))
            take = [ri] + order[:config.views - 1]
            images = np.stack([records[j].image.transpose(2, 0, 1) for j in take])
            cams = [records[j].camera for j in take]
            rng = np.random.default_rng([seed, 2, ri])
            results.append(run_pipeline(images, cams, config, nets, rng, training=False))
    return results
