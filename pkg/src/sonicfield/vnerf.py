"""
Vanilla radiance field: density/colour MLPs with quadrature volume rendering.

Each ray's interval [t_near, t_far] is split into ``n`` equal bins with one
(optionally jittered) sample per bin; a sample's segment is the bin itself,
so the segment lengths always sum to ``t_far - t_near`` and a homogeneous
medium is integrated exactly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .core import MLPBlock, TrainingError, AdamState, adam_step
from .encoding import PositionalEncoding, positional_encode
from .geometry import Intrinsics, Pose, camera_rays

log = logging.getLogger(__name__)


class RayError(ValueError):
    pass


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise RayError("ray direction must be a unit vector")
        if not self.t_near < self.t_far:
            raise RayError("need t_near < t_far")


def softplus(z):
    return np.logaddexp(0.0, z)


def _softplus_grad(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class RadianceField:
    """Density MLP on encoded (x, y, z), colour MLP on feature + encoded view angles.

    ``center``/``scale`` map world coordinates into [-1, 1]^3; points outside
    are clamped before encoding.
    """

    def __init__(self, width=64, pos_freqs=6, dir_freqs=3, center=(0, 0, 0), scale=4.0,
                 rng=0, density_bias=0.0, empty=False, dtype=np.float64):
        rng = np.random.default_rng(rng)
        self.pos_pe = PositionalEncoding(pos_freqs, include_input=True)
        self.dir_pe = PositionalEncoding(dir_freqs, include_input=True)
        self.center = np.asarray(center, dtype=np.float64)
        self.scale = float(scale)
        d_in = self.pos_pe.output_dim(3)
        self.density_mlp = MLPBlock.build(
            [d_in, width, width, width, width + 1],
            ["relu", "relu", "relu", "identity"], residual=(1, 2), rng=rng, dtype=dtype)
        self.color_mlp = MLPBlock.build(
            [width + self.dir_pe.output_dim(2), width // 2, 3],
            ["relu", "sigmoid"], rng=rng, dtype=dtype)
        last = self.density_mlp.layers[-1]
        if empty:
            last.weight[0] = 0.0
            last.bias[0] = -40.0
        else:
            last.bias[0] += density_bias
        self._version = 0

    def parameters(self):
        p = {f"density.{k}": v for k, v in self.density_mlp.parameters().items()}
        p.update({f"color.{k}": v for k, v in self.color_mlp.parameters().items()})
        return p

    def bump(self):
        self.density_mlp.bump()
        self.color_mlp.bump()

    def _encode_points(self, pts):
        u = np.clip((pts - self.center) / self.scale, -1.0, 1.0)
        return positional_encode(u, self.pos_pe)

    def _encode_dirs(self, dirs):
        theta = np.arctan2(dirs[..., 1], dirs[..., 0])
        phi = np.arcsin(np.clip(dirs[..., 2], -1.0, 1.0))
        ang = np.stack([theta / math.pi, 2.0 * phi / math.pi], axis=-1)
        return positional_encode(np.clip(ang, -1.0, 1.0), self.dir_pe)

    def query(self, pts, dirs):
        """Density and colour at points (N, 3) seen along unit directions (N, 3)."""
        out, tape1 = self.density_mlp.forward(self._encode_points(pts))
        sigma = softplus(out[:, 0])
        feat = out[:, 1:]
        x2 = np.concatenate([feat, self._encode_dirs(dirs)], axis=1)
        rgb, tape2 = self.color_mlp.forward(x2)
        return sigma, rgb, (out, tape1, tape2)

    def query_backward(self, cache, g_sigma, g_rgb):
        out, tape1, tape2 = cache
        grads2, gx2, _, _ = self.color_mlp.backward(tape2, g_rgb)
        width = out.shape[1] - 1
        g_out = np.empty_like(out)
        g_out[:, 0] = g_sigma * _softplus_grad(out[:, 0])
        g_out[:, 1:] = gx2[:, :width]
        grads1, _, _, _ = self.density_mlp.backward(tape1, g_out)
        g = {f"density.{k}": v for k, v in grads1.items()}
        g.update({f"color.{k}": v for k, v in grads2.items()})
        return g


def sample_depths(t_near, t_far, n_rays, n_samples, rng=None):
    """Stratified sample positions (n_rays, n) and their segment lengths."""
    edges = np.linspace(0.0, 1.0, n_samples + 1)
    if rng is None:
        u = np.full((n_rays, n_samples), 0.5)
    else:
        u = rng.uniform(size=(n_rays, n_samples))
    span = np.asarray(t_far - t_near, dtype=np.float64).reshape(-1, 1)
    lo = np.asarray(t_near, dtype=np.float64).reshape(-1, 1)
    t = lo + span * (edges[:-1] + u * (edges[1:] - edges[:-1]))
    delta = np.broadcast_to(span / n_samples, t.shape)
    return t, np.array(delta)


def composite(sigma, delta):
    """Quadrature weights: w_i = T_i * (1 - exp(-sigma_i * delta_i))."""
    tau = sigma * delta
    acc = np.cumsum(tau, axis=-1)
    trans = np.exp(-(acc - tau))
    alpha = -np.expm1(-tau)
    return trans * alpha, trans


def composite_backward(values, weights, trans, sigma, delta, g_out):
    """Gradient of ``sum_i w_i * values_i`` w.r.t. sigma (and the values).

    ``values`` is (R, N, K), ``g_out`` is (R, K).
    """
    gv = np.einsum("rnk,rk->rn", values, g_out)
    wgv = weights * gv
    # sum over i > k of w_i * gv_i
    suffix = np.cumsum(wgv[:, ::-1], axis=1)[:, ::-1] - wgv
    t_next = trans * np.exp(-sigma * delta)
    g_sigma = delta * (t_next * gv - suffix)
    g_values = weights[..., None] * g_out[:, None, :]
    return g_sigma, g_values


def render_rays(field, origins, dirs, t_near, t_far, n_samples=64, rng=None, need_grad=False):
    """Render colour and depth for a batch of rays.

    Returns ``(rgb (R, 3), depth (R,), acc (R,), cache)``.
    """
    if n_samples < 2:
        raise RayError("need at least two samples per ray")
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n_rays = len(dirs)
    t_near = np.broadcast_to(np.asarray(t_near, dtype=np.float64), (n_rays,))
    t_far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), (n_rays,))
    t, delta = sample_depths(t_near, t_far, n_rays, n_samples, rng)
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    dirs_rep = np.broadcast_to(dirs[:, None, :], pts.shape)
    sigma, rgb, qcache = field.query(pts.reshape(-1, 3), dirs_rep.reshape(-1, 3))
    sigma = sigma.reshape(n_rays, n_samples)
    rgb = rgb.reshape(n_rays, n_samples, 3)
    w, trans = composite(sigma, delta)
    color = np.einsum("rn,rnk->rk", w, rgb)
    depth = np.sum(w * t, axis=1)
    cache = (qcache, sigma, rgb, w, trans, delta, t) if need_grad else None
    return color, depth, w.sum(axis=1), cache


def render_rays_backward(field, cache, g_color):
    qcache, sigma, rgb, w, trans, delta, _ = cache
    g_sigma, g_rgb = composite_backward(rgb, w, trans, sigma, delta, g_color)
    return field.query_backward(qcache, g_sigma.reshape(-1), g_rgb.reshape(-1, 3))


def render_color(field, ray, n_samples=64, rng=None):
    c, _, _, _ = render_rays(field, ray.origin[None], ray.direction[None],
                             ray.t_near, ray.t_far, n_samples, rng)
    return c[0]


def render_depth(field, ray, n_samples=64, rng=None):
    """Expected termination distance; a fully transparent ray gives 0."""
    _, d, _, _ = render_rays(field, ray.origin[None], ray.direction[None],
                             ray.t_near, ray.t_far, n_samples, rng)
    return float(d[0])


def render_image(field, pose, intr, t_near=0.05, t_far=6.0, n_samples=64, chunk=4096):
    """Row-major (rgb (H, W, 3), depth (H, W)) for a pinhole camera at ``pose``."""
    if not isinstance(intr, Intrinsics):
        raise ValueError("intrinsics must be an Intrinsics instance")
    dirs = camera_rays(pose, intr).reshape(-1, 3)
    origin = np.array([pose.x, pose.y, pose.z])
    rgb = np.zeros((len(dirs), 3))
    depth = np.zeros(len(dirs))
    for s in range(0, len(dirs), chunk):
        d = dirs[s:s + chunk]
        c, z, _, _ = render_rays(field, np.broadcast_to(origin, d.shape), d, t_near, t_far, n_samples)
        rgb[s:s + chunk] = c
        depth[s:s + chunk] = z
    return rgb.reshape(intr.height, intr.width, 3), depth.reshape(intr.height, intr.width)


def color_loss(pred, target):
    """Mean squared colour error over rays and channels."""
    return float(np.mean((np.asarray(pred) - np.asarray(target)) ** 2))


def psnr(pred, target):
    mse = np.mean((np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)) ** 2)
    return float("inf") if mse == 0 else -10.0 * math.log10(mse)


def collect_rays(poses, images, intr):
    """Flatten posed images into (origins, directions, colours)."""
    origins, dirs, colors = [], [], []
    for pose, img in zip(poses, images):
        d = camera_rays(pose, intr).reshape(-1, 3)
        dirs.append(d)
        origins.append(np.broadcast_to([pose.x, pose.y, pose.z], d.shape))
        colors.append(np.asarray(img, dtype=np.float64).reshape(-1, 3))
    return np.concatenate(origins), np.concatenate(dirs), np.concatenate(colors)


def train_vnerf(field, poses, images, intr, steps=1000, batch_rays=512, n_samples=48,
                t_near=0.05, t_far=6.0, lr=(5e-3, 5e-4), seed=0, log_every=0):
    """Fit ``field`` to posed RGB images with the squared colour loss.

    Returns the list of per-step losses.
    """
    origins, dirs, colors = collect_rays(poses, images, intr)
    rng = np.random.default_rng(seed)
    state = AdamState(lr_init=lr[0], lr_final=lr[1])
    params = field.parameters()
    history = []
    for step in range(steps):
        idx = rng.integers(0, len(dirs), size=batch_rays)
        pred, _, _, cache = render_rays(field, origins[idx], dirs[idx], t_near, t_far,
                                        n_samples, rng, need_grad=True)
        diff = pred - colors[idx]
        loss = float(np.mean(diff ** 2))
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite colour loss at step {step}")
        grads = render_rays_backward(field, cache, 2.0 * diff / diff.size)
        adam_step(params, grads, state, steps)
        field.bump()
        history.append(loss)
        if log_every and step % log_every == 0:
            log.info("vnerf step %d loss %.5f", step, loss)
    return history
