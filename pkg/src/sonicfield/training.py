"""
Training and evaluation loops for the acoustic and visual fields.

The acoustic loss is quadratic in the masks once the source and target
magnitudes are fixed, so each pose is reduced to per-frequency sufficient
statistics (Gram matrix of source magnitudes and their correlations with the
targets). Evaluating the loss on these statistics is exact and independent
of the number of STFT frames.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import dsp
from .anerf import (ANerfModel, IrANerfModel, ir_magnitude_loss, pose_arrays, synthesize,
                    synthesize_multi)
from .avmapper import FrozenEncoder, encode_views
from .core import AdamState, TrainingError, adam_step
from .geometry import Intrinsics
from .metrics import BASELINES, MetricReport, baseline, env_distance, mag_distance
from .vnerf import render_image

log = logging.getLogger(__name__)


@dataclass
class AcousticData:
    """Per-pose training statistics for ``K`` sources.

    gram: (N, F, K, K)   sum_w S_i S_j
    h:    (N, 3, F, K)   sum_w S_i * target, target in (mixture, left, right)
    const:(N,)           sum of squared targets over all three terms
    """
    xy: np.ndarray
    theta: np.ndarray
    sources: np.ndarray
    gram: np.ndarray
    h: np.ndarray
    const: np.ndarray
    n_elem: int
    features: np.ndarray | None = None

    def __len__(self):
        return len(self.xy)

    def subset(self, idx):
        f = None if self.features is None else self.features[idx]
        return AcousticData(self.xy[idx], self.theta[idx], self.sources, self.gram[idx],
                            self.h[idx], self.const[idx], self.n_elem, f)


def observation_stats(source_audio, target, cfg):
    """Sufficient statistics of one observation (see ``AcousticData``)."""
    S = np.stack([np.abs(dsp.stft_complex(np.asarray(a, dtype=np.float64), cfg))
                  for a in source_audio])                      # (K, F, W)
    left = np.abs(dsp.stft_complex(np.asarray(target[0], dtype=np.float64), cfg))
    right = np.abs(dsp.stft_complex(np.asarray(target[1], dtype=np.float64), cfg))
    mix = 0.5 * (left + right)
    gram = np.einsum("ifw,jfw->fij", S, S)
    h = np.stack([np.einsum("kfw,fw->fk", S, t) for t in (mix, left, right)])
    const = float(np.sum(mix ** 2) + np.sum(left ** 2) + np.sum(right ** 2))
    return gram, h, const, mix.size


def build_acoustic_data(observations, scene, cfg=None, features=None):
    cfg = cfg or dsp.StftConfig(sample_rate=scene.sample_rate)
    grams, hs, consts = [], [], []
    n_elem = None
    for ob in observations:
        g, h, c, n_elem = observation_stats(ob.source_audio, ob.target, cfg)
        grams.append(g)
        hs.append(h)
        consts.append(c)
    xy, theta = pose_arrays([ob.pose for ob in observations])
    return AcousticData(xy, theta, scene.source_positions, np.array(grams), np.array(hs),
                        np.array(consts), n_elem, features)


def stats_loss(masks, gram, h, const, n_elem):
    """Mean acoustic loss over poses from per-source masks, with mask gradients.

    ``masks`` is a list over sources of (m_m, m_d), each (P, F).
    Returns ``(loss, [(g_mm, g_md), ...])``.
    """
    m_m = np.stack([m for m, _ in masks], axis=-1)             # (P, F, K)
    m_d = np.stack([d for _, d in masks], axis=-1)
    coeffs = (m_m, m_m * (1.0 + m_d), m_m * (1.0 - m_d))
    P = m_m.shape[0]
    scale = 1.0 / (n_elem * P)
    loss = float(np.sum(const)) * scale
    g_coef = []
    for term, a in enumerate(coeffs):
        ga = np.einsum("pfij,pfj->pfi", gram, a)
        loss += scale * float(np.sum(a * ga) - 2.0 * np.sum(a * h[:, term]))
        g_coef.append(2.0 * scale * (ga - h[:, term]))
    g_mm = g_coef[0] + g_coef[1] * (1.0 + m_d) + g_coef[2] * (1.0 - m_d)
    g_md = m_m * (g_coef[1] - g_coef[2])
    return loss, [(g_mm[..., k], g_md[..., k]) for k in range(m_m.shape[-1])]


def stack_parameters(models):
    if len(models) == 1:
        return models[0].parameters()
    params = {}
    for k, m in enumerate(models):
        params.update({f"src{k}.{n}": v for n, v in m.parameters().items()})
    return params


def batch_loss_and_grads(models, data, idx):
    """Loss and parameter gradients on the poses ``idx`` of ``data``."""
    feats = None if data.features is None else data.features[idx]
    masks, caches, etapes = [], [], []
    for k, model in enumerate(models):
        e = tape = None
        if model.mapper is not None:
            e, tape = model.embed(feats)
        m_m, m_d, cache = model.forward(data.xy[idx], data.theta[idx], data.sources[k], e)
        masks.append((m_m, m_d))
        caches.append(cache)
        etapes.append(tape)
    loss, gmask = stats_loss(masks, data.gram[idx], data.h[idx], data.const[idx], data.n_elem)
    grads = {}
    for k, model in enumerate(models):
        g, g_e = model.backward(caches[k], *gmask[k])
        if model.mapper is not None:
            gm, _ = model.mapper.backward(etapes[k], g_e)
            g.update({f"mapper.{n}": v for n, v in gm.items()})
        prefix = "" if len(models) == 1 else f"src{k}."
        grads.update({prefix + n: v for n, v in g.items()})
    return loss, grads


def dataset_loss(models, data, batch=64):
    total = 0.0
    for s in range(0, len(data), batch):
        idx = np.arange(s, min(s + batch, len(data)))
        loss, _ = batch_loss_and_grads(models, data, idx)
        total += loss * len(idx)
    return total / len(data)


def train_acoustic(models, data, epochs=100, batch_size=32, seed=0, lr=(5e-4, 5e-6),
                   on_epoch=None):
    """Adam over all field (and mapper) parameters; returns per-epoch mean losses."""
    if not isinstance(models, (list, tuple)):
        models = [models]
    rng = np.random.default_rng(seed)
    n = len(data)
    n_batches = math.ceil(n / batch_size)
    total = max(1, epochs * n_batches)
    state = AdamState(lr_init=lr[0], lr_final=lr[1])
    params = stack_parameters(models)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        acc = 0.0
        for b in range(n_batches):
            idx = np.sort(order[b * batch_size:(b + 1) * batch_size])
            loss, grads = batch_loss_and_grads(models, data, idx)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite acoustic loss in epoch {epoch}")
            adam_step(params, grads, state, total)
            for m in models:
                m.bump()
            acc += loss * len(idx)
        history.append(acc / n)
        log.debug("epoch %d loss %.6g", epoch, history[-1])
        if on_epoch is not None:
            on_epoch(epoch, history[-1], state)
    return history


# ---------------------------------------------------------------------------
# visual conditioning


def scene_diameter(scene):
    room = scene.room
    return float(np.linalg.norm(np.subtract(room.hi, room.lo)))


def visual_features(field, encoder, poses, diameter, image_size=16, n_samples=48,
                    t_far=None):
    """Frozen (rgb ++ depth) features of V-NeRF renders, shape (N, 1024)."""
    intr = Intrinsics(image_size, image_size)
    t_far = t_far or diameter
    out = []
    for p in poses:
        rgb, depth = render_image(field, p, intr, t_far=t_far, n_samples=n_samples)
        fr, fd = encode_views(encoder, np.clip(rgb, 0, 1), depth, diameter)
        out.append(np.concatenate([fr, fd]))
    return np.array(out)


def standardize_features(train_feats, *others):
    """Z-score features with training statistics (frozen afterwards)."""
    mu = train_feats.mean(axis=0)
    sd = train_feats.std(axis=0) + 1e-6
    return [(f - mu) / sd for f in (train_feats, *others)], (mu, sd)


# ---------------------------------------------------------------------------
# evaluation


def evaluate_acoustic(models, observations, scene, features=None, cfg=None,
                      include_env=True, include_baselines=True):
    """MetricReports for the model and the three energy baselines."""
    if not isinstance(models, (list, tuple)):
        models = [models]
    cfg = cfg or dsp.StftConfig(sample_rate=scene.sample_rate)
    rows = {"model": []}
    if include_baselines:
        rows.update({b: [] for b in BASELINES})
    for i, ob in enumerate(observations):
        e = None
        if models[0].mapper is not None:
            e = [m.embed(features[i:i + 1])[0][0] for m in models]
        gt = ob.target.astype(np.float64)
        src = [a.astype(np.float64) for a in ob.source_audio]
        if len(models) == 1:
            pred = synthesize(models[0], ob.pose, src[0], scene.source_positions[0],
                              None if e is None else e[0], cfg)
        else:
            pred = _synth_multi(models, ob.pose, src, scene.source_positions, e, cfg)
        candidates = {"model": pred}
        if include_baselines:
            mono = np.sum(src, axis=0)
            candidates.update({b: baseline(b, mono, gt) for b in BASELINES})
        for name, wav in candidates.items():
            r = {"id": ob.id, "mag": mag_distance(wav, gt, cfg)}
            if include_env:
                r["env"] = env_distance(wav, gt)
            rows[name].append(r)
    return {k: MetricReport.aggregate(v) for k, v in rows.items()}


def _synth_multi(models, pose, src, sources, e, cfg):
    if e is None:
        return synthesize_multi(models, pose, src, sources, None, cfg)
    specs = [dsp.stft(a, cfg) for a in src]
    from .anerf import compose_multi, predict_masks
    masks = [predict_masks(m, pose, s, ek) for m, s, ek in zip(models, sources, e)]
    s_l, s_r, _ = compose_multi(specs, masks)
    return np.stack([dsp.istft(s_l), dsp.istft(s_r)])


# ---------------------------------------------------------------------------
# impulse responses


@dataclass
class IrData:
    xy: np.ndarray
    theta: np.ndarray
    source: np.ndarray
    mags: np.ndarray          # (N, 2, F, W)

    def __len__(self):
        return len(self.xy)


def build_ir_data(samples, scene, cfg):
    mags = np.array([[np.abs(dsp.stft_complex(ch, cfg)) for ch in s.ir] for s in samples])
    xy, theta = pose_arrays([s.pose for s in samples])
    return IrData(xy, theta, scene.source_positions[0], mags)


def train_ir(model, data, cfg, epochs=30, batch_size=8, seed=0, lr=(5e-4, 5e-6), on_epoch=None):
    """Fit the impulse-response field with the STFT-magnitude L2 loss."""
    rng = np.random.default_rng(seed)
    n = len(data)
    n_batches = math.ceil(n / batch_size)
    state = AdamState(lr_init=lr[0], lr_final=lr[1])
    params = model.parameters()
    total = max(1, epochs * n_batches)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        acc = 0.0
        for b in range(n_batches):
            idx = np.sort(order[b * batch_size:(b + 1) * batch_size])
            irs, cache = model.forward(data.xy[idx], data.theta[idx], data.source)
            g_ir = np.zeros_like(irs)
            loss = 0.0
            for j, k in enumerate(idx):
                l, g_ir[j] = ir_magnitude_loss(irs[j], data.mags[k], cfg)
                loss += l
            loss /= len(idx)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite IR loss in epoch {epoch}")
            grads = model.backward(cache, g_ir / len(idx))
            adam_step(params, grads, state, total)
            model.bump()
            acc += loss * len(idx)
        history.append(acc / n)
        log.debug("ir epoch %d loss %.6g", epoch, history[-1])
        if on_epoch is not None:
            on_epoch(epoch, history[-1], state)
    return history
