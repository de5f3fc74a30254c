"""
Acoustic field: pose -> per-frequency mixture and difference masks.

The first MLP sees the encoded listener position and frequency query and
emits the mixture mask plus a feature vector; the second MLP sees that
feature together with the learned embedding of the source-relative heading
and emits the difference mask. Composition then gives

    s_m = m_m * |S|,  s_d = m_d * s_m,  s_l = s_m + s_d,  s_r = s_m - s_d

and both ears are resynthesized with the source phase.

Batched calls work on ``P`` poses at once; the MLPs see ``P * F`` rows laid
out pose-major.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import convolve2d, correlate2d
from scipy.special import expit

from . import dsp
from .avmapper import AvMapper
from .core import ConfigurationError, MLPBlock
from .encoding import (DirectionEmbedding, PositionalEncoding, interpolate_embedding,
                       interpolate_embedding_backward, positional_encode, relative_direction)
from .geometry import Pose

FUSIONS = ("add_input", "concat", "add_all")
DIRECTION_MODES = ("per_layer", "concat")


@dataclass
class MaskPair:
    m_m: np.ndarray
    m_d: np.ndarray

    def __post_init__(self):
        if self.m_m.shape != self.m_d.shape:
            raise ValueError("mask lengths differ")


@dataclass
class ANerfConfig:
    width: int = 128
    n_bins: int = 257
    pe_freqs: int = 10
    bounds: tuple = (-2.0, -2.0, 2.0, 2.0)     # xmin, ymin, xmax, ymax
    coordinate_transform: bool = True
    visual: bool = False
    fusion: str = "add_input"
    direction_mode: str = "per_layer"
    refine: bool = False
    zero_output: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ConfigurationError(f"fusion must be one of {FUSIONS}")
        if self.direction_mode not in DIRECTION_MODES:
            raise ConfigurationError(f"direction_mode must be one of {DIRECTION_MODES}")
        self.bounds = tuple(float(b) for b in self.bounds)

    def to_dict(self):
        return asdict(self)


def normalize_xy(xy, bounds):
    xy = np.asarray(xy, dtype=np.float64)
    lo = np.array(bounds[:2])
    hi = np.array(bounds[2:])
    return np.clip(2.0 * (xy - lo) / (hi - lo) - 1.0, -1.0, 1.0)


def query_grid(n):
    """Frequency (or time) indices 0..n-1 mapped onto [-1, 1]."""
    return np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1)


class Refine:
    """Per-channel 3x3 kernel applied to the (F, W) ear magnitudes; starts as identity."""

    def __init__(self):
        self.kernel = np.zeros((2, 3, 3))
        self.kernel[:, 1, 1] = 1.0

    def parameters(self):
        return {"kernel": self.kernel}

    def apply(self, mag, ch):
        return correlate2d(mag, self.kernel[ch], mode="same")

    def backward(self, mag, grad, ch):
        g_in = convolve2d(grad, self.kernel[ch], mode="same")
        g_k = correlate2d(np.pad(mag, 1), grad, mode="valid")
        return g_in, g_k


class _FieldBase:
    """Shared plumbing: parameter registry, direction handling."""

    def _children(self):
        raise NotImplementedError

    def parameters(self):
        params = {}
        for prefix, child in self._children():
            for k, v in child.parameters().items():
                params[f"{prefix}.{k}"] = v
        return params

    def bump(self):
        for _, child in self._children():
            if hasattr(child, "bump"):
                child.bump()

    def direction_angle(self, xy, theta, source):
        if self.cfg.coordinate_transform:
            return relative_direction(xy, theta, source)
        return np.mod(np.asarray(theta, dtype=np.float64), 2 * np.pi)

    def _direction_rows(self, ang, reps):
        emb = interpolate_embedding(ang, self.direction_emb)
        return np.repeat(emb, reps, axis=0)

    def _mlp2(self, feat, emb_rows):
        if self.cfg.direction_mode == "per_layer":
            adds = {k: emb_rows for k in range(len(self.mlp2.layers))}
            return self.mlp2.forward(feat, input_add=adds)
        return self.mlp2.forward(np.concatenate([feat, emb_rows], axis=1))

    def _mlp2_backward(self, tape, g_out, width):
        grads, gx, g_adds, _ = self.mlp2.backward(tape, g_out)
        if self.cfg.direction_mode == "per_layer":
            g_emb = sum(g_adds.values())
            g_feat = gx
        else:
            g_feat, g_emb = gx[:, :width], gx[:, width:]
        return grads, g_feat, g_emb


class ANerfModel(_FieldBase):
    def __init__(self, cfg=None, **kwargs):
        self.cfg = cfg = cfg or ANerfConfig(**kwargs)
        rng = np.random.default_rng(cfg.seed)
        c = cfg.width
        self.pe = PositionalEncoding(cfg.pe_freqs)
        d_in = self.pe.output_dim(2) + self.pe.output_dim(1)
        if cfg.visual and cfg.fusion == "concat":
            d_in += c
        self.mlp1 = MLPBlock.build([d_in, c, c, c, c + 1], ["relu", "relu", "relu", "sigmoid"],
                                   residual=(1, 2), rng=rng, zero_last=cfg.zero_output)
        d2 = c if cfg.direction_mode == "per_layer" else 2 * c
        self.mlp2 = MLPBlock.build([d2, c, c, c, 1], ["relu", "relu", "relu", "sigmoid"],
                                   residual=(1, 2), rng=rng, zero_last=cfg.zero_output)
        self.direction_emb = DirectionEmbedding.init(c, rng)
        self.mapper = AvMapper(c, rng=rng) if cfg.visual else None
        self.refine = Refine() if cfg.refine else None
        self._pe_f = positional_encode(query_grid(cfg.n_bins)[:, None], self.pe)

    def _children(self):
        kids = [("mlp1", self.mlp1), ("mlp2", self.mlp2), ("emb", self.direction_emb)]
        if self.mapper is not None:
            kids.append(("mapper", self.mapper))
        if self.refine is not None:
            kids.append(("refine", self.refine))
        return kids

    @property
    def n_bins(self):
        return self.cfg.n_bins

    def forward(self, xy, theta, source, e=None):
        """Masks for ``P`` poses: returns ``(m_m (P, F), m_d (P, F), cache)``.

        ``source`` is one 2D position (shared) or one per pose; ``e`` is the
        (P, c) visual embedding, or None for the vision-free field.
        """
        xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
        theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
        P, F, c = len(xy), self.cfg.n_bins, self.cfg.width
        pe_xy = positional_encode(normalize_xy(xy, self.cfg.bounds), self.pe)
        x1 = np.concatenate([np.repeat(pe_xy, F, axis=0), np.tile(self._pe_f, (P, 1))], axis=1)
        input_add, preact_add = {}, {}
        e_rows = None
        if e is not None:
            e = np.atleast_2d(e)
            if e.shape != (P, c):
                raise ConfigurationError(f"visual embedding must be ({P}, {c}), got {e.shape}")
            e_rows = np.repeat(e, F, axis=0)
            if self.cfg.fusion == "concat":
                x1 = np.concatenate([x1, e_rows], axis=1)
            else:
                preact_add[0] = e_rows
                if self.cfg.fusion == "add_all":
                    input_add = {k: e_rows for k in range(1, len(self.mlp1.layers))}
        elif self.cfg.visual and self.cfg.fusion == "concat":
            raise ConfigurationError("concat fusion needs a visual embedding")
        out1, t1 = self.mlp1.forward(x1, input_add, preact_add)
        ang = self.direction_angle(xy, theta, source)
        out2, t2 = self._mlp2(out1[:, 1:], self._direction_rows(ang, F))
        m_m = out1[:, 0].reshape(P, F)
        m_d = (2.0 * out2[:, 0] - 1.0).reshape(P, F)
        return m_m, m_d, (P, ang, t1, t2, e is not None)

    def backward(self, cache, g_mm, g_md):
        """Parameter gradients and the gradient w.r.t. the visual embedding."""
        P, ang, t1, t2, has_e = cache
        F, c = self.cfg.n_bins, self.cfg.width
        g2 = (2.0 * np.asarray(g_md)).reshape(-1, 1)
        grads2, g_feat, g_emb = self._mlp2_backward(t2, g2, c)
        g_table = interpolate_embedding_backward(ang, g_emb.reshape(P, F, c).sum(axis=1), c)
        g1 = np.concatenate([np.asarray(g_mm).reshape(-1, 1), g_feat], axis=1)
        grads1, gx1, g_in, g_pre = self.mlp1.backward(t1, g1)
        g_e = None
        if has_e:
            if self.cfg.fusion == "concat":
                g_rows = gx1[:, -c:]
            else:
                g_rows = g_pre[0] + sum(g_in.values()) if g_in else g_pre[0]
            g_e = g_rows.reshape(P, F, c).sum(axis=1)
        grads = {f"mlp1.{k}": v for k, v in grads1.items()}
        grads.update({f"mlp2.{k}": v for k, v in grads2.items()})
        grads["emb.table"] = g_table
        return grads, g_e

    def embed(self, features):
        """Visual embedding e = mapper(features); returns ``(e, tape)``."""
        if self.mapper is None:
            raise ConfigurationError("model was built without the visual path")
        return self.mapper.forward(features)


def predict_masks(model, pose, source_pos, visual_embedding=None):
    e = None if visual_embedding is None else np.asarray(visual_embedding)[None, :]
    m_m, m_d, _ = model.forward(pose.xy[None], [pose.theta], np.asarray(source_pos), e)
    return MaskPair(m_m[0], m_d[0])


def compose_binaural(source, masks, refine=None):
    """Apply masks to a source Spectrogram; returns ``(s_l, s_r, s_m)``.

    All outputs carry the source phase.
    """
    mag = source.magnitude
    if mag.shape[0] != len(masks.m_m):
        raise ValueError(f"spectrogram has {mag.shape[0]} bins, masks have {len(masks.m_m)}")
    s_m = masks.m_m[:, None] * mag
    s_d = masks.m_d[:, None] * s_m
    s_l = s_m + s_d
    s_r = s_m - s_d
    if refine is not None:
        s_l, s_r = refine.apply(s_l, 0), refine.apply(s_r, 1)
    wrap = lambda m: dsp.Spectrogram(m, source.phase, source.config, source.length)
    return wrap(s_l), wrap(s_r), wrap(s_m)


def synthesize(model, pose, source_audio, source_pos, visual_embedding=None, cfg=None):
    """Binaural waveform (2, n) for ``pose`` from a mono source clip."""
    cfg = cfg or dsp.StftConfig()
    source_audio = np.asarray(source_audio, dtype=np.float64)
    spec = dsp.stft(source_audio, cfg)
    masks = predict_masks(model, pose, source_pos, visual_embedding)
    s_l, s_r, _ = compose_binaural(spec, masks, model.refine)
    return np.stack([dsp.istft(s_l), dsp.istft(s_r)])


def acoustic_loss(pred, target):
    """Sum over (mixture, left, right) of the mean squared magnitude error."""
    if len(pred) != 3 or len(target) != 3:
        raise ValueError("expected (s_m, s_l, s_r) triples")
    total = 0.0
    for p, t in zip(pred, target):
        p = getattr(p, "magnitude", p)
        t = getattr(t, "magnitude", t)
        if np.shape(p) != np.shape(t):
            raise ValueError(f"shape mismatch {np.shape(p)} vs {np.shape(t)}")
        total += float(np.mean((np.asarray(p) - np.asarray(t)) ** 2))
    return total


# ---------------------------------------------------------------------------
# multiple sources


def multi_source_masks(models, pose, sources, visual_embedding=None):
    if len(models) != len(sources) or not models:
        raise ValueError("need one model per source")
    return [predict_masks(m, pose, s, visual_embedding) for m, s in zip(models, sources)]


def compose_multi(source_specs, masks):
    """Sum per-source ear magnitudes; phase comes from the summed source spectra."""
    if len(source_specs) != len(masks):
        raise ValueError("need one mask pair per source spectrogram")
    s_l = s_r = s_m = 0.0
    mix = 0.0
    for spec, mp in zip(source_specs, masks):
        l, r, m = compose_binaural(spec, mp)
        s_l, s_r, s_m = s_l + l.magnitude, s_r + r.magnitude, s_m + m.magnitude
        mix = mix + spec.complex()
    phase = np.angle(mix)
    cfg, n = source_specs[0].config, source_specs[0].length
    wrap = lambda m: dsp.Spectrogram(m, phase, cfg, n)
    return wrap(s_l), wrap(s_r), wrap(s_m)


def synthesize_multi(models, pose, source_audios, sources, visual_embedding=None, cfg=None):
    cfg = cfg or dsp.StftConfig()
    specs = [dsp.stft(np.asarray(a, dtype=np.float64), cfg) for a in source_audios]
    masks = multi_source_masks(models, pose, sources, visual_embedding)
    s_l, s_r, _ = compose_multi(specs, masks)
    return np.stack([dsp.istft(s_l), dsp.istft(s_r)])


# ---------------------------------------------------------------------------
# impulse-response variant


@dataclass
class IrConfig:
    width: int = 64
    ir_length: int = 3200
    pe_freqs: int = 10
    time_freqs: int = 12
    bounds: tuple = (-2.0, -2.0, 2.0, 2.0)
    coordinate_transform: bool = True
    direction_mode: str = "per_layer"
    zero_output: bool = False
    envelope: str = "decay"
    decay_scale: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.envelope not in ("decay", "none"):
            raise ConfigurationError(f"unknown envelope {self.envelope!r}")

    def to_dict(self):
        return asdict(self)


class IrANerfModel(_FieldBase):
    """Pose + time query -> two-channel impulse-response sample.

    With the ``decay`` envelope the second MLP emits a carrier ``a`` and a
    rate ``z`` per channel. The sample is ``a(t) * exp(-sum_{s<=t} r(s))``
    with ``r = softplus(z) * decay_scale / T``, so the envelope never rises
    and the late tail keeps the decay learned from the loud early part.
    """

    def __init__(self, cfg=None, **kwargs):
        self.cfg = cfg = cfg or IrConfig(**kwargs)
        rng = np.random.default_rng(cfg.seed)
        c = cfg.width
        self.pe = PositionalEncoding(cfg.pe_freqs)
        self.pe_t = PositionalEncoding(cfg.time_freqs)
        d_in = self.pe.output_dim(2) + self.pe_t.output_dim(1)
        self.mlp1 = MLPBlock.build([d_in, c, c, c, c], ["relu", "relu", "relu", "sigmoid"],
                                   residual=(1, 2), rng=rng)
        d2 = c if cfg.direction_mode == "per_layer" else 2 * c
        n_out = 2 if cfg.envelope == "none" else 4
        self.mlp2 = MLPBlock.build([d2, c, c, c, n_out], ["relu", "relu", "relu", "identity"],
                                   residual=(1, 2), rng=rng, zero_last=cfg.zero_output)
        self.direction_emb = DirectionEmbedding.init(c, rng)
        self._pe_t = positional_encode(query_grid(cfg.ir_length)[:, None], self.pe_t)

    def _children(self):
        return [("mlp1", self.mlp1), ("mlp2", self.mlp2), ("emb", self.direction_emb)]

    def forward(self, xy, theta, source):
        """Impulse responses (P, 2, T) and a cache for ``backward``."""
        xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
        theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
        P, T = len(xy), self.cfg.ir_length
        pe_xy = positional_encode(normalize_xy(xy, self.cfg.bounds), self.pe)
        x1 = np.concatenate([np.repeat(pe_xy, T, axis=0), np.tile(self._pe_t, (P, 1))], axis=1)
        feat, t1 = self.mlp1.forward(x1)
        ang = self.direction_angle(xy, theta, source)
        out, t2 = self._mlp2(feat, self._direction_rows(ang, T))
        env = None
        if self.cfg.envelope != "none":
            z = out[:, 2:].reshape(P, T, 2)
            rate = np.logaddexp(0.0, z) * (self.cfg.decay_scale / T)
            gain = np.exp(-np.cumsum(rate, axis=1)).reshape(P * T, 2)
            out = out[:, :2] * gain
            env = (z, gain)
        return out.reshape(P, T, 2).transpose(0, 2, 1), (P, ang, t1, t2, out, env)

    def backward(self, cache, g_ir):
        P, ang, t1, t2, out, env = cache
        T, c = self.cfg.ir_length, self.cfg.width
        g_out = np.asarray(g_ir).transpose(0, 2, 1).reshape(P * T, 2)
        if env is not None:
            z, gain = env
            # d sample_t / d rate_s = -sample_t for every s <= t
            g_log = (g_out * out).reshape(P, T, 2)
            g_rate = -np.cumsum(g_log[:, ::-1], axis=1)[:, ::-1]
            g_z = g_rate * (self.cfg.decay_scale / T) * expit(z)
            g_out = np.concatenate([g_out * gain, g_z.reshape(P * T, 2)], axis=1)
        grads2, g_feat, g_emb = self._mlp2_backward(t2, g_out, c)
        g_table = interpolate_embedding_backward(ang, g_emb.reshape(P, T, c).sum(axis=1), c)
        grads1, _, _, _ = self.mlp1.backward(t1, g_feat)
        grads = {f"mlp1.{k}": v for k, v in grads1.items()}
        grads.update({f"mlp2.{k}": v for k, v in grads2.items()})
        grads["emb.table"] = g_table
        return grads


def predict_ir(model, pose, source_pos):
    ir, _ = model.forward(pose.xy[None], [pose.theta], np.asarray(source_pos))
    return ir[0]


def ir_magnitude_loss(pred_ir, gt_mag, cfg):
    """Mean squared STFT-magnitude error summed over channels, with its gradient.

    ``pred_ir`` is (2, T); ``gt_mag`` is (2, F, W). Returns ``(loss, grad (2, T))``.
    """
    loss = 0.0
    grad = np.zeros_like(pred_ir)
    T = pred_ir.shape[-1]
    for ch in range(pred_ir.shape[0]):
        spec = dsp.stft_complex(pred_ir[ch], cfg)
        diff = np.abs(spec) - gt_mag[ch]
        loss += float(np.mean(diff ** 2))
        grad[ch] = dsp.stft_magnitude_backward(T, spec, 2.0 * diff / diff.size, cfg)
    return loss, grad


def pose_arrays(poses):
    xy = np.array([[p.x, p.y] for p in poses], dtype=np.float64)
    theta = np.array([p.theta for p in poses], dtype=np.float64)
    return xy, theta


__all__ = [
    "ANerfConfig", "ANerfModel", "IrANerfModel", "IrConfig", "MaskPair", "Pose",
    "acoustic_loss", "compose_binaural", "compose_multi", "multi_source_masks",
    "predict_ir", "predict_masks", "synthesize", "synthesize_multi",
]
