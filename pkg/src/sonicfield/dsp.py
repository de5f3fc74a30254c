"""
Time-frequency helpers: one-sided STFT, weighted overlap-add ISTFT and the
Hilbert envelope.

Framing follows the centered convention: the signal is reflect-padded by
``n_fft // 2`` on both sides, then zero-padded at the end so that a signal of
``n`` samples yields ``1 + ceil(n / hop)`` frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import hilbert


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 512
    win_length: int = 512
    hop_length: int = 128
    window: str = "hann"
    sample_rate: int = 22050

    def __post_init__(self):
        if not (0 < self.hop_length <= self.win_length <= self.n_fft):
            raise InputError("need 0 < hop_length <= win_length <= n_fft")
        if self.sample_rate <= 0:
            raise InputError("sample_rate must be positive")
        if self.window != "hann":
            raise InputError(f"unsupported window {self.window!r}")

    @property
    def n_bins(self):
        return self.n_fft // 2 + 1

    def n_frames(self, n_samples):
        return 1 + math.ceil(n_samples / self.hop_length)

    def window_array(self, dtype=np.float64):
        # periodic Hann, zero-padded (centered) to n_fft
        n = np.arange(self.win_length)
        w = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / self.win_length)
        out = np.zeros(self.n_fft, dtype=dtype)
        start = (self.n_fft - self.win_length) // 2
        out[start:start + self.win_length] = w
        return out

    def to_dict(self):
        return {"n_fft": self.n_fft, "win_length": self.win_length,
                "hop_length": self.hop_length, "window": self.window,
                "sample_rate": self.sample_rate}


@dataclass
class Spectrogram:
    """Magnitude/phase pair of shape (F, W)."""
    magnitude: np.ndarray
    phase: np.ndarray
    config: StftConfig
    length: int | None = None

    @property
    def shape(self):
        return self.magnitude.shape

    def complex(self):
        return self.magnitude * np.exp(1j * self.phase)


def _frame_layout(n, cfg):
    pad = cfg.n_fft // 2
    n_frames = cfg.n_frames(n)
    total = (n_frames - 1) * cfg.hop_length + cfg.n_fft
    tail = total - (n + 2 * pad)
    return pad, n_frames, total, tail


def stft_complex(audio, cfg=StftConfig()):
    """Complex one-sided STFT, shape (n_fft // 2 + 1, frames)."""
    x = np.asarray(audio, dtype=np.float64)
    if x.ndim != 1:
        raise InputError("stft expects a mono waveform")
    if len(x) < cfg.win_length:
        raise InputError(f"audio has {len(x)} samples, need at least {cfg.win_length}")
    pad, n_frames, total, tail = _frame_layout(len(x), cfg)
    xp = np.pad(x, pad, mode="reflect")
    xp = np.pad(xp, (0, tail))
    idx = np.arange(cfg.n_fft)[None, :] + cfg.hop_length * np.arange(n_frames)[:, None]
    frames = xp[idx] * cfg.window_array()
    return np.fft.rfft(frames, n=cfg.n_fft, axis=1).T


def stft(audio, cfg=StftConfig()):
    spec = stft_complex(audio, cfg)
    return Spectrogram(np.abs(spec), np.angle(spec), cfg, length=len(audio))


def istft_complex(spec, cfg=StftConfig(), length=None):
    """Weighted overlap-add inverse with squared-window normalization."""
    spec = np.asarray(spec)
    n_bins, n_frames = spec.shape
    if n_bins != cfg.n_bins:
        raise InputError(f"spectrogram has {n_bins} bins, config implies {cfg.n_bins}")
    win = cfg.window_array()
    frames = np.fft.irfft(spec.T, n=cfg.n_fft, axis=1) * win
    total = (n_frames - 1) * cfg.hop_length + cfg.n_fft
    out = np.zeros(total)
    norm = np.zeros(total)
    w2 = win * win
    for m in range(n_frames):
        s = m * cfg.hop_length
        out[s:s + cfg.n_fft] += frames[m]
        norm[s:s + cfg.n_fft] += w2
    pad = cfg.n_fft // 2
    if length is None:
        length = (n_frames - 1) * cfg.hop_length
    sl = slice(pad, pad + length)
    if np.any(norm[sl] < 1e-10):
        raise FloatingPointError("window sum vanishes inside the output span")
    return out[sl] / norm[sl]


def istft(spec, phase=None, length=None):
    """Invert a Spectrogram. ``phase`` overrides the stored phase."""
    ph = spec.phase if phase is None else phase
    if length is None:
        length = spec.length
    return istft_complex(spec.magnitude * np.exp(1j * ph), spec.config, length)


def stft_magnitude_backward(audio_len, spec, grad_mag, cfg=StftConfig()):
    """Adjoint of ``|stft(x)|``: maps dL/d|X| to dL/dx.

    ``spec`` is the complex STFT of x. Bins with zero magnitude get zero
    gradient (subgradient choice).
    """
    mag = np.abs(spec)
    safe = np.where(mag > 0, mag, 1.0)
    u = np.where(mag > 0, grad_mag * spec / safe, 0.0)
    # undo the one-sided doubling that irfft applies to interior bins
    v = u.copy()
    v[1:cfg.n_fft // 2] *= 0.5
    frames = np.fft.irfft(v.T, n=cfg.n_fft, axis=1) * cfg.n_fft * cfg.window_array()
    pad, n_frames, total, tail = _frame_layout(audio_len, cfg)
    gp = np.zeros(total)
    for m in range(n_frames):
        s = m * cfg.hop_length
        gp[s:s + cfg.n_fft] += frames[m]
    # adjoint of reflect padding: fold mirrored samples back
    g = gp[pad:pad + audio_len].copy()
    g[1:pad + 1] += gp[:pad][::-1]
    g[audio_len - pad - 1:audio_len - 1] += gp[pad + audio_len:2 * pad + audio_len][::-1]
    return g


def hilbert_envelope(audio):
    """Modulus of the analytic signal (frequency-domain construction)."""
    x = np.asarray(audio, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InputError("envelope needs finite input")
    if x.size == 0:
        return x.copy()
    return np.abs(hilbert(x, axis=-1))
