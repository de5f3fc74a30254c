"""Coordinate encodings shared by the acoustic and visual fields."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi


class DegenerateGeometryError(ValueError):
    """Listener and source coincide, so no direction is defined."""


@dataclass(frozen=True)
class PositionalEncoding:
    num_frequencies: int = 10
    include_input: bool = False
    strict: bool = True

    def output_dim(self, input_dim):
        return input_dim * (2 * self.num_frequencies + (1 if self.include_input else 0))


def positional_encode(x, pe=PositionalEncoding()):
    """sin/cos features at frequencies 2^k * pi, k = 0..L-1.

    Works on the last axis: input (..., d) gives (..., d * (2L [+1])). Layout
    is ``[x?, sin(k=0), cos(k=0), sin(k=1), ...]`` with each block of width d.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.any(np.abs(x) > 1.0 + 1e-12):
        if pe.strict:
            raise ValueError("positional encoding expects inputs in [-1, 1]")
        log.warning("clamping %d encoding inputs to [-1, 1]", int(np.sum(np.abs(x) > 1.0)))
        x = np.clip(x, -1.0, 1.0)
    parts = [x] if pe.include_input else []
    for k in range(pe.num_frequencies):
        arg = (2.0 ** k) * math.pi * x
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)


def relative_direction(listener, heading, source):
    """Counter-clockwise angle from the heading vector to the source bearing.

    Vectorized over leading axes of ``listener``/``heading``. Result lies in
    [0, 2*pi); a source on the listener's left gives an angle in (0, pi).
    """
    listener = np.asarray(listener, dtype=np.float64)
    source = np.asarray(source, dtype=np.float64)
    heading = np.asarray(heading, dtype=np.float64)
    v = source - listener
    if np.any(np.hypot(v[..., 0], v[..., 1]) < 1e-12):
        raise DegenerateGeometryError("listener coincides with the sound source")
    bearing = np.arctan2(v[..., 1], v[..., 0])
    ang = np.mod(bearing - heading, TWO_PI)
    # mod can return exactly 2*pi for tiny negative inputs
    return np.where(ang >= TWO_PI, 0.0, ang)


class DirectionEmbedding:
    """Learnable 4 x c table for the directions 0, 90, 180 and 270 degrees."""

    def __init__(self, table):
        table = np.asarray(table)
        if table.ndim != 2 or table.shape[0] != 4:
            raise ValueError("direction table must have exactly 4 rows")
        if not np.all(np.isfinite(table)):
            raise ValueError("direction table must be finite")
        self.table = table
        self._version = 0

    @classmethod
    def init(cls, width, rng=None, scale=0.1, dtype=np.float64):
        rng = np.random.default_rng(rng)
        return cls(rng.uniform(-scale, scale, size=(4, width)).astype(dtype))

    @property
    def width(self):
        return self.table.shape[1]

    def parameters(self):
        return {"table": self.table}

    def bump(self):
        self._version += 1


def interpolation_weights(angle):
    """Lower cardinal index and blend weight toward the next cardinal."""
    angle = np.mod(np.asarray(angle, dtype=np.float64), TWO_PI)
    pos = angle / (math.pi / 2.0)
    lower = np.floor(pos).astype(int) % 4
    frac = pos - np.floor(pos)
    return lower, (lower + 1) % 4, frac


def interpolate_embedding(angle, emb):
    """Blend the two cardinal rows that bracket ``angle`` (radians)."""
    lo, hi, frac = interpolation_weights(angle)
    frac = np.asarray(frac)[..., None]
    return (1.0 - frac) * emb.table[lo] + frac * emb.table[hi]


def interpolate_embedding_backward(angle, grad, width):
    """Scatter gradients of interpolated rows back onto the 4 x c table."""
    lo, hi, frac = interpolation_weights(angle)
    grad = np.asarray(grad).reshape(-1, width)
    lo = np.atleast_1d(lo).reshape(-1)
    hi = np.atleast_1d(hi).reshape(-1)
    frac = np.atleast_1d(frac).reshape(-1, 1)
    g = np.zeros((4, width))
    np.add.at(g, lo, (1.0 - frac) * grad)
    np.add.at(g, hi, frac * grad)
    return g
