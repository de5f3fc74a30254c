"""
Visual conditioning for the acoustic field.

A frozen, seeded convolutional encoder turns rendered RGB and depth images
into 512-d features each; a small trainable MLP projects the concatenated
1024-d vector onto the acoustic field's width.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import MLPBlock

INPUT_SIZE = 64
FEATURE_DIM = 512


def resize_nearest(img, size=INPUT_SIZE):
    """Nearest-neighbour resize of an (H, W[, C]) image to size x size."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    rows = (np.arange(size) * h // size)
    cols = (np.arange(size) * w // size)
    return img[rows][:, cols]


def _conv3x3(x, weight, bias):
    """'same' 3x3 convolution; x (C, H, W), weight (O, C, 3, 3)."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))   # (C, H, W, 3, 3)
    return np.einsum("chwij,ocij->ohw", win, weight, optimize=True) + bias[:, None, None]


def _avg_pool(x, k):
    c, h, w = x.shape
    return x.reshape(c, h // k, k, w // k, k).mean(axis=(2, 4))


class FrozenEncoder:
    """Three conv/ReLU/pool stages, then 2x2 pooling of 128 channels -> 512 features."""

    channels = (3, 32, 64, 128)

    def __init__(self, seed=0):
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        self.weights = []
        for cin, cout in zip(self.channels[:-1], self.channels[1:]):
            std = np.sqrt(2.0 / (cin * 9))
            self.weights.append((rng.normal(0.0, std, size=(cout, cin, 3, 3)),
                                 rng.uniform(-0.05, 0.05, size=cout)))

    def encode(self, img):
        """Features of one (64, 64, 3) image in [0, 1]."""
        img = np.asarray(img, dtype=np.float64)
        if img.shape != (INPUT_SIZE, INPUT_SIZE, 3):
            raise ValueError(f"encoder expects ({INPUT_SIZE}, {INPUT_SIZE}, 3), got {img.shape}")
        x = img.transpose(2, 0, 1) - 0.5
        for w, b in self.weights:
            x = _avg_pool(np.maximum(_conv3x3(x, w, b), 0.0), 2)
        # (128, 8, 8) -> (128, 2, 2)
        return _avg_pool(x, 4).reshape(-1)


def encode_views(enc, rgb, depth, scene_diameter):
    """Frozen (rgb, depth) features; depth is scaled to [0, 1] by the scene diameter."""
    rgb = np.asarray(rgb)
    depth = np.asarray(depth)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or depth.shape != rgb.shape[:2]:
        raise ValueError(f"rgb {rgb.shape} and depth {depth.shape} do not form an image pair")
    rgb = resize_nearest(rgb)
    d = np.clip(resize_nearest(depth) / scene_diameter, 0.0, 1.0)
    return enc.encode(rgb), enc.encode(np.repeat(d[..., None], 3, axis=2))


class AvMapper:
    """3-layer MLP from the 1024-d view features to a width-c embedding."""

    def __init__(self, width=128, hidden=None, rng=0, zero_output=False, dtype=np.float64):
        hidden = hidden or width
        self.mlp = MLPBlock.build([2 * FEATURE_DIM, hidden, hidden, width],
                                  ["relu", "relu", "identity"], rng=rng,
                                  zero_last=zero_output, dtype=dtype)

    @property
    def width(self):
        return self.mlp.out_features

    def parameters(self):
        return self.mlp.parameters()

    def bump(self):
        self.mlp.bump()

    def forward(self, features):
        return self.mlp.forward(features)

    def backward(self, tape, grad):
        grads, gx, _, _ = self.mlp.backward(tape, grad)
        return grads, gx


def map_features(mapper, rgb_feat, depth_feat):
    rgb_feat = np.asarray(rgb_feat)
    depth_feat = np.asarray(depth_feat)
    if rgb_feat.shape[-1] != FEATURE_DIM or depth_feat.shape[-1] != FEATURE_DIM:
        raise ValueError(f"expected {FEATURE_DIM}-d features")
    e, _ = mapper.forward(np.concatenate([rgb_feat, depth_feat], axis=-1))
    return e
