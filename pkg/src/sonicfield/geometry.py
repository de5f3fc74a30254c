"""Poses, pinhole cameras and analytic ray/primitive intersection."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Pose:
    """Listener/camera pose: position in meters, heading and elevation in radians."""
    x: float
    y: float
    z: float = 1.2
    theta: float = 0.0
    phi: float = 0.0

    @property
    def xy(self):
        return np.array([self.x, self.y])

    def to_list(self):
        return [self.x, self.y, self.z, self.theta, self.phi]

    @classmethod
    def from_list(cls, values):
        x, y, z, theta, phi = (float(v) for v in values)
        return cls(x, y, z, theta % (2 * math.pi), phi)


@dataclass(frozen=True)
class Intrinsics:
    width: int
    height: int
    fov_deg: float = 90.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if not 0.0 < self.fov_deg < 180.0:
            raise ValueError("horizontal field of view must lie in (0, 180) degrees")

    @property
    def focal(self):
        return 0.5 * self.width / math.tan(math.radians(self.fov_deg) / 2.0)


def camera_frame(theta, phi):
    forward = np.array([math.cos(phi) * math.cos(theta),
                        math.cos(phi) * math.sin(theta),
                        math.sin(phi)])
    right = np.array([math.sin(theta), -math.cos(theta), 0.0])
    up = np.cross(right, forward)
    return forward, right, up


def camera_rays(pose, intr):
    """Unit ray directions for every pixel, shape (H, W, 3); row 0 is the top."""
    forward, right, up = camera_frame(pose.theta, pose.phi)
    f = intr.focal
    j = (np.arange(intr.width) + 0.5 - intr.width / 2.0) / f
    i = (np.arange(intr.height) + 0.5 - intr.height / 2.0) / f
    px, py = np.meshgrid(j, i)
    d = forward + px[..., None] * right - py[..., None] * up
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def ray_sphere(origins, dirs, center, radius):
    """First positive hit distance of unit rays against a sphere (inf on miss)."""
    oc = origins - center
    b = np.sum(oc * dirs, axis=-1)
    c = np.sum(oc * oc, axis=-1) - radius * radius
    disc = b * b - c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    # origin inside the sphere: the near root is behind, use the far one
    t = np.where(t0 > 1e-9, t0, t1)
    return np.where(hit & (t > 1e-9), t, np.inf)


def ray_box(origins, dirs, lo, hi):
    """Entry hit of rays against an axis-aligned box from outside (inf on miss).

    Returns ``(t, face)`` with face in 0..5 = (-x, +x, -y, +y, -z, +z).
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origins) * inv
        tb = (hi - origins) * inv
    tmin = np.minimum(ta, tb)
    tmax = np.maximum(ta, tb)
    tmin = np.nan_to_num(tmin, nan=-np.inf)
    tmax = np.nan_to_num(tmax, nan=np.inf)
    t_enter = tmin.max(axis=-1)
    t_exit = tmax.min(axis=-1)
    axis = tmin.argmax(axis=-1)
    sign = np.take_along_axis(dirs, axis[..., None], -1)[..., 0] > 0
    face = 2 * axis + np.where(sign, 0, 1)
    t = np.where(t_enter > 1e-9, t_enter, t_exit)
    hit = (t_exit >= t_enter) & (t_exit > 1e-9)
    inside = t_enter <= 1e-9
    # from inside, report the exit face instead
    exit_axis = tmax.argmin(axis=-1)
    exit_sign = np.take_along_axis(dirs, exit_axis[..., None], -1)[..., 0] > 0
    exit_face = 2 * exit_axis + np.where(exit_sign, 1, 0)
    face = np.where(inside, exit_face, face)
    return np.where(hit, t, np.inf), face


def ray_room(origins, dirs, lo, hi):
    """Exit distance of rays leaving a room box from the inside, plus the wall index."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origins) * inv
        tb = (hi - origins) * inv
    tmax = np.nan_to_num(np.maximum(ta, tb), nan=np.inf)
    axis = tmax.argmin(axis=-1)
    t = np.take_along_axis(tmax, axis[..., None], -1)[..., 0]
    sign = np.take_along_axis(dirs, axis[..., None], -1)[..., 0] > 0
    return t, 2 * axis + np.where(sign, 1, 0)
