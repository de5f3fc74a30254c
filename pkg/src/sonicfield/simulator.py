"""
Synthetic audio-visual scenes with closed-form acoustics.

The binaural oracle lives inside the mask family the acoustic field can
represent: a distance gain scales both ears, and an interaural level
difference ``rho = ild_alpha * sin(relative direction)`` splits the mixture
into ``(1 + rho)`` and ``(1 - rho)`` channels. Optional extras make the task
harder in controlled ways: frequency-dependent air absorption and
heading-dependent absorption by visible "material" primitives.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dsp
from .encoding import DegenerateGeometryError, relative_direction
from .geometry import Intrinsics, Pose, camera_rays, ray_box, ray_room, ray_sphere

SPEED_OF_SOUND = 343.0


class SceneError(ValueError):
    """Scene description fails validation."""


@dataclass
class Source:
    position: tuple
    audio: str = "synthetic"


@dataclass
class Primitive:
    kind: str                       # "sphere" | "box"
    color: tuple
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.0
    lo: tuple = (0.0, 0.0, 0.0)
    hi: tuple = (0.0, 0.0, 0.0)
    absorption: float = 0.0         # acoustic, used by the material-dependent oracle

    def bounds_2d(self):
        if self.kind == "sphere":
            c = self.center
            return (c[0] - self.radius, c[1] - self.radius, c[0] + self.radius, c[1] + self.radius)
        return (self.lo[0], self.lo[1], self.hi[0], self.hi[1])

    def center_2d(self):
        if self.kind == "sphere":
            return np.array(self.center[:2], dtype=float)
        return 0.5 * (np.array(self.lo[:2]) + np.array(self.hi[:2]))


@dataclass
class Room:
    lo: tuple = (-2.0, -2.0, 0.0)
    hi: tuple = (2.0, 2.0, 2.5)
    walls: bool = True
    # -x, +x, -y, +y, floor, ceiling
    wall_colors: tuple = ((0.55, 0.55, 0.75), (0.75, 0.7, 0.55), (0.55, 0.75, 0.55),
                          (0.7, 0.55, 0.7), (0.35, 0.3, 0.25), (0.9, 0.9, 0.9))
    primitives: list = field(default_factory=list)


@dataclass
class IrParams:
    t60: float = 0.3
    t60_slope: float = 0.0          # seconds of T60 per meter along x
    direct_delay_speed: float = SPEED_OF_SOUND
    tail_level: float = 0.25
    length_s: float = 0.5
    sample_rate: int = 22050


@dataclass
class SceneSpec:
    sources: list
    d_min: float = 0.5
    ild_alpha: float = 0.6
    air_absorption: float | None = None   # 1/m at Nyquist, linear in frequency
    room: Room | None = field(default_factory=Room)
    ir_params: IrParams = field(default_factory=IrParams)
    material_sharpness: float = 4.0
    listener_height: float = 1.2
    clearance: float = 0.3
    margin: float = 0.2
    sample_rate: int = 22050
    clip_seconds: float = 1.0

    def __post_init__(self):
        if not self.sources:
            raise SceneError("scene needs at least one source")
        if self.d_min <= 0:
            raise SceneError("d_min must be positive")
        if not 0.0 <= self.ild_alpha <= 1.0:
            raise SceneError("ild_alpha must lie in [0, 1]")
        if self.ir_params.t60 <= 0:
            raise SceneError("t60 must be positive")
        if self.air_absorption is not None and self.air_absorption < 0:
            raise SceneError("air_absorption must be non-negative")

    @property
    def source_positions(self):
        return np.array([s.position[:2] for s in self.sources], dtype=float)

    def region(self):
        """Axis-aligned 2D region where listeners may stand."""
        room = self.room or Room(walls=False)
        return (room.lo[0] + self.margin, room.lo[1] + self.margin,
                room.hi[0] - self.margin, room.hi[1] - self.margin)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        try:
            d = dict(d)
            sources = [Source(tuple(s["position"]), s.get("audio", "synthetic")) for s in d.pop("sources")]
            room = d.pop("room", None)
            if room is not None:
                room = dict(room)
                prims = [Primitive(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in p.items()})
                         for p in room.pop("primitives", [])]
                room = Room(**{k: _tuplify(v) for k, v in room.items()}, primitives=prims)
            ir = IrParams(**d.pop("ir_params", {}))
            return cls(sources=sources, room=room, ir_params=ir, **d)
        except SceneError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneError(f"invalid scene description: {exc}") from exc


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


# ---------------------------------------------------------------------------
# stock scenes


def oracle_scene(ild_alpha=0.6, air_absorption=None, source=(0.0, 0.0)):
    """Single source in a 4 x 4 m room, marked by a small sphere."""
    speaker = Primitive("sphere", (0.9, 0.4, 0.1), center=(source[0], source[1], 1.0), radius=0.15)
    return SceneSpec(sources=[Source(tuple(source))], ild_alpha=ild_alpha,
                     air_absorption=air_absorption, room=Room(primitives=[speaker]))


def material_scene(absorption=0.6, seed_source=(0.0, 0.0)):
    """Oracle scene plus a red absorbing panel on the +x wall.

    Facing the panel attenuates both ears, an effect that depends on absolute
    heading and is only observable through the rendered view.
    """
    scene = oracle_scene(source=seed_source)
    panel = Primitive("box", (0.95, 0.1, 0.1), lo=(1.85, -1.2, 0.2), hi=(2.0, 1.2, 2.3),
                      absorption=absorption)
    scene.room.primitives.append(panel)
    return scene


def two_source_scene():
    sources = [Source((-0.9, 0.6)), Source((1.0, -0.7))]
    prims = [Primitive("sphere", (0.9, 0.4, 0.1), center=(-0.9, 0.6, 1.0), radius=0.15),
             Primitive("sphere", (0.1, 0.5, 0.9), center=(1.0, -0.7, 1.0), radius=0.15)]
    return SceneSpec(sources=sources, room=Room(primitives=prims))


def sphere_scene(radius=1.0, color=(0.2, 0.6, 0.9)):
    """One sphere at the origin with a black background (no walls)."""
    sph = Primitive("sphere", tuple(color), center=(0.0, 0.0, 0.0), radius=radius)
    room = Room(lo=(-4.0, -4.0, -4.0), hi=(4.0, 4.0, 4.0), walls=False, primitives=[sph])
    return SceneSpec(sources=[Source((3.0, 3.0))], room=room)


def ir_scene(t60=0.2, t60_slope=0.05, sample_rate=4000, length_s=0.4):
    """Oracle scene with a position-dependent decay, T60 in [0.1, 0.3] s across the room.

    The response is long enough for every local decay to reach -35 dB
    well before truncation.
    """
    scene = oracle_scene()
    scene.ir_params = IrParams(t60=t60, t60_slope=t60_slope, sample_rate=sample_rate,
                               length_s=length_s)
    return scene


# ---------------------------------------------------------------------------
# acoustics


def distance_gain(d, d_min):
    """Inverse-distance gain normalized to 1 at ``d_min`` and capped there."""
    return d_min / np.maximum(d, d_min)


def material_gain(scene, pose):
    g = 1.0
    if scene.room is None:
        return g
    for prim in scene.room.primitives:
        if prim.absorption <= 0:
            continue
        v = prim.center_2d() - pose.xy
        delta = math.atan2(v[1], v[0]) - pose.theta
        w = max(0.0, math.cos(delta)) ** scene.material_sharpness
        g *= 1.0 - prim.absorption * w
    return g


def source_masks(scene, pose, n_bins, source_index=0):
    """Closed-form (mixture, difference) masks for one source at one pose."""
    src = scene.source_positions[source_index]
    d = float(np.hypot(*(src - pose.xy)))
    if d < 1e-9:
        raise DegenerateGeometryError("listener coincides with a sound source")
    g = distance_gain(d, scene.d_min) * material_gain(scene, pose)
    m_mix = np.full(n_bins, g)
    if scene.air_absorption:
        freq = np.linspace(0.0, 1.0, n_bins)
        m_mix = m_mix * np.exp(-scene.air_absorption * freq * d)
    rho = scene.ild_alpha * math.sin(float(relative_direction(pose.xy, pose.theta, src)))
    return m_mix, np.full(n_bins, rho)


def simulate_binaural(scene, pose, source_audio, cfg=None):
    """Render the two-ear recording for ``pose``.

    ``source_audio`` is one waveform per scene source (a bare array is taken
    as the single source). Returns an array of shape (2, n).
    """
    cfg = cfg or dsp.StftConfig(sample_rate=scene.sample_rate)
    if isinstance(source_audio, np.ndarray) and source_audio.ndim == 1:
        source_audio = [source_audio]
    if len(source_audio) != len(scene.sources):
        raise SceneError("need one source waveform per scene source")
    n = len(source_audio[0])
    left = right = 0.0
    mix = 0.0
    for i, audio in enumerate(source_audio):
        spec = dsp.stft_complex(audio, cfg)
        m_mix, m_diff = source_masks(scene, pose, cfg.n_bins, i)
        mag = np.abs(spec) * m_mix[:, None]
        left = left + mag * (1.0 + m_diff[:, None])
        right = right + mag * (1.0 - m_diff[:, None])
        mix = mix + spec
    phase = np.exp(1j * np.angle(mix))
    return np.stack([dsp.istft_complex(left * phase, cfg, n),
                     dsp.istft_complex(right * phase, cfg, n)])


def local_t60(scene, pose):
    ir = scene.ir_params
    return max(0.05, ir.t60 + ir.t60_slope * pose.x)


def simulate_ir(scene, pose, seed=0):
    """Two-channel parametric impulse response, shape (2, length).

    A direct impulse at the propagation delay is followed by a Gaussian tail
    whose energy decays 60 dB over the local T60.
    """
    ir = scene.ir_params
    sr = ir.sample_rate
    n = int(round(ir.length_s * sr))
    src = scene.source_positions[0]
    d = float(np.hypot(*(src - pose.xy)))
    if d < 1e-9:
        raise DegenerateGeometryError("listener coincides with a sound source")
    delay = int(round(d / ir.direct_delay_speed * sr))
    if delay >= n:
        raise SceneError("impulse response too short for the direct path")
    g = distance_gain(d, scene.d_min)
    rho = scene.ild_alpha * math.sin(float(relative_direction(pose.xy, pose.theta, src)))
    t60 = local_t60(scene, pose)
    rng = np.random.default_rng(seed)
    t = np.arange(n - delay - 1) / sr
    env = ir.tail_level * np.exp(-3.0 * math.log(10.0) * t / t60)
    out = np.zeros((2, n))
    for ch, sign in enumerate((1.0, -1.0)):
        out[ch, delay] = g
        out[ch, delay + 1:] = env * rng.standard_normal(len(t))
        out[ch] *= 1.0 + sign * rho
    return out


def exponential_c50(t60, early=0.05):
    """Closed-form C50 (dB) of a pure exponential energy decay starting at t = 0."""
    a = 6.0 * math.log(10.0) / t60
    return 10.0 * math.log10((1.0 - math.exp(-a * early)) / math.exp(-a * early))


# ---------------------------------------------------------------------------
# vision


def render_analytic(scene, pose, width, height, fov_deg=90.0):
    """Ray-traced (rgb, depth) images with flat shading; misses are black / 0."""
    if scene.room is None:
        raise SceneError("scene has no room to render")
    intr = Intrinsics(width, height, fov_deg)
    dirs = camera_rays(pose, intr).reshape(-1, 3)
    origin = np.array([pose.x, pose.y, pose.z])
    origins = np.broadcast_to(origin, dirs.shape)
    best = np.full(len(dirs), np.inf)
    rgb = np.zeros((len(dirs), 3))
    room = scene.room
    if room.walls:
        t, wall = ray_room(origins, dirs, np.array(room.lo), np.array(room.hi))
        colors = np.array(room.wall_colors)
        best = t
        rgb = colors[wall]
    for prim in room.primitives:
        if prim.kind == "sphere":
            t = ray_sphere(origins, dirs, np.array(prim.center), prim.radius)
        else:
            t, _ = ray_box(origins, dirs, np.array(prim.lo), np.array(prim.hi))
        closer = t < best
        best = np.where(closer, t, best)
        rgb[closer] = prim.color
    depth = np.where(np.isfinite(best), best, 0.0)
    return rgb.reshape(height, width, 3), depth.reshape(height, width)


# ---------------------------------------------------------------------------
# datasets


def synth_source_audio(seed, n, sample_rate=22050):
    """Deterministic broadband test signal: tinted noise plus a harmonic tone."""
    rng = np.random.default_rng(seed)
    spec = rng.standard_normal(n // 2 + 1) + 1j * rng.standard_normal(n // 2 + 1)
    f = np.fft.rfftfreq(n, 1.0 / sample_rate)
    spec *= 1.0 / np.sqrt(1.0 + f / 500.0)
    noise = np.fft.irfft(spec, n)
    t = np.arange(n) / sample_rate
    f0 = rng.uniform(150.0, 600.0)
    tone = sum(np.sin(2 * np.pi * f0 * k * t + rng.uniform(0, 2 * np.pi)) / k for k in range(1, 6))
    x = noise / np.std(noise) + 0.5 * tone
    return 0.5 * x / np.max(np.abs(x))


def in_free_region(scene, xy):
    for s in scene.source_positions:
        if np.hypot(*(xy - s)) < scene.clearance:
            return False
    if scene.room is not None:
        for prim in scene.room.primitives:
            x0, y0, x1, y1 = prim.bounds_2d()
            c = scene.clearance
            if x0 - c <= xy[0] <= x1 + c and y0 - c <= xy[1] <= y1 + c:
                if prim.kind == "box" or np.hypot(*(xy - prim.center_2d())) < prim.radius + c:
                    return False
    return True


def sample_poses(scene, n, rng, max_tries=1000):
    x0, y0, x1, y1 = scene.region()
    poses = []
    tries = 0
    while len(poses) < n:
        xy = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
        theta = rng.uniform(0.0, 2 * math.pi)
        if in_free_region(scene, xy):
            poses.append(Pose(float(xy[0]), float(xy[1]), scene.listener_height, float(theta), 0.0))
            tries = 0
        else:
            tries += 1
            if tries > max_tries:
                raise SceneError("could not sample a pose in the free region")
    return poses


@dataclass
class Observation:
    id: str
    pose: Pose
    source_audio: list             # one float32 waveform per source
    target: np.ndarray             # (2, n) float32
    rgb: np.ndarray | None = None  # (H, W, 3)
    depth: np.ndarray | None = None


def generate_dataset(scene, n_poses, seed=0, split_ratio=0.8, image_size=32, with_images=True):
    """Sample poses, simulate recordings and split into (train, val) lists."""
    if n_poses < 10:
        raise SceneError("need at least 10 poses")
    rng = np.random.default_rng(seed)
    poses = sample_poses(scene, n_poses, rng)
    audio_seeds = rng.integers(0, 2**31, size=(n_poses, len(scene.sources)))
    n = int(round(scene.clip_seconds * scene.sample_rate))
    obs = []
    for k, pose in enumerate(poses):
        src = [synth_source_audio(int(s), n, scene.sample_rate) for s in audio_seeds[k]]
        target = simulate_binaural(scene, pose, src)
        rgb = depth = None
        if with_images and scene.room is not None:
            rgb, depth = render_analytic(scene, pose, image_size, image_size)
            rgb, depth = rgb.astype(np.float32), depth.astype(np.float32)
        obs.append(Observation(f"{k:05d}", pose, [a.astype(np.float32) for a in src],
                               target.astype(np.float32), rgb, depth))
    order = rng.permutation(n_poses)
    n_train = int(round(split_ratio * n_poses))
    train = [obs[i] for i in sorted(order[:n_train])]
    val = [obs[i] for i in sorted(order[n_train:])]
    return train, val


@dataclass
class IrSample:
    id: str
    pose: Pose
    ir: np.ndarray


def generate_ir_dataset(scene, n_poses, seed=0, split_ratio=0.8):
    rng = np.random.default_rng(seed)
    poses = sample_poses(scene, n_poses, rng)
    seeds = rng.integers(0, 2**31, size=n_poses)
    samples = [IrSample(f"{k:05d}", p, simulate_ir(scene, p, int(s)))
               for k, (p, s) in enumerate(zip(poses, seeds))]
    order = rng.permutation(n_poses)
    n_train = int(round(split_ratio * n_poses))
    return ([samples[i] for i in sorted(order[:n_train])],
            [samples[i] for i in sorted(order[n_train:])])
