"""
On-disk formats.

WAV   RIFF/WAVE, written as 32-bit IEEE float (format tag 3) with a plain
      44-byte header; PCM16 and float32 are accepted on read.
JSON  dataset manifests (``MANIFEST_VERSION``) and scene descriptions, written
      with sorted keys so identical content gives identical bytes.
CKPT  checkpoint JSON: every array is stored as base64 of its little-endian
      float64 bytes together with its shape.
PNG   8-bit RGB / grayscale previews of rendered images.
"""

from __future__ import annotations

import base64
import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .core import AdamState
from .geometry import Pose

MANIFEST_VERSION = "1.0"
CHECKPOINT_VERSION = 1

WAVE_FORMAT_PCM = 1
WAVE_FORMAT_IEEE_FLOAT = 3


class FormatError(ValueError):
    """Unsupported or malformed file content."""


class ManifestError(ValueError):
    """Manifest fails validation."""


# ---------------------------------------------------------------------------
# WAV


def wav_header(n_frames, channels, sample_rate, bits=32, fmt=WAVE_FORMAT_IEEE_FLOAT):
    block = channels * bits // 8
    data_bytes = n_frames * block
    return (b"RIFF" + struct.pack("<I", 36 + data_bytes) + b"WAVE"
            + b"fmt " + struct.pack("<IHHIIHH", 16, fmt, channels, sample_rate,
                                    sample_rate * block, block, bits)
            + b"data" + struct.pack("<I", data_bytes))


def write_wav(path, waveform, sample_rate, strict=False):
    """Write float32 WAV. ``waveform`` is (n,) or (channels, n)."""
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if not np.all(np.isfinite(x)):
        raise FormatError("samples must be finite")
    if strict and np.any(np.abs(x) > 1.0):
        raise FormatError("samples exceed full scale")
    channels, n = x.shape
    with open(path, "wb") as fh:
        fh.write(wav_header(n, channels, int(sample_rate)))
        fh.write(x.T.astype("<f4").tobytes())


def read_wav(path, target_rate=None):
    """Return ``(waveform (channels, n) float64, channels, sample_rate)``.

    PCM16 is scaled by 1/32768. With ``target_rate`` the audio is resampled by
    linear interpolation.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = data = None
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        size = struct.unpack("<I", raw[pos + 4:pos + 8])[0]
        body = raw[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise FormatError(f"{path}: missing fmt or data chunk")
    tag, channels, rate, _, _, bits = fmt
    if tag == WAVE_FORMAT_PCM and bits == 16:
        x = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif tag == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        x = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported codec (format tag {tag}, {bits} bits)")
    x = x.reshape(-1, channels).T.copy()
    if target_rate is not None and target_rate != rate:
        x = resample_linear(x, rate, target_rate)
        rate = target_rate
    return x, channels, rate


def resample_linear(x, rate_in, rate_out):
    x = np.atleast_2d(x)
    n_out = int(round(x.shape[1] * rate_out / rate_in))
    t_out = np.arange(n_out) * (rate_in / rate_out)
    t_in = np.arange(x.shape[1])
    return np.stack([np.interp(t_out, t_in, ch) for ch in x])


# ---------------------------------------------------------------------------
# images


def write_png(path, image, vmax=None):
    """Save an (H, W, 3) image in [0, 1] or an (H, W) map scaled by ``vmax``."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        vmax = vmax or (img.max() if img.max() > 0 else 1.0)
        img = img / vmax
    arr = (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class Sample:
    id: str
    pose: Pose
    source_wav: list
    target_wav: str
    rgb: str | None = None
    depth: str | None = None

    def to_dict(self):
        return {"id": self.id, "pose": self.pose.to_list(), "source_wav": list(self.source_wav),
                "target_wav": self.target_wav, "rgb": self.rgb, "depth": self.depth}


@dataclass
class DatasetManifest:
    split: str
    scene: str
    samples: list = field(default_factory=list)
    version: str = MANIFEST_VERSION

    def to_dict(self):
        return {"version": self.version, "split": self.split, "scene": self.scene,
                "samples": [s.to_dict() for s in self.samples]}


def save_manifest(manifest, path):
    with open(path, "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_manifest(path, check_files=True):
    """Load and validate; relative file paths resolve against the manifest's folder."""
    if not os.path.exists(path):
        raise ManifestError(f"manifest not found: {path}")
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
    if d.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {d.get('version')!r}")
    for key in ("split", "scene", "samples"):
        if key not in d:
            raise ManifestError(f"{path}: missing field {key!r}")
    if d["split"] not in ("train", "val"):
        raise ManifestError(f"{path}: split must be 'train' or 'val'")
    base = os.path.dirname(os.path.abspath(path))
    seen = set()
    samples = []
    for s in d["samples"]:
        try:
            pose = Pose.from_list(s["pose"])
            sample = Sample(str(s["id"]), pose, list(s["source_wav"]), s["target_wav"],
                            s.get("rgb"), s.get("depth"))
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{path}: malformed sample entry ({exc})") from exc
        if sample.id in seen:
            raise ManifestError(f"{path}: duplicate sample id {sample.id!r}")
        seen.add(sample.id)
        if not all(math.isfinite(v) for v in pose.to_list()):
            raise ManifestError(f"{path}: non-finite pose in sample {sample.id!r}")
        if check_files:
            for rel in [*sample.source_wav, sample.target_wav, sample.rgb, sample.depth]:
                if rel is not None and not os.path.exists(os.path.join(base, rel)):
                    raise ManifestError(f"{path}: referenced file missing: {rel}")
        samples.append(sample)
    return DatasetManifest(d["split"], d["scene"], samples, d["version"])


# ---------------------------------------------------------------------------
# checkpoints


def encode_array(a):
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d):
    buf = base64.b64decode(d["data"])
    return np.frombuffer(buf, dtype="<f8").reshape(d["shape"]).copy()


def save_checkpoint(path, params, state=None, meta=None):
    """Write parameters (name -> array), optional Adam state and metadata."""
    doc = {"format_version": CHECKPOINT_VERSION,
           "params": {k: encode_array(v) for k, v in params.items()},
           "meta": meta or {}}
    if state is not None:
        doc["adam"] = {"step": state.step, "lr_init": state.lr_init, "lr_final": state.lr_final,
                       "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps,
                       "first_moment": {k: encode_array(v) for k, v in state.first_moment.items()},
                       "second_moment": {k: encode_array(v) for k, v in state.second_moment.items()}}
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_checkpoint(path):
    """Return ``(params, adam_state_or_None, meta)``."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {doc.get('format_version')!r}")
    params = {k: decode_array(v) for k, v in doc["params"].items()}
    state = None
    if "adam" in doc:
        a = doc["adam"]
        state = AdamState(a["lr_init"], a["lr_final"], a["beta1"], a["beta2"], a["eps"], a["step"],
                          {k: decode_array(v) for k, v in a["first_moment"].items()},
                          {k: decode_array(v) for k, v in a["second_moment"].items()})
    return params, state, doc.get("meta", {})


def assign_parameters(module, params):
    """Copy arrays into a module's parameters in place (names and shapes must match)."""
    target = module.parameters()
    missing = set(target) - set(params)
    if missing:
        raise FormatError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for k, arr in target.items():
        if arr.shape != params[k].shape:
            raise FormatError(f"shape mismatch for {k}: {arr.shape} vs {params[k].shape}")
        arr[...] = params[k]
    if hasattr(module, "bump"):
        module.bump()


# ---------------------------------------------------------------------------
# dataset directories
#
# <root>/scene.json            scene description
# <root>/train.json, val.json  manifests
# <root>/audio/<id>_src<k>.wav, <id>_target.wav
# <root>/images/<id>_rgb.png, <id>_depth.npy   (depth in metres, float32)


def save_scene(scene, path):
    with open(path, "w") as fh:
        json.dump(scene.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_scene(path):
    from .simulator import SceneError, SceneSpec
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SceneError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(d, dict):
        raise SceneError(f"{path}: scene must be a JSON object")
    return SceneSpec.from_dict(d)


def write_dataset(root, scene, splits):
    """Write ``{"train": [Observation], "val": [...]}`` under ``root``."""
    os.makedirs(os.path.join(root, "audio"), exist_ok=True)
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    save_scene(scene, os.path.join(root, "scene.json"))
    for split, observations in splits.items():
        samples = []
        for ob in observations:
            src = []
            for k, a in enumerate(ob.source_audio):
                rel = f"audio/{ob.id}_src{k}.wav"
                write_wav(os.path.join(root, rel), a, scene.sample_rate)
                src.append(rel)
            tgt = f"audio/{ob.id}_target.wav"
            write_wav(os.path.join(root, tgt), ob.target, scene.sample_rate)
            rgb = depth = None
            if ob.rgb is not None:
                rgb = f"images/{ob.id}_rgb.png"
                depth = f"images/{ob.id}_depth.npy"
                write_png(os.path.join(root, rgb), ob.rgb)
                np.save(os.path.join(root, depth), np.asarray(ob.depth, dtype=np.float32))
            samples.append(Sample(ob.id, ob.pose, src, tgt, rgb, depth))
        save_manifest(DatasetManifest(split, "scene.json", samples),
                      os.path.join(root, f"{split}.json"))


def read_png(path):
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def read_dataset(root, split):
    """Return ``(scene, [Observation])`` for one split of a dataset directory."""
    from .simulator import Observation
    manifest = load_manifest(os.path.join(root, f"{split}.json"))
    scene = load_scene(os.path.join(root, manifest.scene))
    obs = []
    for s in manifest.samples:
        src = [read_wav(os.path.join(root, p))[0][0].astype(np.float32) for p in s.source_wav]
        tgt = read_wav(os.path.join(root, s.target_wav))[0].astype(np.float32)
        rgb = depth = None
        if s.rgb is not None:
            rgb = read_png(os.path.join(root, s.rgb))
        if s.depth is not None:
            depth = np.load(os.path.join(root, s.depth))
        obs.append(Observation(s.id, s.pose, src, tgt, rgb, depth))
    return scene, obs
