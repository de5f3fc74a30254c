"""
Audio and impulse-response quality metrics, and energy-scaling baselines.

Every distance uses mean-per-element reduction so it is on the same scale as
the training loss.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dsp

log = logging.getLogger(__name__)


class MetricUndefinedError(ValueError):
    """The estimator cannot be applied to this impulse response."""


def _as_stereo(a):
    a = np.asarray(a, dtype=np.float64)
    return a[None, :] if a.ndim == 1 else a


def mag_distance(pred, gt, cfg=dsp.StftConfig()):
    """Mean squared magnitude-spectrogram distance, summed over channels."""
    pred, gt = _as_stereo(pred), _as_stereo(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    total = 0.0
    for p, g in zip(pred, gt):
        mp = np.abs(dsp.stft_complex(p, cfg))
        mg = np.abs(dsp.stft_complex(g, cfg))
        total += float(np.mean((mp - mg) ** 2))
    return total


def env_distance(pred, gt):
    """Mean squared Hilbert-envelope distance, averaged over channels."""
    pred, gt = _as_stereo(pred), _as_stereo(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    vals = [np.mean((dsp.hilbert_envelope(p) - dsp.hilbert_envelope(g)) ** 2)
            for p, g in zip(pred, gt)]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# room acoustics


def schroeder_curve(ir):
    """Backward-integrated energy decay in dB, normalized to 0 dB at t = 0."""
    e = np.asarray(ir, dtype=np.float64) ** 2
    edc = np.cumsum(e[::-1])[::-1]
    if edc[0] <= 0:
        raise MetricUndefinedError("impulse response has no energy")
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(edc / edc[0])


def _fit_decay(curve, sample_rate, start_db, stop_db):
    """Least-squares slope (dB/s) of the Schroeder curve between two levels."""
    if curve[-1] > stop_db:
        raise MetricUndefinedError(
            f"decay range {-curve[-1]:.1f} dB does not reach {-stop_db:.0f} dB")
    i0 = int(np.argmax(curve <= start_db))
    i1 = int(np.argmax(curve <= stop_db))
    # truncation forces the curve to -inf at the end; a level reached only in
    # the last tenth of the response is a truncation artefact, not decay
    if i1 >= 0.9 * len(curve):
        raise MetricUndefinedError(f"decay to {stop_db:.0f} dB only reached at truncation")
    if i1 - i0 < 2:
        raise MetricUndefinedError("too few samples in the fit span")
    t = np.arange(i0, i1 + 1) / sample_rate
    slope, _ = np.polyfit(t, curve[i0:i1 + 1], 1)
    if slope >= 0:
        raise MetricUndefinedError("non-decaying energy curve")
    return slope


def _mono_ir(ir):
    ir = np.asarray(ir, dtype=np.float64)
    # channels share the decay; pool their energy
    return np.sqrt(np.sum(ir ** 2, axis=0)) if ir.ndim == 2 else ir


def t60(ir, sample_rate):
    """Reverberation time from the -5..-35 dB Schroeder span, extrapolated to 60 dB."""
    curve = schroeder_curve(_mono_ir(ir))
    return -60.0 / _fit_decay(curve, sample_rate, -5.0, -35.0)


def edt(ir, sample_rate):
    """Early decay time: six times the 0..-10 dB decay time."""
    curve = schroeder_curve(_mono_ir(ir))
    return -60.0 / _fit_decay(curve, sample_rate, 0.0, -10.0)


def c50(ir, sample_rate, clamp_db=60.0):
    """Early (first 50 ms) to late energy ratio in dB."""
    e = _mono_ir(ir) ** 2
    k = int(round(0.05 * sample_rate))
    if len(e) <= k:
        raise MetricUndefinedError("impulse response shorter than 50 ms")
    early, late = float(e[:k].sum()), float(e[k:].sum())
    if late <= early * 10 ** (-clamp_db / 10.0):
        log.info("late energy negligible; C50 clamped at %.0f dB", clamp_db)
        return clamp_db
    if early <= 0:
        return -clamp_db
    return 10.0 * math.log10(early / late)


def t60_error(pred_ir, gt_ir, sample_rate):
    """Relative T60 error in percent."""
    ref = t60(gt_ir, sample_rate)
    return 100.0 * abs(t60(pred_ir, sample_rate) - ref) / ref


def c50_error(pred_ir, gt_ir, sample_rate):
    return abs(c50(pred_ir, sample_rate) - c50(gt_ir, sample_rate))


def edt_error(pred_ir, gt_ir, sample_rate):
    return abs(edt(pred_ir, sample_rate) - edt(gt_ir, sample_rate))


# ---------------------------------------------------------------------------
# baselines

BASELINES = ("MonoMono", "MonoEnergy", "StereoEnergy")


def _rms(x):
    return float(np.sqrt(np.mean(np.asarray(x, dtype=np.float64) ** 2)))


def baseline(kind, source, gt):
    """Energy-scaling baselines that only duplicate or rescale the source."""
    source = np.asarray(source, dtype=np.float64)
    gt = _as_stereo(gt)
    if kind == "MonoMono":
        return np.stack([source, source])
    src_rms = _rms(source)
    if src_rms == 0.0:
        if np.any(gt != 0):
            log.warning("silent source with non-silent target; baseline stays silent")
        return np.zeros((2, len(source)))
    if kind == "MonoEnergy":
        scale = np.mean([_rms(ch) for ch in gt]) / src_rms
        return np.stack([scale * source, scale * source])
    if kind == "StereoEnergy":
        return np.stack([_rms(ch) / src_rms * source for ch in gt])
    raise ValueError(f"unknown baseline {kind!r}")


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    mag: float = 0.0
    env: float = 0.0
    t60_pct: float = 0.0
    c50_db: float = 0.0
    edt_s: float = 0.0
    per_sample: list = field(default_factory=list)

    @classmethod
    def aggregate(cls, rows):
        """Mean over per-sample dicts; missing keys count as zero."""
        keys = ("mag", "env", "t60_pct", "c50_db", "edt_s")
        if not rows:
            return cls()
        means = {k: float(np.mean([r.get(k, 0.0) for r in rows])) for k in keys}
        return cls(**means, per_sample=list(rows))

    def to_json(self, path=None):
        text = json.dumps(asdict(self), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    def csv_row(self, name):
        return {"name": name, "mag": self.mag, "env": self.env, "t60_pct": self.t60_pct,
                "c50_db": self.c50_db, "edt_s": self.edt_s}


def write_reports_csv(reports, path):
    """One flat row per named report."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["name", "mag", "env", "t60_pct", "c50_db", "edt_s"])
        writer.writeheader()
        for name, rep in reports.items():
            writer.writerow(rep.csv_row(name))
