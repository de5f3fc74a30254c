"""
Command line entry point.

    sonicfield gen-data --scene oracle --n 500 --seed 0 --out data/
    sonicfield train --data data/ --out run/ [--config cfg.json] [flags]
    sonicfield eval --checkpoint run/checkpoint.json --data data/ --out run/eval
    sonicfield render-trajectory --checkpoint ... --poses poses.json --source a.wav --out traj/

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import dataio, dsp, simulator
from .anerf import ANerfConfig, ANerfModel, synthesize, synthesize_multi
from .avmapper import FrozenEncoder
from .core import ConfigurationError, TrainingError
from .geometry import Intrinsics, Pose
from .metrics import write_reports_csv
from .training import (build_acoustic_data, evaluate_acoustic, scene_diameter,
                       train_acoustic, visual_features)
from .vnerf import RadianceField, render_image, train_vnerf

log = logging.getLogger("sonicfield")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

STOCK_SCENES = {
    "oracle": simulator.oracle_scene,
    "direction": lambda: simulator.oracle_scene(ild_alpha=0.8),
    "material": simulator.material_scene,
    "two_source": simulator.two_source_scene,
}


class UsageFailure(Exception):
    """Bad invocation, config or input file (exit code 2)."""


@dataclass
class RunConfig:
    seed: int = 0
    width: int = 128
    epochs: int = 100
    batch_size: int = 32
    lr_init: float = 5e-4
    lr_final: float = 5e-6
    coordinate_transform: bool = True
    av_mapper: bool = False
    fusion: str = "add_input"
    refine: bool = False
    vnerf_width: int = 64
    vnerf_steps: int = 400
    vnerf_batch: int = 512
    vnerf_samples: int = 48
    feature_image_size: int = 16

    def validate(self):
        if self.width < 1 or self.batch_size < 1 or self.epochs < 0 or self.vnerf_steps < 0:
            raise ConfigurationError("width and batch_size must be positive, epochs non-negative")
        if not (self.lr_init > 0 and self.lr_final > 0):
            raise ConfigurationError("learning rates must be positive")
        ANerfConfig(fusion=self.fusion)
        return self

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()


# ---------------------------------------------------------------------------
# helpers


class OutputLock:
    """Exclusive ``.lock`` file in an output directory."""

    def __init__(self, directory):
        self.path = os.path.join(directory, ".lock")
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(f"output directory is locked by another run: {self.path}") from None
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        os.close(self.fd)
        os.remove(self.path)


def resolve_scene(arg):
    if arg in STOCK_SCENES:
        return STOCK_SCENES[arg]()
    if not os.path.exists(arg):
        raise UsageFailure(f"scene not found: {arg} (stock scenes: {', '.join(STOCK_SCENES)})")
    return dataio.load_scene(arg)


def load_config(args):
    base = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                base = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageFailure(f"cannot read config {args.config}: {exc}") from exc
    cfg = RunConfig.from_dict(base)
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            setattr(cfg, f.name, v)
    return cfg.validate()


def anerf_config(cfg, scene, k=0):
    room = scene.room or simulator.Room()
    return ANerfConfig(width=cfg.width, n_bins=dsp.StftConfig(sample_rate=scene.sample_rate).n_bins,
                       bounds=(room.lo[0], room.lo[1], room.hi[0], room.hi[1]),
                       coordinate_transform=cfg.coordinate_transform, visual=cfg.av_mapper,
                       fusion=cfg.fusion, refine=cfg.refine, seed=cfg.seed + k)


def build_models(cfg, scene):
    return [ANerfModel(anerf_config(cfg, scene, k)) for k in range(len(scene.sources))]


def build_field(cfg, scene):
    room = scene.room or simulator.Room()
    lo, hi = np.array(room.lo, dtype=float), np.array(room.hi, dtype=float)
    return RadianceField(width=cfg.vnerf_width, center=0.5 * (lo + hi),
                         scale=0.55 * float(np.max(hi - lo)), rng=cfg.seed)


def model_parameters(models, field=None, feat_stats=None):
    params = {}
    for k, m in enumerate(models):
        prefix = "anerf." if len(models) == 1 else f"anerf.src{k}."
        params.update({prefix + n: v for n, v in m.parameters().items()})
    if field is not None:
        params.update({"vnerf." + n: v for n, v in field.parameters().items()})
    if feat_stats is not None:
        params["features.mean"], params["features.std"] = feat_stats
    return params


def _strip(params, prefix):
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def restore(checkpoint):
    """Rebuild ``(cfg, scene, models, field, feat_stats)`` from a checkpoint file."""
    if not os.path.exists(checkpoint):
        raise UsageFailure(f"checkpoint not found: {checkpoint}")
    params, _, meta = dataio.load_checkpoint(checkpoint)
    cfg = RunConfig.from_dict(meta["config"])
    scene = simulator.SceneSpec.from_dict(meta["scene"])
    models = build_models(cfg, scene)
    for k, m in enumerate(models):
        prefix = "anerf." if len(models) == 1 else f"anerf.src{k}."
        dataio.assign_parameters(m, _strip(params, prefix))
    field = stats = None
    if cfg.av_mapper:
        field = build_field(cfg, scene)
        dataio.assign_parameters(field, _strip(params, "vnerf."))
        stats = (params["features.mean"], params["features.std"])
    return cfg, scene, models, field, stats


def features_for(cfg, scene, field, poses, stats):
    if field is None:
        return None
    feats = visual_features(field, FrozenEncoder(cfg.seed), poses, scene_diameter(scene),
                            image_size=cfg.feature_image_size, n_samples=cfg.vnerf_samples)
    return (feats - stats[0]) / stats[1]


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    scene = resolve_scene(args.scene)
    if args.n < 10:
        raise UsageFailure("--n must be at least 10")
    train, val = simulator.generate_dataset(scene, args.n, seed=args.seed,
                                            image_size=args.image_size)
    os.makedirs(args.out, exist_ok=True)
    with OutputLock(args.out):
        dataio.write_dataset(args.out, scene, {"train": train, "val": val})
    print(f"wrote {len(train)} train / {len(val)} val samples to {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = load_config(args)
    scene, train = dataio.read_dataset(args.data, "train")
    os.makedirs(args.out, exist_ok=True)
    with OutputLock(args.out):
        with open(os.path.join(args.out, "config.json"), "w") as fh:
            json.dump(asdict(cfg), fh, indent=1, sort_keys=True)
        meta = {"config": asdict(cfg), "scene": scene.to_dict()}
        models = build_models(cfg, scene)
        field = stats = feats = None
        if cfg.av_mapper:
            if any(ob.rgb is None for ob in train):
                raise UsageFailure("--av-mapper needs a dataset with images")
            field = build_field(cfg, scene)
            size = train[0].rgb.shape[0]
            train_vnerf(field, [ob.pose for ob in train], [ob.rgb for ob in train],
                        Intrinsics(size, size), steps=cfg.vnerf_steps, batch_rays=cfg.vnerf_batch,
                        n_samples=cfg.vnerf_samples, t_far=scene_diameter(scene), seed=cfg.seed)
            raw = visual_features(field, FrozenEncoder(cfg.seed), [ob.pose for ob in train],
                                  scene_diameter(scene), image_size=cfg.feature_image_size,
                                  n_samples=cfg.vnerf_samples)
            stats = (raw.mean(axis=0), raw.std(axis=0) + 1e-6)
            feats = (raw - stats[0]) / stats[1]
        data = build_acoustic_data(train, scene, features=feats)
        ckpt = os.path.join(args.out, "checkpoint.json")
        rows = []

        def on_epoch(epoch, loss, state):
            rows.append((epoch + 1, loss))
            log.info("epoch %d loss %.6g", epoch + 1, loss)

        try:
            train_acoustic(models, data, epochs=cfg.epochs, batch_size=cfg.batch_size,
                           seed=cfg.seed, lr=(cfg.lr_init, cfg.lr_final), on_epoch=on_epoch)
        except TrainingError:
            # parameters still hold the last finite update
            meta["aborted_after_epoch"] = len(rows)
            dataio.save_checkpoint(ckpt, model_parameters(models, field, stats), meta=meta)
            _write_curve(args.out, rows)
            raise
        dataio.save_checkpoint(ckpt, model_parameters(models, field, stats), meta=meta)
        _write_curve(args.out, rows)
    print(f"checkpoint written to {ckpt}")
    return EXIT_OK


def _write_curve(out, rows):
    with open(os.path.join(out, "train_curve.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for epoch, loss in rows:
            w.writerow([epoch, repr(float(loss))])


def cmd_eval(args):
    cfg, scene, models, field, stats = restore(args.checkpoint)
    _, obs = dataio.read_dataset(args.data, args.split)
    feats = features_for(cfg, scene, field, [ob.pose for ob in obs], stats)
    reports = evaluate_acoustic(models, obs, scene, feats, include_env=not args.no_env)
    os.makedirs(args.out, exist_ok=True)
    with OutputLock(args.out):
        with open(os.path.join(args.out, "metrics.json"), "w") as fh:
            json.dump({k: asdict(v) for k, v in reports.items()}, fh, indent=1, sort_keys=True)
        write_reports_csv(reports, os.path.join(args.out, "metrics.csv"))
    for name, rep in reports.items():
        print(f"{name:>14s}  MAG {rep.mag:.6g}  ENV {rep.env:.6g}")
    return EXIT_OK


def read_poses(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
        return [Pose.from_list(p) for p in raw]
    except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
        raise UsageFailure(f"cannot read pose list {path}: {exc}") from exc


def cmd_render_trajectory(args):
    poses = read_poses(args.poses)
    if not poses:
        print("empty pose list, nothing to render")
        return EXIT_OK
    cfg, scene, models, field, stats = restore(args.checkpoint)
    if len(args.source) != len(models):
        raise UsageFailure(f"scene has {len(models)} source(s), got {len(args.source)} --source")
    audio = []
    for p in args.source:
        if not os.path.exists(p):
            raise UsageFailure(f"source audio not found: {p}")
        x, _, _ = dataio.read_wav(p, target_rate=scene.sample_rate)
        audio.append(x.mean(axis=0))
    feats = features_for(cfg, scene, field, poses, stats)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    with OutputLock(args.out):
        for i, pose in enumerate(poses):
            e = None
            if feats is not None:
                e = [m.embed(feats[i:i + 1])[0][0] for m in models]
            if len(models) == 1:
                wav = synthesize(models[0], pose, audio[0], scene.source_positions[0],
                                 None if e is None else e[0])
            else:
                wav = synthesize_multi(models, pose, audio, scene.source_positions, e)
            dataio.write_wav(os.path.join(args.out, f"pose_{i:04d}.wav"), wav, scene.sample_rate)
            if field is not None:
                rgb, depth = render_image(field, pose, Intrinsics(args.image_size, args.image_size),
                                          t_far=scene_diameter(scene))
            else:
                rgb, depth = simulator.render_analytic(scene, pose, args.image_size, args.image_size)
            dataio.write_png(os.path.join(args.out, f"pose_{i:04d}_rgb.png"), np.clip(rgb, 0, 1))
            dataio.write_png(os.path.join(args.out, f"pose_{i:04d}_depth.png"), depth,
                             vmax=scene_diameter(scene))
            rms = np.sqrt(np.mean(wav ** 2, axis=1))
            rows.append([i, *pose.to_list(), rms[0], rms[1], float(np.sum(wav ** 2))])
        with open(os.path.join(args.out, "trajectory.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "x", "y", "z", "theta", "phi", "rms_left", "rms_right", "energy"])
            w.writerows(rows)
    print(f"rendered {len(poses)} poses to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_config_flags(p):
    g = p.add_argument_group("model (overrides --config)")
    g.add_argument("--seed", type=int)
    g.add_argument("--width", type=int, help="field width c (default 128)")
    g.add_argument("--epochs", type=int, help="training epochs (default 100)")
    g.add_argument("--batch-size", type=int, help="poses per batch (default 32)")
    g.add_argument("--lr-init", type=float, help="initial Adam step size (default 5e-4)")
    g.add_argument("--lr-final", type=float, help="final Adam step size (default 5e-6)")
    g.add_argument("--coordinate-transform", dest="coordinate_transform",
                   action=argparse.BooleanOptionalAction, default=None,
                   help="use the source-relative heading (default on)")
    g.add_argument("--av-mapper", dest="av_mapper", action=argparse.BooleanOptionalAction,
                   default=None, help="condition on rendered views (default off)")
    g.add_argument("--fusion", choices=("add_input", "concat", "add_all"))
    g.add_argument("--refine", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--vnerf-width", type=int)
    g.add_argument("--vnerf-steps", type=int)
    g.add_argument("--vnerf-batch", type=int)
    g.add_argument("--vnerf-samples", type=int)
    g.add_argument("--feature-image-size", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="sonicfield",
                                     description="Acoustic field toolkit: data, training, evaluation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="simulate a dataset")
    p.add_argument("--scene", default="oracle",
                   help=f"scene JSON path or stock name ({', '.join(STOCK_SCENES)})")
    p.add_argument("--n", type=int, default=500, help="number of poses (80/20 split)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the acoustic field (and V-NeRF with --av-mapper)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON RunConfig; flags override its values")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics for a checkpoint and the energy baselines")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--no-env", action="store_true", help="skip the envelope metric")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render-trajectory", help="binaural audio and views along a pose list")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--poses", required=True, help="JSON list of [x, y, z, theta, phi]")
    p.add_argument("--source", required=True, action="append", help="source WAV (one per source)")
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render_trajectory)
    return parser


USAGE_ERRORS = (UsageFailure, ConfigurationError, simulator.SceneError, dataio.ManifestError,
                dataio.FormatError, FileNotFoundError)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001  one-line diagnostic for any runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
