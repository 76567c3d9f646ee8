"""Command-line interface.

Subcommands cover the full pipeline: ``gen`` renders a synthetic dataset
with simulated sparse reconstruction, ``train`` fits a model, ``predict``
writes depth rasters, ``eval`` scores them against references,
``export-ply`` turns a raster into a point cloud, and ``gradcheck`` runs
the finite-difference suite.

Every subcommand accepts ``--config FILE`` (JSON) supplying defaults;
explicit flags win over the file, and the fully resolved configuration
is echoed as one JSON line on stdout before any work starts.

Exit codes: 0 success, 2 configuration problem, 3 data problem,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .autodiff import Tape
from .dataset_io import (
    Dataset,
    FrameRecord,
    quantize_depth,
    quantize_image,
    read_dataset,
    read_pfm,
    read_pgm,
    write_dataset,
    write_pfm,
    write_ply,
)
from .errors import (
    ConfigError,
    DataError,
    ManifestError,
    ModelConfigError,
    NumericalError,
)
from .evaluate import depth_to_cloud, evaluate_predictions
from .gradcheck import run_all_checks
from .model import DepthNet, DepthNetConfig, PixelLogDepthModel
from .scenes import (
    SfmSimConfig,
    default_intrinsics,
    make_scene,
    make_trajectory,
    render_ground_truth,
    simulate_sfm,
)
from .supervision import PairingConfig
from .trainer import TrainConfig, load_checkpoint, train, training_pairs_from_dataset

log = logging.getLogger(__name__)

_GEN_DEFAULTS = {
    "out": None,
    "scene": "heightfield",
    "frames": 20,
    "size": 64,
    "seed": 0,
    "points": 200,
    "outlier_frac": 0.05,
    "sigma_frac": 0.005,
    "outlier_min_frac": 0.12,
}

_TRAIN_DEFAULTS = {
    "data": None,
    "out": None,
    "model": "depthnet",
    "epochs": 10,
    "learning_rate": 1.0e-4,
    "consistency_weight": 2.0e-4,
    "validation_fraction": 0.05,
    "seed": 0,
    "max_gap": 3,
    "noise_sigma": 0.0,
    "threads": 1,
    "levels": 3,
    "base_channels": 8,
    "use_skips": True,
    "init_log_depth": 0.0,
    "resume": False,
}

_PREDICT_DEFAULTS = {"checkpoint": None, "data": None, "out": None, "frames": None}

_EVAL_DEFAULTS = {
    "data": None,
    "pred": None,
    "checkpoint": None,
    "frames": None,
    "report": None,
}

_EXPORT_DEFAULTS = {"depth": None, "data": None, "out": None, "image": None}

_GRADCHECK_DEFAULTS = {"seed": 0}


def _add_config_flag(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON file with defaults for this subcommand")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sfmdepth",
        description="Self-supervised dense depth from sparse multi-view reconstructions",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    gen = subs.add_parser("gen", help="render a synthetic dataset")
    _add_config_flag(gen)
    gen.add_argument("--out", help="dataset directory to create")
    gen.add_argument("--scene", choices=["heightfield", "tube"], help="scene family")
    gen.add_argument("--frames", type=int, help="number of video frames")
    gen.add_argument("--size", type=int, help="square image size in pixels")
    gen.add_argument("--seed", type=int, help="master seed")
    gen.add_argument("--points", type=int, help="sparse points to track")
    gen.add_argument("--outlier-frac", type=float, dest="outlier_frac")
    gen.add_argument("--sigma-frac", type=float, dest="sigma_frac")
    gen.add_argument("--outlier-min-frac", type=float, dest="outlier_min_frac")
    gen.set_defaults(func=cmd_gen, defaults=_GEN_DEFAULTS)

    tr = subs.add_parser("train", help="fit a depth model on a dataset")
    _add_config_flag(tr)
    tr.add_argument("--data", help="dataset directory")
    tr.add_argument("--out", help="checkpoint path (.npz)")
    tr.add_argument("--model", choices=["depthnet", "pixel"])
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--learning-rate", type=float, dest="learning_rate")
    tr.add_argument("--consistency-weight", type=float, dest="consistency_weight")
    tr.add_argument("--validation-fraction", type=float, dest="validation_fraction")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--max-gap", type=int, dest="max_gap")
    tr.add_argument("--noise-sigma", type=float, dest="noise_sigma")
    tr.add_argument("--threads", type=int)
    tr.add_argument("--levels", type=int, help="encoder downsampling stages")
    tr.add_argument("--base-channels", type=int, dest="base_channels")
    tr.add_argument(
        "--skips",
        action=argparse.BooleanOptionalAction,
        dest="use_skips",
        default=None,
        help="additive encoder-decoder skip connections",
    )
    tr.add_argument("--init-log-depth", type=float, dest="init_log_depth")
    tr.add_argument(
        "--resume", action=argparse.BooleanOptionalAction, default=None,
        help="continue from the checkpoint at --out",
    )
    tr.set_defaults(func=cmd_train, defaults=_TRAIN_DEFAULTS)

    pr = subs.add_parser("predict", help="write predicted depth rasters")
    _add_config_flag(pr)
    pr.add_argument("--checkpoint", help="trained checkpoint (.npz)")
    pr.add_argument("--data", help="dataset directory")
    pr.add_argument("--out", help="output directory for PFM rasters")
    pr.add_argument("--frames", help="comma-separated frame ids (default: all)")
    pr.set_defaults(func=cmd_predict, defaults=_PREDICT_DEFAULTS)

    ev = subs.add_parser("eval", help="score predictions against references")
    _add_config_flag(ev)
    ev.add_argument("--data", help="dataset directory")
    ev.add_argument("--pred", help="directory of predicted PFM rasters")
    ev.add_argument("--checkpoint", help="predict on the fly from this checkpoint")
    ev.add_argument("--frames", help="comma-separated frame ids (default: all)")
    ev.add_argument("--report", help="write the JSON report here as well")
    ev.set_defaults(func=cmd_eval, defaults=_EVAL_DEFAULTS)

    ex = subs.add_parser("export-ply", help="turn a depth raster into a point cloud")
    _add_config_flag(ex)
    ex.add_argument("--depth", help="PFM depth raster")
    ex.add_argument("--data", help="dataset directory supplying the camera model")
    ex.add_argument("--out", help="output PLY path")
    ex.add_argument("--image", help="optional PGM image for per-point intensity")
    ex.set_defaults(func=cmd_export_ply, defaults=_EXPORT_DEFAULTS)

    gc = subs.add_parser("gradcheck", help="finite-difference gradient verification")
    _add_config_flag(gc)
    gc.add_argument("--seed", type=int)
    gc.set_defaults(func=cmd_gradcheck, defaults=_GRADCHECK_DEFAULTS)

    return parser


def _resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, config file, and explicit flags (flags win)."""
    cfg = dict(args.defaults)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            overrides = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(overrides, dict):
            raise ConfigError(f"{path}: config root must be an object")
        for key, value in overrides.items():
            if key not in cfg:
                raise ConfigError(f"{path}: unknown config key {key!r}")
            cfg[key] = value
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _require(cfg: dict, *keys: str) -> None:
    for key in keys:
        if cfg.get(key) is None:
            raise ConfigError(f"missing required option --{key.replace('_', '-')}")


def _parse_frames(value) -> list[int] | None:
    if value is None:
        return None
    if isinstance(value, list):
        return [int(v) for v in value]
    try:
        return [int(tok) for tok in str(value).split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad frame list {value!r}: {exc}") from exc


def _echo(cfg: dict) -> None:
    print("resolved-config " + json.dumps(cfg, sort_keys=True))


def cmd_gen(cfg: dict) -> int:
    _require(cfg, "out")
    seed = int(cfg["seed"])
    scene = make_scene(cfg["scene"], seed=seed)
    intrinsics = default_intrinsics(int(cfg["size"]))
    trajectory = make_trajectory(scene, intrinsics, int(cfg["frames"]), seed=seed)
    frames = []
    for tf in trajectory.frames:
        depth, intensity = render_ground_truth(scene, tf.pose, intrinsics)
        frames.append(
            FrameRecord(
                frame_id=tf.frame_id,
                pose=tf.pose,
                image=quantize_image(intensity),
                gt_depth=quantize_depth(depth),
            )
        )
    sim = SfmSimConfig(
        num_points=int(cfg["points"]),
        sigma_frac=float(cfg["sigma_frac"]),
        outlier_frac=float(cfg["outlier_frac"]),
        outlier_min_frac=float(cfg["outlier_min_frac"]),
        seed=seed,
    )
    points = simulate_sfm(scene, trajectory, sim)
    dataset = Dataset(
        intrinsics=intrinsics,
        frames=frames,
        points=points,
        subsequences=[trajectory.frame_ids()],
        meta={"scene": cfg["scene"], "seed": seed, "generator": "sfmdepth gen"},
    )
    manifest = write_dataset(dataset, cfg["out"])
    log.info("wrote %s (%d frames, %d points)", manifest, len(frames), len(points.points))
    return 0


def _build_train_model(cfg: dict, pairs) -> DepthNet | PixelLogDepthModel:
    if cfg["model"] == "depthnet":
        return DepthNet(
            DepthNetConfig(
                levels=int(cfg["levels"]),
                base_channels=int(cfg["base_channels"]),
                use_skips=bool(cfg["use_skips"]),
                seed=int(cfg["seed"]),
            )
        )
    if cfg["model"] == "pixel":
        h, w = pairs[0].intrinsics.height, pairs[0].intrinsics.width
        return PixelLogDepthModel(h, w, init_log_depth=float(cfg["init_log_depth"]))
    raise ModelConfigError(f"unknown model kind {cfg['model']!r}")


def cmd_train(cfg: dict) -> int:
    _require(cfg, "data", "out")
    dataset = read_dataset(cfg["data"])
    max_gap = cfg["max_gap"]
    pairs = training_pairs_from_dataset(
        dataset, PairingConfig(max_gap=None if max_gap is None else int(max_gap))
    )
    model = _build_train_model(cfg, pairs)
    config = TrainConfig(
        epochs=int(cfg["epochs"]),
        learning_rate=float(cfg["learning_rate"]),
        consistency_weight=float(cfg["consistency_weight"]),
        validation_fraction=float(cfg["validation_fraction"]),
        seed=int(cfg["seed"]),
        max_gap=None if max_gap is None else int(max_gap),
        noise_sigma=float(cfg["noise_sigma"]),
        threads=int(cfg["threads"]),
    )
    result = train(
        model, pairs, config, checkpoint_path=cfg["out"], resume=bool(cfg["resume"])
    )
    final = result.history[-1]
    log.info(
        "finished: %d epochs, train %.6g, val %s",
        final.epoch,
        final.train_loss,
        "n/a" if final.val_loss is None else f"{final.val_loss:.6g}",
    )
    return 0


def _predict_frames(checkpoint, dataset: Dataset, frame_ids: list[int]) -> dict[int, np.ndarray]:
    model = checkpoint["model"]
    out = {}
    for fid in frame_ids:
        record = dataset.frame(fid)
        tape = Tape()
        bound = model.bind(tape)
        out[fid] = bound.predict(record.image, fid).values
    return out


def cmd_predict(cfg: dict) -> int:
    _require(cfg, "checkpoint", "data", "out")
    dataset = read_dataset(cfg["data"])
    saved = load_checkpoint(cfg["checkpoint"])
    frame_ids = _parse_frames(cfg["frames"]) or dataset.frame_ids()
    predictions = _predict_frames(saved, dataset, frame_ids)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for fid, depth in predictions.items():
        write_pfm(out / f"depth_{fid:05d}.pfm", depth)
    log.info("wrote %d rasters to %s", len(predictions), out)
    return 0


def cmd_eval(cfg: dict) -> int:
    _require(cfg, "data")
    if (cfg["pred"] is None) == (cfg["checkpoint"] is None):
        raise ConfigError("eval needs exactly one of --pred or --checkpoint")
    dataset = read_dataset(cfg["data"])
    frame_ids = _parse_frames(cfg["frames"])
    if cfg["pred"] is not None:
        pred_dir = Path(cfg["pred"])
        if not pred_dir.is_dir():
            raise ManifestError(f"prediction directory not found: {pred_dir}")
        predictions = {}
        for path in sorted(pred_dir.glob("depth_*.pfm")):
            fid = int(path.stem.split("_")[1])
            predictions[fid] = read_pfm(path)
        if frame_ids is None:
            frame_ids = sorted(predictions)
        missing = [fid for fid in frame_ids if fid not in predictions]
        if missing:
            raise ManifestError(f"no predicted raster for frames {missing}")
    else:
        saved = load_checkpoint(cfg["checkpoint"])
        if frame_ids is None:
            frame_ids = dataset.frame_ids()
        predictions = _predict_frames(saved, dataset, frame_ids)
    report = evaluate_predictions(predictions, dataset, frame_ids)
    payload = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    print(payload)
    if cfg["report"]:
        Path(cfg["report"]).write_text(payload + "\n", encoding="utf-8")
    return 0


def cmd_export_ply(cfg: dict) -> int:
    _require(cfg, "depth", "data", "out")
    dataset = read_dataset(cfg["data"])
    depth = read_pfm(cfg["depth"])
    intensity = None
    if cfg["image"]:
        image = read_pgm(cfg["image"])
        intensity = image[depth > 0]
    cloud = depth_to_cloud(depth, dataset.intrinsics)
    write_ply(cfg["out"], cloud, intensity)
    log.info("wrote %d points to %s", len(cloud), cfg["out"])
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    results = run_all_checks(seed=int(cfg["seed"]))
    for result in results:
        print(result)
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed")
        return 4
    print(f"all {len(results)} checks passed")
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve(args)
        _echo(cfg)
        return args.func(cfg)
    except (ConfigError, ModelConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 4
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
