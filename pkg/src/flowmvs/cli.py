"""``flowmvs`` command line: synth, train, infer, fuse and eval subcommands.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
Relative output paths are resolved against ``$FLOWMVS_OUTPUT_ROOT`` when set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .coarse_depth import DepthMap, make_planes
from .config import Config, ConfigError, load_config, parse_config
from .evaluation import append_record, evaluate
from .fusion import FusionConfig, fuse, geometric_filter, photometric_filter
from .geometry import read_cam
from .io import read_mask, read_pfm, read_ply, write_pfm, write_ply
from .model import images_tensor
from .pointflow import RefinementSchedule
from .synth import dataset_specs, generate_scene, load_scene, select_views, write_scene
from .training import TrainingDiverged, load_checkpoint, save_checkpoint, set_reference_mode, train

logger = logging.getLogger("flowmvs")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
OUTPUT_ROOT_ENV = "FLOWMVS_OUTPUT_ROOT"


class DataError(RuntimeError):
    pass


def output_path(path: str | Path) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return p if p.is_absolute() or not root else Path(root) / p


def _manifest(command: str, args: argparse.Namespace, cfg: Config | None, inputs: dict, outputs: dict,
              started: float) -> dict:
    return {
        "command": command,
        "config_path": getattr(args, "config", None),
        "seed": None if cfg is None else cfg.seed,
        "config": None if cfg is None else cfg.to_dict(),
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        "seconds": round(time.time() - started, 3),
        "version": __version__,
        "torch": torch.__version__,
        "python": platform.python_version(),
    }


def write_manifest(path: Path, manifest: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _model_overrides(args: argparse.Namespace) -> dict:
    out = {}
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    if getattr(args, "mode", None):
        out["knn_mode"] = args.mode
    if getattr(args, "aggregation", None):
        out["aggregation"] = args.aggregation
    if getattr(args, "ablate_edgeconv", False):
        out["ablate_edgeconv"] = True
    if getattr(args, "single_level_features", False):
        out["single_level_features"] = True
    return out


def resolve_config(args: argparse.Namespace, base: Config | None = None) -> Config:
    if base is None:
        cfg = load_config(args.config)
    else:
        cfg = base
        if args.config:
            try:
                cfg = parse_config(Path(args.config).read_text(), base)
            except OSError as exc:
                raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    try:
        return cfg.replace(**_model_overrides(args))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _scene_dirs(data: Path) -> list[Path]:
    if (data / "scene.json").exists():
        return [data]
    dirs = sorted(p for p in data.iterdir() if (p / "scene.json").exists()) if data.is_dir() else []
    if not dirs:
        raise DataError(f"{data}: no scene directories found")
    return dirs


# -- commands -------------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    started = time.time()
    cfg = resolve_config(args)
    count = args.count if args.count is not None else cfg.num_scenes
    out = output_path(args.out)
    specs = dataset_specs(count, cfg.seed, cfg.scene_views, (cfg.image_width, cfg.image_height))
    for i, spec in enumerate(specs):
        write_scene(generate_scene(spec), out / f"scene_{i:03d}", cfg.planes_train)
        logger.info("scene %d/%d (%s) written", i + 1, count, spec.geometry)
    write_manifest(out / "manifest.json", _manifest("synth", args, cfg, {}, {"dataset": out}, started))
    print(f"wrote {count} scenes to {out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    started = time.time()
    cfg = resolve_config(args)
    if args.phase1_epochs is not None:
        cfg = cfg.replace(phase1_epochs=args.phase1_epochs)
    if args.phase2_epochs is not None:
        cfg = cfg.replace(phase2_epochs=args.phase2_epochs)
    if args.learning_rate is not None:
        cfg = cfg.replace(learning_rate=args.learning_rate)
    data = Path(args.data)
    scenes = [load_scene(d) for d in _scene_dirs(data)]
    out = output_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log = out.with_suffix(".log.jsonl")
    ckpt = train(scenes, cfg, log_path=log, checkpoint_path=out)
    save_checkpoint(out, ckpt)
    write_manifest(out.with_suffix(".manifest.json"),
                   _manifest("train", args, cfg, {"dataset": data}, {"checkpoint": out, "log": log}, started))
    print(f"checkpoint {out} (config hash {ckpt.config_hash}, {ckpt.epoch} epochs)")
    return EXIT_OK


def cmd_infer(args: argparse.Namespace) -> int:
    started = time.time()
    ckpt = load_checkpoint(args.checkpoint)
    stored = Config(**{k: tuple(v) if isinstance(v, list) else v for k, v in ckpt.config.items()})
    cfg = resolve_config(args, stored)
    if cfg.model_hash() != ckpt.config_hash:
        diff = {k: (ckpt.config.get(k), v) for k, v in cfg.model_dict().items() if ckpt.config.get(k) != v}
        raise ConfigError(f"configuration does not match checkpoint {args.checkpoint} "
                          f"(hash {cfg.model_hash()} vs {ckpt.config_hash}); differing keys "
                          f"(checkpoint, requested): {diff}")
    set_reference_mode(cfg.seed)
    model = ckpt.build_model()
    model.cfg = cfg
    l = len(cfg.eval_steps) if args.iterations is None else args.iterations
    if not 0 <= l <= len(cfg.eval_steps):
        raise ConfigError(f"--iterations must lie in [0, {len(cfg.eval_steps)}], got {l}")
    schedule = RefinementSchedule(cfg.eval_steps, cfg.eval_upsample).truncated(l)
    scene = load_scene(args.scene)
    n_views = args.views or min(cfg.num_views_eval, scene.num_views)
    roi = None
    if args.roi:
        roi = torch.as_tensor(read_mask(args.roi))
        if tuple(roi.shape) != scene.images.shape[1:3]:
            raise DataError(f"{args.roi}: ROI mask must be {scene.images.shape[1:3]}, got {tuple(roi.shape)}")
    refs = range(scene.num_views) if args.ref is None else [args.ref]
    out = output_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    planes = make_planes(*scene.depth_range, cfg.planes_eval)
    written = {}
    index = {"levels": l, "refs": [], "image_size": list(scene.views[0].image_size)}
    with torch.no_grad():
        for r in refs:
            if not 0 <= r < scene.num_views:
                raise DataError(f"reference view {r} out of range")
            idx = select_views(scene.views, r, n_views)
            pred = model(images_tensor(scene.images[idx]), [scene.views[i] for i in idx], planes, schedule,
                         roi_mask=roi)
            for i, (d, c) in enumerate(zip(pred.depths, pred.confidences)):
                vals = d.masked().detach().numpy()
                if not np.all(np.isfinite(vals)):
                    raise FloatingPointError(f"non-finite depth for view {r}, iteration {i}")
                write_pfm(out / f"{r:08d}_l{i}.pfm", vals.astype(np.float32))
                write_pfm(out / f"{r:08d}_l{i}_conf.pfm", c.detach().numpy().astype(np.float32))
            index["refs"].append(r)
            written[f"view_{r}"] = out / f"{r:08d}_l{l}.pfm"
    (out / "depths.json").write_text(json.dumps(index, indent=2))
    write_manifest(out / "manifest.json", _manifest(
        "infer", args, cfg, {"checkpoint": args.checkpoint, "scene": args.scene, "roi": args.roi}, written, started))
    print(f"wrote {l + 1} depth maps per view for {len(index['refs'])} views to {out}")
    return EXIT_OK


def load_depths(depth_dir: Path, scene_dir: Path) -> tuple[list[DepthMap], list, list, int]:
    """Final-iteration depth maps with coarse and final confidences, plus cameras."""
    try:
        index = json.loads((depth_dir / "depths.json").read_text())
    except FileNotFoundError as exc:
        raise DataError(f"{depth_dir}: missing depths.json (not an infer output)") from exc
    size = tuple(index["image_size"])
    l = index["levels"]
    depths, confs, views = [], [], []
    for r in index["refs"]:
        view, _ = read_cam(scene_dir / "cams" / f"{r:08d}_cam.txt", size)
        vals = read_pfm(depth_dir / f"{r:08d}_l{l}.pfm").astype(np.float64)
        c0 = read_pfm(depth_dir / f"{r:08d}_l0_conf.pfm").astype(np.float64)
        cl = read_pfm(depth_dir / f"{r:08d}_l{l}_conf.pfm").astype(np.float64)
        f = vals.shape[0] // c0.shape[0]
        c0 = np.repeat(np.repeat(c0, f, 0), f, 1)
        scale = vals.shape[1] / size[0]
        depths.append(DepthMap(torch.as_tensor(vals), torch.as_tensor(vals > 0), scale))
        confs.append((c0, cl))
        views.append(view)
    return depths, confs, views, l


def cmd_fuse(args: argparse.Namespace) -> int:
    started = time.time()
    cfg = resolve_config(args)
    fcfg = FusionConfig.from_config(cfg)
    depth_dir, scene_dir = Path(args.depths), Path(args.scene)
    depths, confs, views, l = load_depths(depth_dir, scene_dir)
    filtered = []
    for d, (c0, cl) in zip(depths, confs):
        d = photometric_filter(d, c0, fcfg.photometric_threshold_coarse)
        if l > 0:
            d = photometric_filter(d, cl, fcfg.photometric_threshold_flow)
        filtered.append(d)
    masks = geometric_filter(filtered, views, fcfg) if len(filtered) > 1 else None
    cloud = fuse(filtered, views, masks, fcfg)
    out = output_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ply(out, cloud.points, np.minimum(cloud.support, 255).astype(np.uint8))
    write_manifest(out.with_suffix(".manifest.json"), _manifest(
        "fuse", args, cfg, {"depths": depth_dir, "scene": scene_dir}, {"cloud": out}, started))
    print(f"fused {len(cloud)} points into {out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    started = time.time()
    cfg = resolve_config(args)
    threshold = cfg.fscore_threshold if args.threshold is None else args.threshold
    if not threshold > 0:
        raise ConfigError("--threshold must be positive")
    pred, _ = read_ply(args.pred)
    gt, _ = read_ply(args.gt)
    if len(pred) == 0 or len(gt) == 0:
        raise DataError("cannot evaluate an empty point cloud")
    metrics = evaluate(pred, gt, threshold, cfg.outlier_cap)
    print(metrics.table())
    print(metrics.record())
    outputs = {}
    if args.report:
        report = output_path(args.report)
        report.parent.mkdir(parents=True, exist_ok=True)
        append_record(report, metrics, pred=str(args.pred), gt=str(args.gt))
        outputs["report"] = report
        write_manifest(report.with_suffix(".manifest.json"), _manifest(
            "eval", args, cfg, {"pred": args.pred, "gt": args.gt}, outputs, started))
    return EXIT_OK


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowmvs", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"flowmvs {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file overriding the defaults")
        p.add_argument("--seed", type=int)
        return p

    def model_flags(p):
        p.add_argument("--mode", choices=("exhaustive", "windowed"), help="kNN search mode")
        p.add_argument("--aggregation", choices=("max", "avg"))
        p.add_argument("--ablate-edgeconv", action="store_true", help="aggregate h(C_q) only")
        p.add_argument("--single-level-features", action="store_true", help="coarsest pyramid level only")
        return p

    p = common(sub.add_parser("synth", help="generate a synthetic dataset"))
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.set_defaults(func=cmd_synth)

    p = model_flags(common(sub.add_parser("train", help="train a model")))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--phase1-epochs", type=int)
    p.add_argument("--phase2-epochs", type=int)
    p.add_argument("--learning-rate", type=float)
    p.set_defaults(func=cmd_train)

    p = model_flags(common(sub.add_parser("infer", help="predict depth maps")))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, help="flow iterations l")
    p.add_argument("--views", type=int, help="views per prediction, reference included")
    p.add_argument("--ref", type=int, help="single reference view (default: all)")
    p.add_argument("--roi", help="PNG mask restricting refinement")
    p.set_defaults(func=cmd_infer)

    p = common(sub.add_parser("fuse", help="filter and fuse depth maps into a PLY cloud"))
    p.add_argument("--depths", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = common(sub.add_parser("eval", help="compare a cloud against ground truth"))
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--threshold", type=float, help="f-score distance threshold (mm)")
    p.add_argument("--report", help="append a JSON record to this file")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, FileNotFoundError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
