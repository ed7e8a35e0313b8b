#!/usr/bin/env python3
"""
ArtiField command-line front-end.

Every command takes --config (JSON run configuration), repeated --set
key=value overrides, --seed and --out. Exit codes: 0 success, 1 runtime
error, 2 configuration error.
"""

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

from pydantic import ValidationError

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from backend.config import RenderConfig, RunConfig, configure_logging, load_run_config, save_run_config
from backend.core.errors import DivergenceError, ParseError
from backend.core.rendering import Camera
from backend.services.fitting_service import FittingService
from backend.services.mesh_service import CodeRequest, MeshService
from backend.services.storage_service import load_dataset
from backend.services.synthetic_service import SyntheticService
from backend.services.training_service import TrainingService

logger = logging.getLogger("artifield.cli")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


class ConfigError(Exception):
    """Bad configuration file or override."""


def _common(parser: argparse.ArgumentParser, out_help: str) -> None:
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a configuration value, e.g. --set train.steps=500 (repeatable)")
    parser.add_argument("--seed", type=int, help="Random seed (overrides the configuration)")
    parser.add_argument("--out", required=True, help=out_help)


def _code_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--subject", help="Use this subject's latent code (default: table mean)")
    parser.add_argument("--shape-subject", help="Take the shape code from this subject")
    parser.add_argument("--color-subject", help="Take the color code from this subject")
    parser.add_argument("--mix", type=float, help="Blend --subject into --mix-subject by this factor in [0, 1]")
    parser.add_argument("--mix-subject", help="Second subject for --mix")
    parser.add_argument("--report", help="Fit report supplying pose and latent code")
    parser.add_argument("--pose", help="Pose file (JSON) to use instead of the rest pose")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="artifield", description="Articulated implicit hand models")
    parser.add_argument("--log-level", help="Logging level (default from ARTIFIELD_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="Emit a synthetic capsule-rig dataset")
    _common(p, "Dataset directory")

    for name, text in (("train-prior", "Pre-train geometry on dataset scans"),
                       ("train", "Train every parameter on dataset images")):
        p = sub.add_parser(name, help=text)
        _common(p, "Run directory (checkpoint + train_log.jsonl)")
        p.add_argument("--dataset", required=True, help="Dataset directory")
        p.add_argument("--init", help="Checkpoint to start from (e.g. a prior)")

    p = sub.add_parser("fit-cloud", help="Fit pose and shape to a point cloud")
    _common(p, "Output directory for fit_report.json and loss_history.csv")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cloud", required=True, help="PLY point cloud")
    p.add_argument("--subject", help="Start from this subject's code instead of the mean")
    p.add_argument("--init-pose", help="Initial pose file (default: rest pose)")

    p = sub.add_parser("fit-images", help="Fit pose, shape and appearance to posed images")
    _common(p, "Output directory for fit_report.json and loss_history.csv")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--frame", required=True, help="Frame name, e.g. s00_p003")
    p.add_argument("--cameras", default="", help="Comma-separated camera names (default: all)")
    p.add_argument("--subject", help="Start from this subject's code instead of the mean")
    p.add_argument("--init-pose", help="Initial pose file (default: rest pose)")

    p = sub.add_parser("extract-mesh", help="Marching cubes on the zero level set")
    _common(p, "Output OBJ path")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--resolution", type=int, default=128)
    _code_options(p)

    p = sub.add_parser("render", help="Render a view of a trained model")
    _common(p, "Output prefix (<prefix>.png, <prefix>_depth.npy, <prefix>_opacity.npy)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--camera", required=True, help="Camera JSON file")
    p.add_argument("--mode", default="color", choices=["color", "normals", "weights"])
    _code_options(p)

    p = sub.add_parser("eval", help="Mesh distances and/or masked PSNR")
    _common(p, "Output JSON path")
    p.add_argument("--mesh", help="Reconstructed mesh (OBJ)")
    p.add_argument("--reference-mesh", help="Reference mesh (OBJ)")
    p.add_argument("--dataset", help="Dataset whose oracle provides the reference mesh")
    p.add_argument("--frame", help="Frame of --dataset")
    p.add_argument("--image", help="Rendered image (PNG)")
    p.add_argument("--reference-image", help="Reference image (PNG)")
    p.add_argument("--mask", help="Mask (PNG) restricting the PSNR")
    p.add_argument("--resolution", type=int, default=128, help="Oracle mesh resolution")
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    overrides: List[str] = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    try:
        config = load_run_config(args.config, overrides)
    except (ValidationError, ValueError, FileNotFoundError) as e:
        raise ConfigError(str(e)) from e
    if not sys.stderr.isatty():
        config.train.progress = False
        config.fit.progress = False
    return config


def _code_request(args: argparse.Namespace) -> CodeRequest:
    return CodeRequest(args.subject, args.shape_subject, args.color_subject, args.mix,
                       args.mix_subject, args.report, args.pose)


def _render_config(service: MeshService, args: argparse.Namespace) -> RenderConfig:
    """Checkpoint render settings, replaced by --config and overridden by --set."""
    # a missing or corrupt checkpoint is a runtime error, not a configuration one
    service.load(args.checkpoint)
    try:
        return service.render_config(args.checkpoint, args.config, args.overrides)
    except (ValidationError, ValueError) as e:
        raise ConfigError(str(e)) from e


def run(args: argparse.Namespace) -> int:
    config = load_config(args)
    command = args.command

    if command == "gen-synthetic":
        manifest = SyntheticService().emit_dataset(args.out, config.synthetic, config.seed,
                                                   progress=config.train.progress)
        print(f"✅ Dataset written to {args.out}: {manifest['frame_count']} views, "
              f"{manifest['scan_count']} scans")
    elif command in ("train-prior", "train"):
        dataset = load_dataset(args.dataset)
        service = TrainingService()
        method = service.train_prior if command == "train-prior" else service.train_full
        save_run_config(config, os.path.join(args.out, "config.json"))
        result = method(dataset, config, args.out, args.init)
        print(f"✅ Checkpoint written to {result.checkpoint}")
        print(json.dumps(result.final_terms, indent=2, sort_keys=True))
    elif command == "fit-cloud":
        report = FittingService(config.render, config.losses).run_cloud_fit(
            args.checkpoint, args.cloud, args.out, config.fit, args.subject, args.init_pose, config.seed)
        print(f"✅ Cloud fit: {report.iterations} iterations, final {report.final_terms}")
    elif command == "fit-images":
        cameras = [c for c in args.cameras.split(",") if c]
        report = FittingService(config.render, config.losses).run_image_fit(
            args.checkpoint, load_dataset(args.dataset), args.frame, cameras, args.out, config.fit,
            args.subject, args.init_pose, config.seed)
        print(f"✅ Image fit: {report.iterations} iterations, final {report.final_terms}")
        if report.skipped_joints:
            print(f"⚠️  {report.skipped_joints} joint(s) behind a camera were ignored")
    elif command == "extract-mesh":
        service = MeshService()
        render_config = _render_config(service, args)
        summary = service.extract(args.checkpoint, args.out, _code_request(args), args.resolution,
                                  config=render_config)
        marker = "⚠️ " if summary["empty"] else "✅"
        print(f"{marker} Mesh written to {args.out}: {summary['vertices']} vertices, {summary['faces']} faces")
    elif command == "render":
        service = MeshService()
        render_config = _render_config(service, args)
        summary = service.render(args.checkpoint, Camera.load(args.camera), args.out, _code_request(args),
                                 args.mode, config=render_config, seed=args.seed)
        print(f"✅ Render written to {summary['image']}")
    elif command == "eval":
        dataset = load_dataset(args.dataset) if args.dataset else None
        result = MeshService().evaluate(args.mesh, args.reference_mesh, dataset, args.frame, args.image,
                                        args.reference_image, args.mask, args.resolution, args.out)
        print(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        return run(args)
    except ConfigError as e:
        print(f"❌ Configuration error: {e}")
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"❌ Optimization diverged at step {e.step}: {e.terms}")
        return EXIT_RUNTIME
    except (ParseError, FileNotFoundError, ValueError, KeyError) as e:
        print(f"❌ {type(e).__name__}: {e}")
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception("Unexpected failure")
        print(f"❌ {command_label(args)} failed: {e}")
        return EXIT_RUNTIME


def command_label(args: argparse.Namespace) -> str:
    return getattr(args, "command", "command")


if __name__ == "__main__":
    sys.exit(main())
