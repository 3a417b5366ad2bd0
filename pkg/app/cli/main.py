"""
maldnerf command-line interface.

Every command prints one JSON response envelope on completion and exits with
0 on success, 2 on configuration errors and 3 on any other failure.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import pydantic
import torch

from app import __version__
from app.config.logger import Logger
from app.config.settings import settings
from app.schemas.base import ErrorResponseSchema, SuccessResponseSchema
from app.schemas.pipeline import PipelineConfig
from app.schemas.scene import SceneSpec
from app.services import pipeline
from app.services.dataset_store import load_dataset, save_dataset
from app.services.errors import ConfigError, MaldNerfError
from app.services.eval_metrics import evaluate
from app.services.scene_forge import synthesize_scene
from app.services.trainer import train

logger = Logger.get_logger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_FAILURE = 0, 2, 3


def _config(args: argparse.Namespace, flags: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    """Config file, then `--set` overrides, then command flags that map onto config keys."""
    overrides = list(args.set or ())
    overrides += [f"{key}={value}" for key, value in (flags or {}).items() if value is not None]
    return pipeline.load_pipeline_config(args.config, overrides)


def _artifact_dir(path: Path) -> Path:
    # priors and checkpoints are directories; a file inside one names its directory
    return path.parent if path.is_file() else path


def cmd_synth(args: argparse.Namespace) -> Dict[str, Any]:
    config = _config(args)
    flags = {
        "seed": args.seed,
        "n_train": args.views,
        "n_test": args.test_views,
        "resolution": args.res,
        "n_objects": args.objects,
    }
    overrides = {key: value for key, value in flags.items() if value is not None}
    scene = SceneSpec.model_validate({**config.scene.model_dump(), **overrides})
    dataset = synthesize_scene(scene)
    save_dataset(dataset, args.out)
    return {
        "dataset": str(args.out),
        "train_views": len(dataset.train_images()),
        "test_views": len(dataset.test_images()),
    }


def cmd_train_prior(args: argparse.Namespace) -> Dict[str, Any]:
    config = _config(args, {"prior.steps": args.steps})
    inputs = {}
    if config.prior.kind == "diffusion":
        if args.dataset is None:
            raise ConfigError("a diffusion prior trains on a synthesized dataset; pass --dataset")
        _require_dataset_layout(args.dataset)
        inputs["synth"] = args.dataset.parent
    args.out.mkdir(parents=True, exist_ok=True)
    pipeline.STAGE_RUNNERS["prior"](config, inputs, args.out)
    return {"prior": str(args.out), "kind": config.prior.kind}


def cmd_customize(args: argparse.Namespace) -> Dict[str, Any]:
    config = _config(args, {"customize.rank": args.rank, "customize.steps": args.steps})
    _require_dataset_layout(args.dataset)
    args.out.mkdir(parents=True, exist_ok=True)
    inputs = {"synth": args.dataset.parent, "prior": _artifact_dir(args.prior)}
    pipeline.STAGE_RUNNERS["customize"](config, inputs, args.out)
    return {"prior": str(args.out), "token": config.customize.token, "rank": config.customize.rank}


def cmd_train(args: argparse.Namespace) -> Dict[str, Any]:
    config = _config(args)
    condition = args.condition or pipeline.training_condition(config)
    train_config = config.train.model_copy(update={"condition": condition})
    inpainter = pipeline.build_inpainter(_artifact_dir(args.prior), condition)
    resume = _artifact_dir(args.resume) if args.resume is not None else None
    result = train(train_config, load_dataset(args.dataset), inpainter, args.out, resume_from=resume)
    return {
        "out": str(args.out),
        "iteration": result.state.iteration,
        "dataset_revision": result.state.dataset_revision,
        "checkpoint": result.state.checkpoint_id,
    }


def cmd_evaluate(args: argparse.Namespace) -> Dict[str, Any]:
    config = _config(args)
    report = evaluate(_artifact_dir(args.checkpoint), load_dataset(args.dataset), config.eval)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(report.model_dump_json(indent=2), encoding="utf-8")
    return report.model_dump(mode="json")


def cmd_report(args: argparse.Namespace) -> Dict[str, Any]:
    table = pipeline.report(args.runs, args.out)
    return {"out": str(args.out), "runs": list(table.index)}


def cmd_ablate(args: argparse.Namespace) -> Dict[str, Any]:
    config = _config(args)
    toggles = [t.strip() for t in (args.toggles or "").split(",") if t.strip()]
    table = pipeline.ablate(config, toggles, args.runs, cache_dir=args.cache)
    return {"runs": str(args.runs), "variants": list(table.index)}


def cmd_run(args: argparse.Namespace) -> Dict[str, Any]:
    if args.manifest is not None:
        manifest = pipeline.rerun(pipeline.read_manifest(args.manifest), cache_dir=args.cache, run_dir=args.run_dir)
    else:
        manifest = pipeline.run_pipeline(
            _config(args), cache_dir=args.cache, run_dir=args.run_dir, stop_after=args.stop_after
        )
    return manifest.model_dump(mode="json")


def _require_dataset_layout(dataset_dir: Path) -> None:
    # stage runners read `<stage dir>/dataset`
    if dataset_dir.name != pipeline.DATASET_DIR:
        raise ConfigError(
            f"--dataset must point at a '{pipeline.DATASET_DIR}' directory, got {dataset_dir}",
            dataset=str(dataset_dir),
        )


def _add_config_args(parser: argparse.ArgumentParser, default=None) -> None:
    parser.add_argument("--config", type=Path, default=default, help="Flat key = value config file")
    parser.add_argument(
        "--set", action="append", default=default, metavar="KEY=VALUE", help="Override one config key"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maldnerf", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--version", action="version", version=f"maldnerf {__version__}")
    parser.add_argument(
        "--print-config", action="store_true", help="Print the resolved config with provenance tags and exit"
    )
    _add_config_args(parser)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="Synthesize a procedural desk scene")
    _add_config_args(p, argparse.SUPPRESS)
    p.add_argument("--seed", type=int)
    p.add_argument("--views", type=int, help="Train views")
    p.add_argument("--test-views", type=int)
    p.add_argument("--res", type=int, help="Square resolution in pixels")
    p.add_argument("--objects", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("train-prior", help="Build the oracle or train the diffusion inpainting prior")
    _add_config_args(p, argparse.SUPPRESS)
    p.add_argument(
        "--dataset", "--data", dest="dataset", type=Path, help="Synthesized dataset directory (diffusion prior only)"
    )
    p.add_argument("--steps", type=int, help="Denoiser training steps (prior.steps)")
    p.add_argument("--out", type=Path, required=True, help="Prior directory")
    p.set_defaults(handler=cmd_train_prior)

    p = sub.add_parser("customize", help="Per-scene low-rank customization of a diffusion prior")
    _add_config_args(p, argparse.SUPPRESS)
    p.add_argument("--dataset", "--scene", "--data", dest="dataset", type=Path, required=True)
    p.add_argument("--prior", type=Path, required=True, help="Prior directory from train-prior, or a file in it")
    p.add_argument("--rank", type=int, help="Adapter rank (customize.rank)")
    p.add_argument("--steps", type=int, help="Customization steps (customize.steps)")
    p.add_argument("--out", type=Path, required=True, help="Customized prior directory")
    p.set_defaults(handler=cmd_customize)

    p = sub.add_parser("train", help="Train the radiance field")
    _add_config_args(p, argparse.SUPPRESS)
    p.add_argument("--dataset", "--data", dest="dataset", type=Path, required=True)
    p.add_argument("--prior", type=Path, required=True, help="Prior directory, or a file in it")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--condition", help="Conditioning token (default: customization token or 'inpaint')")
    p.add_argument("--resume", type=Path, help="Checkpoint directory to resume from")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("evaluate", help="Score a checkpoint on the test views")
    _add_config_args(p, argparse.SUPPRESS)
    p.add_argument(
        "--checkpoint",
        "--ckpt",
        dest="checkpoint",
        type=Path,
        required=True,
        help="Checkpoint directory, or a file in it",
    )
    p.add_argument("--dataset", "--data", dest="dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, help="Where to write report.json")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("report", help="Compare run reports")
    p.add_argument("--runs", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="Markdown output; the plot goes next to it as .svg")
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser("ablate", help="Run the ablation grid over the given toggles")
    _add_config_args(p, argparse.SUPPRESS)
    p.add_argument("--toggles", default="", help=f"Comma separated: {', '.join(pipeline.ABLATION_TOGGLES)}")
    p.add_argument("--runs", type=Path, required=True)
    p.add_argument("--cache", type=Path, default=None)
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("run", help="Run the full cached pipeline")
    _add_config_args(p, argparse.SUPPRESS)
    p.add_argument("--run-dir", type=Path, default=None)
    p.add_argument("--cache", type=Path, default=None)
    p.add_argument("--manifest", type=Path, default=None, help="Re-run from a manifest.json instead of --config")
    p.add_argument("--stop-after", choices=pipeline.STAGES, default=None)
    p.set_defaults(handler=cmd_run)
    return parser


def _emit(response: pydantic.BaseModel) -> None:
    print(response.model_dump_json())


def _fail(command: str, error: MaldNerfError) -> None:
    _emit(ErrorResponseSchema(command=command, error=error.code, message=error.message, details=error.details or None))


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, dispatch the command and map errors to exit codes."""
    Logger.setup_root_logger()
    if settings.num_threads:
        torch.set_num_threads(settings.num_threads)
    parser = build_parser()
    args = parser.parse_args(argv)
    command = args.command or "print-config"
    try:
        if args.print_config:
            print(pipeline.print_config(_config(args)))
            return EXIT_OK
        if args.command is None:
            parser.print_help()
            return EXIT_CONFIG
        handler: Callable[[argparse.Namespace], Dict[str, Any]] = args.handler
        data = handler(args)
    except ConfigError as e:
        _fail(command, e)
        return EXIT_CONFIG
    except pydantic.ValidationError as e:
        logger.error(f"Invalid input for {command}: {e}")
        _emit(
            ErrorResponseSchema(
                command=command, error="config_error", message=str(e), details=json.loads(e.json())
            )
        )
        return EXIT_CONFIG
    except MaldNerfError as e:
        _fail(command, e)
        return EXIT_FAILURE
    except Exception as e:
        logger.error(f"Command {command} failed: {e}")
        _emit(ErrorResponseSchema(command=command, error="internal_error", message=str(e)))
        return EXIT_FAILURE

    _emit(SuccessResponseSchema[Dict[str, Any]](command=command, data=data))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
