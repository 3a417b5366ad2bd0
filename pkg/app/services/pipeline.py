"""
Stage runner: synth -> prior -> customize -> train -> evaluate, with a
content-addressed artifact cache, the ablation grid and run reports.
"""

import hashlib
import itertools
import json
import shutil
import time
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import pydantic
import scipy
import torch
from matplotlib.figure import Figure

from app import __version__
from app.config.flat_config import dump_flat_config, load_flat_config, nest, parse_flat_config
from app.config.logger import Logger
from app.config.settings import settings
from app.models.prior import LatentInpaintPrior
from app.schemas.metrics import MetricReport
from app.schemas.pipeline import PipelineConfig, RunManifest, StageRecord
from app.schemas.prior import OracleConfig
from app.schemas.training import IterationRecord, TrainConfig
from app.services.dataset_store import load_dataset, save_dataset
from app.services.errors import ConfigError, MaldNerfError, StageFailedError
from app.services.eval_metrics import evaluate
from app.services.inpaint_prior import (
    DiffusionInpainter,
    OracleInpainter,
    customize,
    load_prior,
    save_prior,
    train_prior,
)
from app.services.scene_forge import synthesize_scene
from app.services.trainer import METRICS_FILE, Inpainter, train

logger = Logger.get_logger(__name__)

STAGES = ("synth", "prior", "customize", "train", "evaluate")
COMPLETE_MARKER = "_complete.json"
DATASET_DIR = "dataset"
PRIOR_FILE = "prior.bin"
ORACLE_FILE = "oracle.json"
REPORT_FILE = "report.json"
MANIFEST_FILE = "manifest.json"

# toggle name -> flat override applied to the full-method config
ABLATION_TOGGLES: Dict[str, Callable[[PipelineConfig], PipelineConfig]] = {
    "adv_masking": lambda c: c.model_copy(
        update={"train": c.train.model_copy(update={"adv_real": "unmasked"})}
    ),
    "feature_matching": lambda c: c.model_copy(update={"train": c.train.model_copy(update={"lambda_fm": 0.0})}),
    "customization": lambda c: c.model_copy(update={"customize": c.customize.model_copy(update={"enabled": False})}),
    "add_pixel_loss_in_mask": lambda c: c.model_copy(
        update={"train": c.train.model_copy(update={"lambda_pix_mask": 1.0})}
    ),
    "add_perceptual_loss_in_mask": lambda c: c.model_copy(
        update={"train": c.train.model_copy(update={"lambda_perc_mask": 1.0})}
    ),
    "oracle_vs_diffusion": lambda c: c.model_copy(
        update={
            "prior": c.prior.model_copy(update={"kind": "diffusion" if c.prior.kind == "oracle" else "oracle"})
        }
    ),
}

# table row labels for the single-toggle variants
ABLATION_LABELS = {
    "adv_masking": "- adv masking",
    "feature_matching": "- feature matching",
    "customization": "- per-scene customization",
    "add_pixel_loss_in_mask": "+ pixel loss in mask",
    "add_perceptual_loss_in_mask": "+ perceptual loss in mask",
    "oracle_vs_diffusion": "swap prior kind",
}

TABLE_COLUMNS = ["psnr_masked", "m_pproxy", "pproxy", "fid_proxy", "kid_proxy", "cfid_proxy", "ckid_proxy", "fvd_proxy", "seam"]


def pipeline_config_from_flat(values: Dict[str, str], source: str = "<config>") -> PipelineConfig:
    """
    Validate flat values into a `PipelineConfig`.

    Dotted keys address sections (`train.K`, `prior.kind`); a file without any
    dotted key is read as a bare train config.
    """
    if values and not any("." in key for key in values):
        values = {f"train.{key}": value for key, value in values.items()}
    try:
        return PipelineConfig.model_validate(nest(values))
    except pydantic.ValidationError as e:
        errors = [f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()]
        logger.error(f"Invalid config {source}: {'; '.join(errors)}")
        raise ConfigError(f"Invalid config {source}: {'; '.join(errors)}", source=source, errors=errors)


def load_pipeline_config(path: Optional[Path] = None, overrides: Sequence[str] = ()) -> PipelineConfig:
    """Defaults, then the flat file at `path`, then `key=value` overrides."""
    values: Dict[str, str] = load_flat_config(path) if path is not None else {}
    if overrides:
        values.update(parse_flat_config("\n".join(overrides), source="--set"))
    return pipeline_config_from_flat(values, source=str(path) if path else "<defaults>")


def print_config(config: PipelineConfig) -> str:
    """Flat rendering of the resolved config; train keys carry their provenance tag."""
    tags = TrainConfig.provenance()
    lines = []
    for line in dump_flat_config(config.model_dump(mode="json")).splitlines():
        key = line.split("=", 1)[0].strip()
        section, _, name = key.partition(".")
        tag = tags.get(name.split(".", 1)[0]) if section == "train" else None
        lines.append(f"{line}  # {tag}" if tag else line)
    return "\n".join(lines)


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)


def stage_key(name: str, section, upstream_keys: Sequence[str], version: str = __version__) -> str:
    """sha256 over stage name, canonical config section, upstream keys and code version."""
    payload = canonical_json({"stage": name, "config": section, "upstream": list(upstream_keys), "version": version})
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def directory_digest(path: Path) -> str:
    """sha256 over relative file names and contents, marker excluded."""
    path = Path(path)
    digest = hashlib.sha256()
    for file in sorted(p for p in path.rglob("*") if p.is_file() and p.name != COMPLETE_MARKER):
        digest.update(file.relative_to(path).as_posix().encode("utf-8"))
        digest.update(b"\0")
        digest.update(file.read_bytes())
    return digest.hexdigest()


def _cached_digest(output_dir: Path) -> Optional[str]:
    marker = output_dir / COMPLETE_MARKER
    if not marker.is_file():
        return None
    try:
        recorded = json.loads(marker.read_text(encoding="utf-8"))["output_digest"]
    except (ValueError, KeyError):
        return None
    if directory_digest(output_dir) != recorded:
        logger.warning(f"Cached output {output_dir} changed on disk; recomputing")
        return None
    return recorded


def _stage_sections(config: PipelineConfig) -> Dict[str, dict]:
    if config.prior.kind == "oracle":
        prior_section = config.prior.model_dump(mode="json", include={"kind", "sigma_incon", "shift"})
        customize_section = {"enabled": False}
    else:
        prior_section = config.prior.model_dump(mode="json", exclude={"sigma_incon", "shift"})
        customize_section = config.customize.model_dump(mode="json")
    return {
        "synth": config.scene.model_dump(mode="json"),
        "prior": prior_section,
        "customize": customize_section,
        "train": config.train.model_dump(mode="json"),
        "evaluate": config.eval.model_dump(mode="json"),
    }


def _stage_upstream(config: PipelineConfig) -> Dict[str, Tuple[str, ...]]:
    prior_source = "customize" if _customizes(config) else "prior"
    return {
        "synth": (),
        "prior": ("synth",) if config.prior.kind == "diffusion" else (),
        "customize": ("synth", "prior"),
        "train": ("synth", prior_source),
        "evaluate": ("synth", "train"),
    }


def _customizes(config: PipelineConfig) -> bool:
    return config.prior.kind == "diffusion" and config.customize.enabled


def training_condition(config: PipelineConfig) -> str:
    return config.customize.token if _customizes(config) else "inpaint"


def build_inpainter(prior_dir: Path, condition: str = "inpaint") -> Inpainter:
    """Inpainter for a `prior` or `customize` stage output directory."""
    prior_dir = Path(prior_dir)
    if (prior_dir / ORACLE_FILE).is_file():
        oracle = OracleConfig.model_validate_json((prior_dir / ORACLE_FILE).read_text(encoding="utf-8"))
        return OracleInpainter(sigma_incon=oracle.sigma_incon, shift=oracle.shift, condition=condition)
    if (prior_dir / PRIOR_FILE).is_file():
        return DiffusionInpainter(load_prior(prior_dir / PRIOR_FILE), condition=condition)
    raise ConfigError(f"{prior_dir} holds neither {ORACLE_FILE} nor {PRIOR_FILE}", path=str(prior_dir))


def latest_checkpoint(train_dir: Path) -> Path:
    train_dir = Path(train_dir)
    pointer = train_dir / "latest"
    if not pointer.is_file():
        raise StageFailedError(f"no finished training run in {train_dir}", stage="train")
    return train_dir / "checkpoints" / pointer.read_text(encoding="utf-8").strip()


# stage bodies: (config, upstream output dirs, output dir) -> None
def _run_synth(config: PipelineConfig, inputs: Dict[str, Path], out: Path) -> None:
    save_dataset(synthesize_scene(config.scene), out / DATASET_DIR)


def _run_prior(config: PipelineConfig, inputs: Dict[str, Path], out: Path) -> None:
    section = config.prior
    if section.kind == "oracle":
        oracle = OracleConfig(sigma_incon=section.sigma_incon, shift=section.shift)
        (out / ORACLE_FILE).write_text(oracle.model_dump_json(indent=2), encoding="utf-8")
        return
    torch.manual_seed(section.seed)
    dataset = load_dataset(inputs["synth"] / DATASET_DIR)
    views = dataset.train_images()
    prior = LatentInpaintPrior(section.network)
    history = train_prior(
        prior,
        section.steps,
        seed=section.seed,
        images=[v.pixels for v in views],
        object_masks=[v.mask for v in views],
        size=config.scene.resolution,
        batch_size=section.batch_size,
        autoencoder_steps=section.autoencoder_steps,
        lr=section.lr,
    )
    save_prior(prior, out / PRIOR_FILE)
    (out / "history.json").write_text(canonical_json(history), encoding="utf-8")


def _run_customize(config: PipelineConfig, inputs: Dict[str, Path], out: Path) -> None:
    section = config.customize
    dataset = load_dataset(inputs["synth"] / DATASET_DIR)
    prior = load_prior(inputs["prior"] / PRIOR_FILE)
    tuned = customize(
        prior, dataset, rank=section.rank, steps=section.steps, seed=section.seed, token=section.token, lr=section.lr
    )
    save_prior(tuned, out / PRIOR_FILE)


def _run_train(config: PipelineConfig, inputs: Dict[str, Path], out: Path) -> None:
    prior_dir = inputs.get("customize", inputs.get("prior"))
    condition = training_condition(config)
    train_config = config.train.model_copy(update={"condition": condition})
    dataset = load_dataset(inputs["synth"] / DATASET_DIR)
    train(train_config, dataset, build_inpainter(prior_dir, condition), out)


def _run_evaluate(config: PipelineConfig, inputs: Dict[str, Path], out: Path) -> None:
    dataset = load_dataset(inputs["synth"] / DATASET_DIR)
    report = evaluate(latest_checkpoint(inputs["train"]), dataset, config.eval)
    report.tags["prior"] = config.prior.kind
    report.tags["customized"] = str(_customizes(config)).lower()
    report.tags["adv_real"] = config.train.adv_real
    (out / REPORT_FILE).write_text(report.model_dump_json(indent=2), encoding="utf-8")


STAGE_RUNNERS: Dict[str, Callable[[PipelineConfig, Dict[str, Path], Path], None]] = {
    "synth": _run_synth,
    "prior": _run_prior,
    "customize": _run_customize,
    "train": _run_train,
    "evaluate": _run_evaluate,
}


def _versions() -> Dict[str, str]:
    return {
        "maldnerf": __version__,
        "torch": torch.__version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pydantic": pydantic.__version__,
    }


def run_pipeline(
    config: PipelineConfig,
    cache_dir: Optional[Path] = None,
    run_dir: Optional[Path] = None,
    stop_after: Optional[str] = None,
) -> RunManifest:
    """
    Run every stage in order, reusing cached outputs.

    A stage is a cache hit when its output directory holds a completion
    marker whose digest still matches the directory and no upstream stage
    executed in this run. With `run_dir`, the manifest, the metric report and
    the training metric log are copied there.
    """
    cache_dir = Path(cache_dir or settings.cache_dir)
    if stop_after is not None and stop_after not in STAGES:
        raise ConfigError(f"Unknown stage '{stop_after}'; valid stages: {', '.join(STAGES)}", stage=stop_after)
    sections = _stage_sections(config)
    upstream = _stage_upstream(config)
    manifest = RunManifest(
        config=config.model_dump(mode="json"),
        seeds={
            "scene": config.scene.seed,
            "prior": config.prior.seed,
            "customize": config.customize.seed,
            "train": config.train.seed,
            "eval": config.eval.extractor_seed,
        },
        versions=_versions(),
    )
    keys: Dict[str, str] = {}
    outputs: Dict[str, Path] = {}
    executed: set = set()

    for name in STAGES:
        if name == "customize" and not _customizes(config):
            continue
        deps = upstream[name]
        key = stage_key(name, sections[name], [keys[d] for d in deps])
        output_dir = cache_dir / name / key[:16]
        digest = None if executed.intersection(deps) else _cached_digest(output_dir)
        started = time.perf_counter()
        cached = digest is not None
        if cached:
            logger.info(f"Stage {name}: cache hit {output_dir}")
        else:
            logger.info(f"Stage {name}: running into {output_dir}")
            if output_dir.exists():
                shutil.rmtree(output_dir)
            output_dir.mkdir(parents=True)
            try:
                STAGE_RUNNERS[name](config, {d: outputs[d] for d in deps}, output_dir)
            except MaldNerfError as e:
                logger.error(f"Stage {name} failed: {e.message}")
                raise StageFailedError(f"stage '{name}' failed: {e.message}", stage=name, cause=e.to_dict())
            except Exception as e:
                logger.error(f"Stage {name} failed: {e}")
                raise StageFailedError(f"stage '{name}' failed: {e}", stage=name, cause=repr(e))
            digest = directory_digest(output_dir)
            (output_dir / COMPLETE_MARKER).write_text(
                canonical_json({"stage": name, "key": key, "output_digest": digest}), encoding="utf-8"
            )
            executed.add(name)
        keys[name] = key
        outputs[name] = output_dir
        manifest.stages.append(
            StageRecord(
                name=name,
                key=key,
                inputs={d: manifest.stage(d).output_digest for d in deps},
                output_dir=str(output_dir),
                output_digest=digest,
                cached=cached,
                seconds=round(time.perf_counter() - started, 3),
            )
        )
        if name == stop_after:
            break

    if run_dir is not None:
        _write_run_dir(Path(run_dir), manifest, outputs)
    logger.info(f"Pipeline done: {len(executed)} stage(s) executed, {len(manifest.stages) - len(executed)} cached")
    return manifest


def _write_run_dir(run_dir: Path, manifest: RunManifest, outputs: Dict[str, Path]) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / MANIFEST_FILE).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    if "evaluate" in outputs:
        shutil.copyfile(outputs["evaluate"] / REPORT_FILE, run_dir / REPORT_FILE)
    if "train" in outputs:
        shutil.copyfile(outputs["train"] / METRICS_FILE, run_dir / METRICS_FILE)


def read_manifest(path: Path) -> RunManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_FILE
    if not path.is_file():
        raise ConfigError(f"Run manifest not found: {path}", path=str(path))
    return RunManifest.model_validate_json(path.read_text(encoding="utf-8"))


def rerun(manifest: RunManifest, cache_dir: Optional[Path] = None, run_dir: Optional[Path] = None) -> RunManifest:
    """Re-run the pipeline from a manifest's config snapshot."""
    return run_pipeline(PipelineConfig.model_validate(manifest.config), cache_dir=cache_dir, run_dir=run_dir)


# ablation
def _check_toggles(config: PipelineConfig, toggles: Iterable[str]) -> List[str]:
    toggles = list(dict.fromkeys(toggles))
    unknown = [t for t in toggles if t not in ABLATION_TOGGLES]
    if unknown:
        raise ConfigError(
            f"Unknown ablation toggle(s) {', '.join(unknown)}; valid names: {', '.join(ABLATION_TOGGLES)}",
            unknown=unknown,
            valid=list(ABLATION_TOGGLES),
        )
    if "customization" in toggles and not _customizes(config):
        message = (
            "Ablation toggle customization has no effect without a customized diffusion prior "
            "(prior.kind = diffusion, customize.enabled = true)"
        )
        logger.error(message)
        raise ConfigError(
            message, toggle="customization", prior_kind=config.prior.kind, enabled=config.customize.enabled
        )
    return toggles


def ablation_grid(config: PipelineConfig, toggles: Iterable[str]) -> List[Tuple[str, Tuple[str, ...], PipelineConfig]]:
    """(label, applied toggles, config) for every subset of `toggles`, full method first."""
    toggles = _check_toggles(config, toggles)
    grid = []
    for flags in itertools.product((False, True), repeat=len(toggles)):
        applied = tuple(t for t, on in zip(toggles, flags) if on)
        variant = config
        for toggle in applied:
            variant = ABLATION_TOGGLES[toggle](variant)
        label = "full method" if not applied else ", ".join(ABLATION_LABELS[t] for t in applied)
        grid.append((label, applied, variant))
    return grid


def _run_name(applied: Sequence[str]) -> str:
    return "full" if not applied else "+".join(applied)


def ablate(
    config: PipelineConfig,
    toggles: Iterable[str],
    runs_dir: Path,
    cache_dir: Optional[Path] = None,
) -> pd.DataFrame:
    """Run the 2^n toggle grid and write `ablation.md` with one row per run."""
    runs_dir = Path(runs_dir)
    rows = []
    for label, applied, variant in ablation_grid(config, toggles):
        logger.info(f"Ablation run '{label}'")
        run_pipeline(variant, cache_dir=cache_dir, run_dir=runs_dir / _run_name(applied))
        report = MetricReport.model_validate_json((runs_dir / _run_name(applied) / REPORT_FILE).read_text("utf-8"))
        rows.append({"variant": label, **report.values.model_dump()})
    table = pd.DataFrame(rows).set_index("variant")
    (runs_dir / "ablation.md").write_text(markdown_table(table), encoding="utf-8")
    return table


# reporting
def _format_cell(value) -> str:
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return "-"
    if isinstance(value, float):
        return f"{value:.4g}"
    return str(value)


def markdown_table(table: pd.DataFrame) -> str:
    columns = [c for c in TABLE_COLUMNS if c in table.columns]
    header = [table.index.name or "run"] + columns
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    for index, row in table[columns].iterrows():
        lines.append("| " + " | ".join([str(index)] + [_format_cell(row[c]) for c in columns]) + " |")
    return "\n".join(lines) + "\n"


def collect_reports(runs_dir: Path) -> pd.DataFrame:
    rows = []
    for path in sorted(Path(runs_dir).glob(f"*/{REPORT_FILE}")):
        report = MetricReport.model_validate_json(path.read_text(encoding="utf-8"))
        rows.append({"run": path.parent.name, **report.values.model_dump()})
    if not rows:
        raise ConfigError(f"No {REPORT_FILE} files under {runs_dir}", path=str(runs_dir))
    return pd.DataFrame(rows).set_index("run")


def read_metrics(path: Path) -> pd.DataFrame:
    """Training metric log as a frame indexed by iteration, one column per loss."""
    records = [
        IterationRecord.model_validate_json(line)
        for line in Path(path).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    frame = pd.DataFrame([{"iteration": r.iteration, **r.losses} for r in records])
    return frame.set_index("iteration") if not frame.empty else frame


def plot_losses(runs_dir: Path, out: Path, terms: Sequence[str] = ("pix", "adv", "disc_total")) -> Optional[Path]:
    logs = {p.parent.name: read_metrics(p) for p in sorted(Path(runs_dir).glob(f"*/{METRICS_FILE}"))}
    logs = {name: frame for name, frame in logs.items() if not frame.empty}
    if not logs:
        logger.warning(f"No training metric logs under {runs_dir}; skipping plot")
        return None
    fig = Figure(figsize=(4 * len(terms), 3))
    axes = fig.subplots(1, len(terms), squeeze=False)
    for ax, term in zip(axes[0], terms):
        for name, frame in logs.items():
            if term in frame.columns:
                ax.plot(frame.index, frame[term], label=name)
        ax.set_title(term)
        ax.set_xlabel("iteration")
    axes[0][0].legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(out, format="svg")
    return out


def report(runs_dir: Path, out: Path) -> pd.DataFrame:
    """Markdown comparison table of every run's `report.json` plus loss curves next to it."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table = collect_reports(runs_dir)
    out.write_text(markdown_table(table), encoding="utf-8")
    plot_losses(runs_dir, out.with_suffix(".svg"))
    logger.info(f"Report for {len(table)} run(s) written to {out}")
    return table
