"""
Three-step training loop.

Every iteration k = 1..K runs

1. a reconstruction step on rays drawn from unmasked pixels,
2. an inpainting step on importance-sampled patches (adversarial, feature
   matching and, after the depth gate, ranking depth supervision),
3. a discriminator step on masked real (inpainted) and fake (rendered) patches,

then, every U iterations, an iterative dataset update that re-inpaints a batch
of train views from the current renders at the scheduled noise level.
"""

import json
import math
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Protocol, Tuple

import numpy as np
import torch
from PIL import Image

from app.config.logger import Logger
from app.models.discriminator import PatchDiscriminator
from app.models.extractors import FeatureExtractor, perceptual_distance
from app.models.radiance_field import NerfModel
from app.schemas.prior import InpaintRequest
from app.schemas.scene import SceneDataset
from app.schemas.training import IterationRecord, TrainConfig, TrainState, ViewAlignment
from app.services.adversarial import (
    adversarial_losses,
    apply_mask,
    extract_patch,
    feature_matching,
    r1_penalty,
    sample_patch_locations,
    slice_tiles,
    stack_patches,
)
from app.services.checkpoint import load_module, save_module
from app.services.dataset_store import load_dataset, save_dataset
from app.services.errors import (
    CheckpointError,
    ConfigError,
    DegenerateDepthPriorError,
    InpaintError,
    SceneError,
    TrainingDivergedError,
)
from app.services.inpaint_prior import mean_fill
from app.services.objectives import (
    DepthOracle,
    depth_ranking_loss,
    distortion_loss,
    fit_view_alignment,
    interlevel_loss,
    pixel_loss,
    ranking_margin,
    sample_depth_pairs,
)
from app.services.radiance_field import camera_ray_tensors, hash_decay, render_image, render_rays
from app.services.scene_forge import update_image

logger = Logger.get_logger(__name__)

# generator streams derived from (seed, k, stream)
RECON_STREAM, PATCH_STREAM, DEPTH_STREAM, IDU_STREAM = range(4)

METRICS_FILE = "metrics.jsonl"


class Inpainter(Protocol):
    timesteps: int

    def inpaint(
        self, req: InpaintRequest, rendered: np.ndarray, gt_removed: Optional[np.ndarray] = None
    ) -> np.ndarray: ...


class TrainResult(NamedTuple):
    state: TrainState
    model: NerfModel
    discriminator: PatchDiscriminator
    dataset: SceneDataset
    records: List[IterationRecord]


def hifa_timestep(k: int, total: int, t_max: int = 980, t_min: int = 20) -> int:
    """t = t_max - (t_max - t_min) * sqrt(k / K), rounded half up and clamped."""
    fraction = min(max(k / total, 0.0), 1.0)
    t = math.floor(t_max - (t_max - t_min) * math.sqrt(fraction) + 0.5)
    return int(min(max(t, t_min), t_max))


def _np_rng(seed: int, k: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, k, stream])


def _torch_gen(seed: int, k: int, stream: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(_np_rng(seed, k, stream).integers(0, 2**62)))


def _inpaint_seed(seed: int, k: int, image_id: int) -> int:
    return int(np.random.default_rng([seed, k, IDU_STREAM, image_id]).integers(0, 2**31 - 1))


def _inpaint_view(
    inpainter: Inpainter, dataset: SceneDataset, image_id: int, rendered: np.ndarray, t: int, config: TrainConfig, k: int
) -> SceneDataset:
    image = dataset.get(image_id)
    req = InpaintRequest(
        image=image.pixels,
        mask=image.mask,
        condition=config.condition,
        t_start=t,
        n_ddim_steps=config.n_ddim_steps,
        seed=_inpaint_seed(config.seed, k, image_id),
        image_id=image_id,
    )
    try:
        new_pixels = inpainter.inpaint(req, rendered, image.gt_removed_pixels)
    except InpaintError as e:
        e.details.setdefault("image_id", image_id)
        logger.error(f"Inpainting failed for image {image_id}: {e.message}")
        raise
    return update_image(dataset, image_id, new_pixels, image.mask)


def initial_inpaint(dataset: SceneDataset, inpainter: Inpainter, config: TrainConfig) -> SceneDataset:
    """Inpaint every train view once at t_max from a mean-colour fill."""
    for image in dataset.train_images():
        fill = mean_fill(image.pixels, image.mask)
        dataset = _inpaint_view(inpainter, dataset, image.image_id, fill, config.t_max, config, 0)
    logger.info(f"Initial inpainting of {len(dataset.train_ids)} views at t={config.t_max}")
    return dataset


def idu_round(
    model: NerfModel, dataset: SceneDataset, inpainter: Inpainter, config: TrainConfig, k: int
) -> Tuple[SceneDataset, List[int]]:
    """
    Re-inpaint `idu_batch` distinct train views from the current renders at
    t = hifa_timestep(k, K). Returns the new snapshot and the refreshed ids.
    """
    train_ids = dataset.train_ids
    rng = _np_rng(config.seed, k, IDU_STREAM)
    count = min(config.idu_batch, len(train_ids))
    picks = [int(i) for i in rng.choice(train_ids, size=count, replace=False)]
    t = hifa_timestep(k, config.iterations, config.t_max, config.t_min)
    was_training = model.training
    model.eval()
    for image_id in picks:
        rendered = render_image(model, dataset.get(image_id).camera)["rgb"]
        dataset = _inpaint_view(inpainter, dataset, image_id, rendered, t, config, k)
    model.train(was_training)
    logger.debug(f"IDU at k={k}: refreshed {picks} at t={t}")
    return dataset, picks


class _ViewTensors(NamedTuple):
    origins: torch.Tensor
    directions: torch.Tensor
    height: int
    width: int


class TrainingSession:
    """Mutable state of one run: networks, optimizers, dataset snapshot and caches."""

    def __init__(self, config: TrainConfig, dataset: SceneDataset, inpainter: Inpainter):
        if not dataset.train_images():
            raise SceneError("dataset has no train views")
        if config.t_max >= inpainter.timesteps:
            raise ConfigError(
                f"t_max ({config.t_max}) must be below the prior's {inpainter.timesteps} timesteps"
            )
        self.config = config
        self.dataset = dataset
        self.inpainter = inpainter
        self.state = TrainState(config=config, dataset_revision=dataset.revision)

        torch.manual_seed(config.seed)
        self.model = NerfModel(config.field)
        self.discriminator = PatchDiscriminator(patch_size=config.patch_size)
        self.field_optimizer = torch.optim.Adam(self.model.parameters(), lr=config.field_lr_start)
        gamma = (config.field_lr_end / config.field_lr_start) ** (1.0 / config.iterations)
        self.scheduler = torch.optim.lr_scheduler.ExponentialLR(self.field_optimizer, gamma=gamma)
        self.disc_optimizer = torch.optim.Adam(self.discriminator.parameters(), lr=config.disc_lr, betas=(0.0, 0.99))
        self.perceptual = FeatureExtractor(seed=config.perc_extractor_seed) if config.lambda_perc_mask > 0 else None

        self.depth_oracle = DepthOracle(
            seed=config.seed, noise=config.depth_noise, scale=config.depth_scale, shift=config.depth_shift
        )
        self.depth_enabled = config.lambda_depth > 0 and all(
            image.gt_depth is not None for image in dataset.train_images()
        )
        if config.lambda_depth > 0 and not self.depth_enabled:
            logger.warning("Depth supervision disabled: train views lack depth for the depth oracle")
        self.margin = ranking_margin(config.field.near, config.field.far)
        self._depth_cache: Dict[int, Tuple[int, np.ndarray]] = {}

        self._views: Dict[int, _ViewTensors] = {}
        origins, directions, targets = [], [], []
        for image in dataset.train_images():
            view_origins, view_directions = camera_ray_tensors(image.camera)
            self._views[image.image_id] = _ViewTensors(
                view_origins, view_directions, image.camera.height, image.camera.width
            )
            keep = torch.from_numpy(~image.mask.reshape(-1))
            origins.append(view_origins[keep])
            directions.append(view_directions[keep])
            targets.append(torch.from_numpy(image.pixels.reshape(-1, 3))[keep])
        # unmasked pixels never change under dataset updates
        self._recon_origins = torch.cat(origins)
        self._recon_directions = torch.cat(directions)
        self._recon_targets = torch.cat(targets)

    # reconstruction
    def _proposal_terms(self, out) -> Tuple[torch.Tensor, torch.Tensor]:
        final = out.histogram
        inter = sum(interlevel_loss(final.edges, final.weights, h.edges, h.weights) for h in out.proposal_histograms)
        return inter, distortion_loss(final.edges, final.weights)

    def reconstruction_step(self, k: int) -> Dict[str, float]:
        config = self.config
        rng = _np_rng(config.seed, k, RECON_STREAM)
        picks = torch.from_numpy(rng.integers(0, self._recon_targets.shape[0], size=config.ray_batch))
        origins, directions = self._recon_origins[picks], self._recon_directions[picks]
        targets = self._recon_targets[picks]

        out = render_rays(self.model, origins, directions, _torch_gen(config.seed, k, RECON_STREAM))
        inter, distort = self._proposal_terms(out)
        terms = {
            "pix": pixel_loss(out.color, targets),
            "inter_r": inter,
            "distort_r": distort,
            "decay_r": hash_decay(self.model),
        }
        self._check_terms(terms, k)
        total = (
            config.lambda_pix * terms["pix"]
            + config.lambda_inter * terms["inter_r"]
            + config.lambda_distort * terms["distort_r"]
            + config.lambda_decay * terms["decay_r"]
        )
        self._field_update(total)
        return {**{name: float(value.detach()) for name, value in terms.items()}, "recon_total": float(total.detach())}

    # inpainting
    def _sample_patches(self, k: int):
        config = self.config
        rng = _np_rng(config.seed, k, PATCH_STREAM)
        train = self.dataset.train_images()
        n_selected = max(1, math.ceil(config.disc_batch / config.tiles_per_candidate))
        picks = sample_patch_locations(
            [image.mask for image in train], config.n_candidates, n_selected, config.candidate_size, rng
        )
        tiles = []
        for index, top, left in picks:
            for tile in slice_tiles((top, left), config.candidate_size, config.patch_size):
                tiles.append((train[index].image_id, tile))
        return tiles[: config.disc_batch]

    def _patch_rays(self, tiles) -> Tuple[torch.Tensor, torch.Tensor]:
        p = self.config.patch_size
        origins, directions = [], []
        for image_id, (top, left) in tiles:
            view = self._views[image_id]
            rows = torch.arange(top, top + p)[:, None]
            cols = torch.arange(left, left + p)[None, :]
            flat = (rows * view.width + cols).reshape(-1)
            origins.append(view.origins[flat])
            directions.append(view.directions[flat])
        return torch.cat(origins), torch.cat(directions)

    def _patch_arrays(self, tiles) -> Tuple[torch.Tensor, torch.Tensor]:
        samples = []
        for image_id, top_left in tiles:
            image = self.dataset.get(image_id)
            kind = "inpainted" if self.dataset.revision > 0 else "ground_truth"
            samples.append(extract_patch(image.pixels, image.mask, image_id, top_left, self.config.patch_size, kind))
        return stack_patches(samples)

    def _discriminator_inputs(self, fake: torch.Tensor, real: torch.Tensor, masks: torch.Tensor):
        if self.config.adv_real == "masked_inpainted":
            return apply_mask(fake, masks), apply_mask(real, masks)
        return fake, real

    def _prior_depth(self, image_id: int) -> np.ndarray:
        revision = self.state.image_revisions.get(image_id, 0)
        cached = self._depth_cache.get(image_id)
        if cached is None or cached[0] != revision:
            estimate = self.depth_oracle.estimate(self.dataset.get(image_id), revision)
            self._depth_cache[image_id] = (revision, estimate)
        return self._depth_cache[image_id][1]

    def _view_alignment(self, image_id: int) -> ViewAlignment:
        """
        Shift-scale of the prior depth onto the field's depth for one view,
        fitted over the view's whole reconstruction region and refitted only
        when the view's image revision changes. Kept in the train state so a
        resumed run reuses the same fits.
        """
        revision = self.state.image_revisions.get(image_id, 0)
        cached = self.state.depth_alignments.get(image_id)
        if cached is not None and cached.revision == revision:
            return cached
        image = self.dataset.get(image_id)
        rendered = render_image(self.model, image.camera)["depth"]
        try:
            fit = fit_view_alignment(self._prior_depth(image_id), rendered, ~image.mask, self.config.depth_min_fit)
            cached = ViewAlignment(revision=revision, a=fit.a, b=fit.b)
        except DegenerateDepthPriorError as e:
            logger.warning(f"Depth term off for image {image_id} until its next update: {e.message}")
            cached = ViewAlignment(revision=revision)
        self.state.depth_alignments[image_id] = cached
        return cached

    def _depth_term(self, tiles, depth: torch.Tensor, masks: torch.Tensor, k: int) -> torch.Tensor:
        config = self.config
        p = config.patch_size
        rng = _np_rng(config.seed, k, DEPTH_STREAM)
        losses = []
        for index, (image_id, (top, left)) in enumerate(tiles):
            alignment = self._view_alignment(image_id)
            if not alignment.usable:
                continue
            mask = masks[index].numpy()
            prior = self._prior_depth(image_id)[top : top + p, left : left + p]
            first, second = sample_depth_pairs(mask, config.depth_pairs, min(config.depth_window, p), rng)
            if first.size == 0:
                continue
            aligned = torch.from_numpy((alignment.a * prior + alignment.b).reshape(-1))
            loss, empty = depth_ranking_loss(
                depth[index].reshape(-1),
                aligned,
                (torch.from_numpy(first), torch.from_numpy(second)),
                self.margin,
            )
            if not empty:
                losses.append(loss)
        if not losses:
            return depth.sum() * 0.0
        return torch.stack(losses).mean()

    def inpainting_step(self, k: int) -> Tuple[Dict[str, float], dict]:
        config = self.config
        tiles = self._sample_patches(k)
        origins, directions = self._patch_rays(tiles)
        out = render_rays(self.model, origins, directions, _torch_gen(config.seed, k, PATCH_STREAM))
        b, p = len(tiles), config.patch_size
        fake = out.color.reshape(b, p, p, 3).permute(0, 3, 1, 2)
        depth = out.depth.reshape(b, p, p)
        real, masks = self._patch_arrays(tiles)
        fake_in, real_in = self._discriminator_inputs(fake, real, masks)

        self.discriminator.requires_grad_(False)
        adv, parts = adversarial_losses(self.discriminator, fake_in, real_in)
        inter, distort = self._proposal_terms(out)
        terms = {
            "adv": adv,
            "fm": feature_matching(self.discriminator, fake_in, real_in),
            "inter_m": inter,
            "distort_m": distort,
            "decay_m": hash_decay(self.model),
        }
        depth_active = self.depth_enabled and k >= config.depth_gate
        terms["depth"] = self._depth_term(tiles, depth, masks, k) if depth_active else fake.sum() * 0.0
        if config.lambda_pix_mask > 0:
            keep = masks.reshape(-1)
            terms["pix_mask"] = pixel_loss(
                fake.permute(0, 2, 3, 1).reshape(-1, 3)[keep], real.permute(0, 2, 3, 1).reshape(-1, 3)[keep]
            )
        if self.perceptual is not None:
            terms["perc_mask"] = perceptual_distance(
                self.perceptual, apply_mask(fake, masks), apply_mask(real, masks)
            ).mean()
        self._check_terms(terms, k)
        self._check_scores(parts, k)

        total = (
            -config.lambda_adv * terms["adv"]
            + config.lambda_fm * terms["fm"]
            + config.lambda_inter * terms["inter_m"]
            + config.lambda_distort * terms["distort_m"]
            + config.lambda_decay * terms["decay_m"]
            + config.lambda_depth * terms["depth"]
        )
        if "pix_mask" in terms:
            total = total + config.lambda_pix_mask * terms["pix_mask"]
        if "perc_mask" in terms:
            total = total + config.lambda_perc_mask * terms["perc_mask"]
        self._field_update(total)
        self.discriminator.requires_grad_(True)

        values = {name: float(value.detach()) for name, value in terms.items()}
        values["inpaint_total"] = float(total.detach())
        batch = {"fake": fake.detach(), "real": real, "masks": masks, "depth_active": depth_active}
        return values, batch

    # discriminator
    def discriminator_step(self, batch: dict, k: int) -> Dict[str, float]:
        config = self.config
        fake_in, real_in = self._discriminator_inputs(batch["fake"], batch["real"], batch["masks"])
        adv, parts = adversarial_losses(self.discriminator, fake_in, real_in)
        if config.adv_real == "masked_inpainted":
            r1 = r1_penalty(self.discriminator, batch["real"], batch["masks"])
        else:
            r1 = r1_penalty(self.discriminator, batch["real"], torch.ones_like(batch["masks"]))
        terms = {"disc_adv": adv, "r1": r1}
        self._check_terms(terms, k)
        self._check_scores(parts, k)
        total = adv + config.lambda_gp * r1
        self.disc_optimizer.zero_grad()
        total.backward()
        torch.nn.utils.clip_grad_norm_(self.discriminator.parameters(), config.grad_clip)
        self.disc_optimizer.step()
        return {
            "disc_adv": float(adv.detach()),
            "r1": float(r1.detach()),
            "disc_total": float(total.detach()),
            "d_fake": float(parts["fake_scores"].detach().mean()),
            "d_real": float(parts["real_scores"].detach().mean()),
        }

    def _field_update(self, total: torch.Tensor) -> None:
        self.field_optimizer.zero_grad()
        total.backward()
        torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.config.grad_clip)
        self.field_optimizer.step()

    @staticmethod
    def _check_terms(terms: Dict[str, torch.Tensor], k: int) -> None:
        for name, value in terms.items():
            if not bool(torch.isfinite(value.detach()).all()):
                logger.error(f"Non-finite loss term '{name}' at iteration {k}")
                raise TrainingDivergedError(f"non-finite loss term '{name}' at iteration {k}", term=name, iteration=k)

    def _check_scores(self, parts: dict, k: int) -> None:
        bound = self.config.divergence_bound
        for side in ("fake_scores", "real_scores"):
            peak = float(parts[side].detach().abs().max())
            if not peak <= bound:
                logger.error(f"Discriminator diverged at iteration {k}: |{side}| = {peak:.3g}")
                raise TrainingDivergedError(
                    f"discriminator score out of bounds at iteration {k}", term=side, iteration=k, value=peak
                )

    def run_iteration(self, k: int) -> IterationRecord:
        losses = self.reconstruction_step(k)
        inpaint_losses, batch = self.inpainting_step(k)
        losses.update(inpaint_losses)
        losses.update(self.discriminator_step(batch, k))
        lr = self.scheduler.get_last_lr()[0]
        self.scheduler.step()

        idu, hifa_t = False, None
        if k % self.config.idu_period == 0:
            self.dataset, picks = idu_round(self.model, self.dataset, self.inpainter, self.config, k)
            for image_id in picks:
                self.state.image_revisions[image_id] = self.state.image_revisions.get(image_id, 0) + 1
            idu, hifa_t = True, hifa_timestep(k, self.config.iterations, self.config.t_max, self.config.t_min)
        self.state.iteration = k
        self.state.dataset_revision = self.dataset.revision
        return IterationRecord(
            iteration=k,
            losses=losses,
            field_lr=lr,
            dataset_revision=self.dataset.revision,
            depth_active=batch["depth_active"],
            idu=idu,
            hifa_t=hifa_t,
        )

    # persistence
    def save_checkpoint(self, out_dir: Path) -> Path:
        k = self.state.iteration
        target = Path(out_dir) / "checkpoints" / f"iter_{k:06d}"
        target.mkdir(parents=True, exist_ok=True)
        field = self.config.field
        save_module(self.model, target / "field.bin", "field", field.levels, field.table_size, field.features)
        save_module(self.discriminator, target / "discriminator.bin", "discriminator")
        torch.save(
            {
                "field_optimizer": self.field_optimizer.state_dict(),
                "scheduler": self.scheduler.state_dict(),
                "disc_optimizer": self.disc_optimizer.state_dict(),
            },
            target / "optimizers.pt",
        )
        save_dataset(self.dataset, target / "dataset")
        self.state.checkpoint_id = target.name
        (target / "state.json").write_text(self.state.model_dump_json(indent=2), encoding="utf-8")
        logger.info(f"Checkpoint written to {target}")
        return target

    def restore(self, checkpoint_dir: Path) -> None:
        checkpoint_dir = Path(checkpoint_dir)
        state = read_train_state(checkpoint_dir)
        load_module(self.model, checkpoint_dir / "field.bin", "field")
        load_module(self.discriminator, checkpoint_dir / "discriminator.bin", "discriminator")
        optimizers = torch.load(checkpoint_dir / "optimizers.pt", weights_only=True)
        self.field_optimizer.load_state_dict(optimizers["field_optimizer"])
        self.scheduler.load_state_dict(optimizers["scheduler"])
        self.disc_optimizer.load_state_dict(optimizers["disc_optimizer"])
        self.dataset = load_dataset(checkpoint_dir / "dataset")
        self.state = state.model_copy(update={"config": self.config})
        logger.info(f"Resumed from {checkpoint_dir} at iteration {state.iteration}")

    def snapshot(self, out_dir: Path) -> None:
        views = self.dataset.test_images() or self.dataset.train_images()
        rgb = render_image(self.model, views[0].camera)["rgb"]
        target = Path(out_dir) / "snapshots" / f"iter_{self.state.iteration:06d}_view{views[0].image_id}.png"
        target.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.round(rgb * 255.0).astype(np.uint8)).save(target)


def read_train_state(checkpoint_dir: Path) -> TrainState:
    path = Path(checkpoint_dir) / "state.json"
    if not path.is_file():
        raise CheckpointError(f"not a training checkpoint: {checkpoint_dir}", file=str(path))
    try:
        return TrainState.model_validate(json.loads(path.read_text(encoding="utf-8")))
    except ValueError as e:
        raise CheckpointError(f"{path}: invalid training state ({e})", file=str(path))


def load_field(checkpoint_dir: Path) -> Tuple[NerfModel, TrainState]:
    """Radiance field and training state stored in a checkpoint directory."""
    state = read_train_state(checkpoint_dir)
    model = NerfModel(state.config.field)
    load_module(model, Path(checkpoint_dir) / "field.bin", "field")
    model.eval()
    return model, state


def _rewrite_metrics(path: Path, keep_through: int) -> List[IterationRecord]:
    records = []
    if path.is_file():
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                record = IterationRecord.model_validate_json(line)
                if record.iteration <= keep_through:
                    records.append(record)
    path.write_text("".join(r.model_dump_json() + "\n" for r in records), encoding="utf-8")
    return records


def train(
    config: TrainConfig,
    dataset: SceneDataset,
    inpainter: Inpainter,
    out_dir: Path,
    resume_from: Optional[Path] = None,
) -> TrainResult:
    """
    Train a radiance field on `dataset` with the given inpainting prior.

    Writes `metrics.jsonl`, checkpoints and snapshots under `out_dir`; the
    final checkpoint is always written. With `resume_from`, training picks up
    after the checkpoint's iteration and the metric log is truncated to it.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    session = TrainingSession(config, dataset, inpainter)
    metrics_path = out_dir / METRICS_FILE

    if resume_from is not None:
        session.restore(resume_from)
        records = _rewrite_metrics(metrics_path, session.state.iteration)
    else:
        if config.initial_inpaint:
            session.dataset = initial_inpaint(session.dataset, inpainter, config)
            session.state.dataset_revision = session.dataset.revision
        records = _rewrite_metrics(metrics_path, -1)

    start = session.state.iteration + 1
    logger.info(f"Training iterations {start}..{config.iterations} into {out_dir}")
    with metrics_path.open("a", encoding="utf-8") as log:
        for k in range(start, config.iterations + 1):
            record = session.run_iteration(k)
            if k % config.log_every == 0 or record.idu or k == config.iterations:
                records.append(record)
                log.write(record.model_dump_json() + "\n")
                log.flush()
                logger.debug(
                    f"k={k} pix={record.losses['pix']:.5f} adv={record.losses['adv']:.4f} "
                    f"disc={record.losses['disc_total']:.4f}"
                )
            if config.checkpoint_every and k % config.checkpoint_every == 0 and k != config.iterations:
                session.save_checkpoint(out_dir)
            if config.snapshot_every and k % config.snapshot_every == 0:
                session.snapshot(out_dir)

    final = session.save_checkpoint(out_dir)
    (out_dir / "latest").write_text(final.name, encoding="utf-8")
    logger.info(f"Training finished at iteration {session.state.iteration}, dataset revision {session.dataset.revision}")
    return TrainResult(session.state, session.model, session.discriminator, session.dataset, records)
