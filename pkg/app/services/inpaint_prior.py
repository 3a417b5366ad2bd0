"""
Inpainting priors.

Two implementations share one call shape, `inpaint(request, rendered, gt_removed)`:

* `DiffusionInpainter` wraps the toy latent diffusion model: the rendered
  pixels are hard-blended into the original outside the mask, encoded, noised
  to `t_start` and denoised with deterministic DDIM steps down to 0.
* `OracleInpainter` returns the synthetic object-free pixels corrupted by a
  per-view low-frequency field and a fixed texture shift.

Both re-composite onto the original so unmasked pixels never change.
"""

import copy
import json
import math
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from peft import LoraConfig, get_peft_model_state_dict, inject_adapter_in_model, set_peft_model_state_dict
from pydantic import Field
from scipy import ndimage

from app.config.logger import Logger
from app.models.prior import ADAPTER_TARGETS, DOWNSAMPLE, LatentInpaintPrior
from app.schemas.arrays import ArrayModel, Float64Array
from app.schemas.prior import InpaintRequest, PriorConfig, PriorManifest, TextureShift
from app.schemas.scene import SceneDataset
from app.services.checkpoint import load_module, load_tensors, save_tensors
from app.services.errors import CheckpointError, InpaintError

logger = Logger.get_logger(__name__)

ADAPTER_NAME = "default"


class DiffusionSchedule(ArrayModel):
    """
    Discrete DDPM noise schedule.

    `betas[t - 1]` is the variance of step t for t = 1..T; `alpha_bars[t]` is
    the cumulative product up to t, with `alpha_bars[0] = 1`.
    """

    timesteps: int = Field(..., ge=1)
    betas: Float64Array
    alpha_bars: Float64Array

    @classmethod
    def linear(cls, timesteps: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> "DiffusionSchedule":
        betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
        alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return cls(timesteps=timesteps, betas=betas, alpha_bars=alpha_bars)

    @classmethod
    def from_config(cls, config: PriorConfig) -> "DiffusionSchedule":
        return cls.linear(config.timesteps, config.beta_start, config.beta_end)


def _check_dims(height: int, width: int) -> None:
    if height % DOWNSAMPLE or width % DOWNSAMPLE:
        raise InpaintError(
            f"image dims must be divisible by {DOWNSAMPLE}, got {height}x{width}", height=height, width=width
        )


def encode(prior: LatentInpaintPrior, images: torch.Tensor) -> torch.Tensor:
    """(B, 3, H, W) images in [0, 1] -> (B, C, H/4, W/4) latents."""
    _check_dims(*images.shape[-2:])
    return prior.autoencoder.encode(images)


def decode(prior: LatentInpaintPrior, latents: torch.Tensor) -> torch.Tensor:
    return prior.autoencoder.decode(latents)


def latent_mask(mask: torch.Tensor) -> torch.Tensor:
    """(B, 1, H, W) pixel mask -> (B, 1, H/4, W/4); a latent cell is masked if any of its pixels is."""
    return F.max_pool2d(mask.float(), DOWNSAMPLE)


def _to_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]


def _mask_tensor(mask: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.asarray(mask, dtype=np.float32))[None, None]


def random_rectangle_mask(height: int, width: int, generator: np.random.Generator) -> np.ndarray:
    """Union of 1-4 random axis-aligned rectangles."""
    mask = np.zeros((height, width), dtype=bool)
    for _ in range(int(generator.integers(1, 5))):
        h = int(generator.integers(max(1, height // 8), max(2, height // 2) + 1))
        w = int(generator.integers(max(1, width // 8), max(2, width // 2) + 1))
        top = int(generator.integers(0, height - h + 1))
        left = int(generator.integers(0, width - w + 1))
        mask[top : top + h, left : left + w] = True
    return mask


def procedural_textures(n: int, size: int, generator: np.random.Generator) -> np.ndarray:
    """(n, size, size, 3) stripe/checker textures with random palettes, values in [0, 1]."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    textures = np.empty((n, size, size, 3), dtype=np.float32)
    for i in range(n):
        palette = generator.uniform(0.05, 0.95, size=(2, 3))
        angle = generator.uniform(0.0, np.pi)
        frequency = generator.uniform(2.0, 10.0) * 2.0 * np.pi / size
        phase = generator.uniform(0.0, 2.0 * np.pi)
        stripes = 0.5 + 0.5 * np.sin(frequency * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
        if generator.random() < 0.5:
            cell = int(generator.integers(4, max(5, size // 4)))
            checker = ((yy // cell + xx // cell) % 2).astype(np.float64)
            stripes = 0.6 * stripes + 0.4 * checker
        weight = stripes[..., None]
        noise = 0.02 * generator.standard_normal((size, size, 3))
        textures[i] = np.clip(palette[0] * (1.0 - weight) + palette[1] * weight + noise, 0.0, 1.0)
    return textures


def masked_epsilon_loss(eps: torch.Tensor, eps_hat: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
    """
    Mean squared noise-prediction error over kept latent positions.

    `keep` is (B, 1, h, w); with nothing kept the loss is an exact zero with a
    zero gradient.
    """
    keep = keep.to(eps_hat.dtype)
    total = keep.sum() * eps_hat.shape[1]
    if float(total) == 0.0:
        return (eps_hat * 0.0).sum()
    return ((eps - eps_hat) ** 2 * keep).sum() / total


def ddpm_train_step(
    prior: LatentInpaintPrior,
    images: torch.Tensor,
    train_mask: torch.Tensor,
    object_mask: torch.Tensor,
    condition: str,
    optimizer: torch.optim.Optimizer,
    schedule: DiffusionSchedule,
    generator: torch.Generator,
) -> float:
    """
    One denoiser update on a batch.

    Images are (B, 3, H, W), masks (B, 1, H, W). Latent positions touched by
    `object_mask` do not contribute to the loss.
    """
    batch = images.shape[0]
    with torch.no_grad():
        z0 = encode(prior, images)
        masked_latent = encode(prior, images * (1.0 - train_mask))
    mask_latent = latent_mask(train_mask)
    keep = 1.0 - latent_mask(object_mask)

    t = torch.randint(1, schedule.timesteps + 1, (batch,), generator=generator)
    alpha_bar = torch.from_numpy(schedule.alpha_bars[t.numpy()]).to(z0.dtype)[:, None, None, None]
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    noisy = alpha_bar.sqrt() * z0 + (1.0 - alpha_bar).sqrt() * eps

    eps_hat = prior.denoiser(noisy, masked_latent, mask_latent, t, prior.condition_vector(condition, batch))
    loss = masked_epsilon_loss(eps, eps_hat, keep)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def train_autoencoder_step(prior: LatentInpaintPrior, images: torch.Tensor, optimizer: torch.optim.Optimizer) -> float:
    reconstruction = decode(prior, encode(prior, images))
    loss = F.mse_loss(reconstruction, images)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def ddim_timesteps(t_start: int, n_steps: int) -> List[int]:
    """Strictly decreasing integer timesteps from `t_start` to 0 inclusive."""
    if t_start == 0:
        return [0]
    grid = np.rint(np.linspace(t_start, 0, min(n_steps, t_start) + 1)).astype(int)
    return [int(t) for t in dict.fromkeys(grid.tolist())]


def ddim_sample(
    denoise_fn: Callable[[torch.Tensor, int], torch.Tensor],
    z_t: torch.Tensor,
    t_start: int,
    n_steps: int,
    schedule: DiffusionSchedule,
) -> torch.Tensor:
    """
    Deterministic DDIM from `t_start` down to 0.

    `denoise_fn(z, t)` predicts the noise in `z` at timestep t. Each step forms
    z0_hat = (z - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t) and re-noises it to the
    next timestep with the same eps_hat.
    """
    steps = ddim_timesteps(t_start, n_steps)
    z = z_t
    for t, t_next in zip(steps[:-1], steps[1:]):
        ab_t, ab_next = float(schedule.alpha_bars[t]), float(schedule.alpha_bars[t_next])
        eps_hat = denoise_fn(z, t)
        z0_hat = (z - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
        z = math.sqrt(ab_next) * z0_hat + math.sqrt(1.0 - ab_next) * eps_hat
    return z


def blend(rendered: np.ndarray, original: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Rendered pixels inside the mask, original pixels outside."""
    return np.where(np.asarray(mask, dtype=bool)[..., None], rendered, original).astype(np.float32)


def _recomposite(out: np.ndarray, original: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(mask, dtype=bool)[..., None], out.astype(np.float32), original).astype(np.float32)


@torch.no_grad()
def partial_inpaint(
    req: InpaintRequest,
    rendered: np.ndarray,
    prior: LatentInpaintPrior,
    schedule: DiffusionSchedule,
) -> np.ndarray:
    """Partial DDIM inpainting of `req.image` from the current render, starting at `req.t_start`."""
    original = req.image
    if rendered.shape != original.shape:
        raise InpaintError("rendered and original images differ in shape", image_id=req.image_id)
    if not req.mask.any():
        raise InpaintError("inpainting mask is empty", image_id=req.image_id)
    if not 0 <= req.t_start <= schedule.timesteps:
        raise InpaintError(
            f"t_start {req.t_start} outside [0, {schedule.timesteps}]", image_id=req.image_id, t_start=req.t_start
        )
    if req.condition not in prior.known_tokens():
        raise InpaintError(f"unknown conditioning token '{req.condition}'", image_id=req.image_id)
    _check_dims(*original.shape[:2])

    prior.eval()
    mask = _mask_tensor(req.mask)
    blended = _to_tensor(blend(rendered, original, req.mask))
    z0 = encode(prior, blended)
    masked_latent = encode(prior, blended * (1.0 - mask))
    mask_latent = latent_mask(mask)
    condition = prior.condition_vector(req.condition, 1)

    generator = torch.Generator().manual_seed(int(req.seed))
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    alpha_bar = float(schedule.alpha_bars[req.t_start])
    z_t = math.sqrt(alpha_bar) * z0 + math.sqrt(1.0 - alpha_bar) * eps

    def denoise(z: torch.Tensor, t: int) -> torch.Tensor:
        return prior.denoiser(z, masked_latent, mask_latent, torch.tensor([t]), condition)

    z_final = ddim_sample(denoise, z_t, req.t_start, req.n_ddim_steps, schedule)
    out = decode(prior, z_final)[0].permute(1, 2, 0).clamp(0.0, 1.0).numpy()
    return _recomposite(out, original, req.mask)


def oracle_inpaint(
    req: InpaintRequest,
    rendered: np.ndarray,
    gt_removed: Optional[np.ndarray],
    sigma_incon: float,
    shift: TextureShift,
) -> np.ndarray:
    """
    Object-free ground truth inside the mask, corrupted by a texture shift and
    a per-view low-frequency colour field. The render is not consulted.
    """
    if gt_removed is None:
        raise InpaintError("oracle inpainting needs object-removed ground truth", image_id=req.image_id)
    original = req.image
    h, w = original.shape[:2]
    gt = np.asarray(gt_removed, dtype=np.float64)

    out = gt
    if shift.rho > 0:
        out = (1.0 - shift.rho) * out + shift.rho * ndimage.uniform_filter(gt, size=(3, 3, 1), mode="nearest")
    out = out + np.asarray(shift.offset, dtype=np.float64)
    if sigma_incon > 0:
        rng = np.random.default_rng([int(req.seed), int(req.image_id)])
        coarse = rng.standard_normal((4, 4, 3))
        field = ndimage.zoom(coarse, (h / 4.0, w / 4.0, 1.0), order=1)[:h, :w]
        out = out + sigma_incon * field
    return _recomposite(np.clip(out, 0.0, 1.0), original, req.mask)


def mean_fill(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Masked pixels replaced by the mean colour of the unmasked ones."""
    mask = np.asarray(mask, dtype=bool)
    fill = image[~mask].mean(axis=0)
    return np.where(mask[..., None], fill[None, None, :], image).astype(np.float32)


class DiffusionInpainter:
    """Latent diffusion prior behind the common inpainter interface."""

    kind = "diffusion"

    def __init__(self, prior: LatentInpaintPrior, schedule: Optional[DiffusionSchedule] = None, condition: str = "inpaint"):
        self.prior = prior
        self.schedule = schedule or DiffusionSchedule.from_config(prior.prior_config)
        self.condition = condition

    @property
    def timesteps(self) -> int:
        return self.schedule.timesteps

    def inpaint(self, req: InpaintRequest, rendered: np.ndarray, gt_removed: Optional[np.ndarray] = None) -> np.ndarray:
        return partial_inpaint(req, rendered, self.prior, self.schedule)


class OracleInpainter:
    """Ground-truth inpainter with controllable inconsistency and texture shift."""

    kind = "oracle"
    timesteps = 1000

    def __init__(self, sigma_incon: float = 0.05, shift: Optional[TextureShift] = None, condition: str = "inpaint"):
        self.sigma_incon = sigma_incon
        self.shift = shift or TextureShift()
        self.condition = condition

    def inpaint(self, req: InpaintRequest, rendered: np.ndarray, gt_removed: Optional[np.ndarray] = None) -> np.ndarray:
        return oracle_inpaint(req, rendered, gt_removed, self.sigma_incon, self.shift)


def _image_batch(images: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(images).astype(np.float32)).permute(0, 3, 1, 2).contiguous()


def _mask_batch(masks: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(masks).astype(np.float32))[:, None]


def train_prior(
    prior: LatentInpaintPrior,
    steps: int,
    seed: int = 0,
    images: Optional[Sequence[np.ndarray]] = None,
    object_masks: Optional[Sequence[np.ndarray]] = None,
    size: int = 64,
    batch_size: int = 8,
    autoencoder_steps: Optional[int] = None,
    lr: float = 1e-3,
) -> Dict[str, List[float]]:
    """
    Train the autoencoder on procedural textures, then the denoiser.

    When scene `images` are given, denoiser batches alternate between the
    texture corpus (token "texture") and scene crops (token "inpaint"), with
    `object_masks` excluded from the loss. Returns the loss history.
    """
    rng = np.random.default_rng(seed)
    generator = torch.Generator().manual_seed(seed)
    schedule = DiffusionSchedule.from_config(prior.prior_config)
    autoencoder_steps = steps // 2 if autoencoder_steps is None else autoencoder_steps
    history: Dict[str, List[float]] = {"autoencoder": [], "denoiser": []}
    prior.train()

    ae_optimizer = torch.optim.Adam(prior.autoencoder.parameters(), lr=lr)
    for step in range(autoencoder_steps):
        batch = _image_batch(procedural_textures(batch_size, size, rng))
        history["autoencoder"].append(train_autoencoder_step(prior, batch, ae_optimizer))
        if step % 100 == 0:
            logger.debug(f"autoencoder step {step}: loss {history['autoencoder'][-1]:.5f}")

    prior.autoencoder.requires_grad_(False)
    denoiser_params = list(prior.denoiser.parameters()) + list(prior.cond_table.parameters())
    optimizer = torch.optim.Adam(denoiser_params, lr=lr)
    for step in range(steps):
        use_scene = images is not None and len(images) > 0 and step % 2 == 1
        if use_scene:
            picks = rng.integers(0, len(images), size=batch_size)
            batch = _image_batch([images[i] for i in picks])
            objects = _mask_batch([object_masks[i] for i in picks]) if object_masks is not None else None
            condition = "inpaint"
        else:
            batch = _image_batch(procedural_textures(batch_size, size, rng))
            objects = None
            condition = "inpaint" if not images else "texture"
        h, w = batch.shape[-2:]
        train_mask = _mask_batch([random_rectangle_mask(h, w, rng) for _ in range(batch.shape[0])])
        if objects is None:
            objects = torch.zeros_like(train_mask)
        loss = ddpm_train_step(prior, batch, train_mask, objects, condition, optimizer, schedule, generator)
        history["denoiser"].append(loss)
        if step % 100 == 0:
            logger.debug(f"denoiser step {step}: loss {loss:.5f}")
    prior.autoencoder.requires_grad_(True)
    prior.eval()
    logger.info(f"Trained prior for {steps} denoiser steps ({autoencoder_steps} autoencoder steps)")
    return history


def customize(
    prior: LatentInpaintPrior,
    scene: SceneDataset,
    rank: int,
    steps: int,
    seed: int = 0,
    token: str = "scene",
    lr: float = 1e-3,
    batch_size: int = 4,
) -> LatentInpaintPrior:
    """
    Per-scene low-rank customization on a copy of `prior`.

    Adds a conditioning token initialized near the mean embedding and trains
    only the adapters and that token on the scene's original train images,
    with the inpainting masks excluded from the loss. Rank 0 aliases the token
    to the base "inpaint" embedding and trains nothing.
    """
    train = scene.train_images()
    if not train:
        raise InpaintError("scene has no train images to customize on")
    tuned = copy.deepcopy(prior)
    tuned.requires_grad_(False)
    if rank == 0:
        tuned.token_aliases[token] = "inpaint"
        logger.info(f"Rank 0 customization: token '{token}' aliases the base prior")
        return tuned

    generator = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    base = tuned.cond_table.weight.detach()
    initial = base.mean(dim=0) + 0.01 * torch.randn(base.shape[1], generator=generator)
    tuned.scene_tokens[token] = torch.nn.Parameter(initial)

    config = LoraConfig(r=rank, lora_alpha=rank, target_modules=list(ADAPTER_TARGETS), lora_dropout=0.0)
    inject_adapter_in_model(config, tuned, adapter_name=ADAPTER_NAME)
    tuned.lora_rank = rank
    tuned.scene_tokens[token].requires_grad_(True)
    trainable = [p for p in tuned.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(trainable, lr=lr)
    schedule = DiffusionSchedule.from_config(tuned.prior_config)

    tuned.train()
    for step in range(steps):
        picks = rng.integers(0, len(train), size=batch_size)
        batch = _image_batch([train[i].pixels for i in picks])
        objects = _mask_batch([train[i].mask for i in picks])
        h, w = batch.shape[-2:]
        train_mask = _mask_batch([random_rectangle_mask(h, w, rng) for _ in range(batch_size)])
        loss = ddpm_train_step(tuned, batch, train_mask, objects, token, optimizer, schedule, generator)
        if step % 50 == 0:
            logger.debug(f"customize step {step}: loss {loss:.5f}")
    tuned.eval()
    logger.info(f"Customized prior with rank {rank} adapters for {steps} steps, token '{token}'")
    return tuned


def _manifest_path(path: Path) -> Path:
    return path.with_suffix(".json")


def save_prior(prior: LatentInpaintPrior, path: Path) -> PriorManifest:
    """
    Write the base networks as a `prior` blob, adapters and scene tokens as an
    `adapter` blob, and a JSON manifest next to them.
    """
    path = Path(path)
    base = {}
    for name, tensor in prior.state_dict().items():
        if "lora_" in name or name.startswith("scene_tokens."):
            continue
        base[name.replace(".base_layer", "")] = tensor.detach().cpu().numpy()
    save_tensors(path, base, kind="prior")

    adapter_file = None
    if prior.lora_rank > 0 or len(prior.scene_tokens) > 0:
        adapters = {}
        if prior.lora_rank > 0:
            state = get_peft_model_state_dict(prior, adapter_name=ADAPTER_NAME, save_embedding_layers=False)
            adapters.update({f"lora.{k}": v.detach().cpu().numpy() for k, v in state.items()})
        for name, value in prior.scene_tokens.items():
            adapters[f"token.{name}"] = value.detach().cpu().numpy()
        adapter_file = f"{path.stem}.adapter.bin"
        save_tensors(path.parent / adapter_file, adapters, kind="adapter")

    manifest = PriorManifest(
        config=prior.prior_config,
        tokens=list(prior.tokens),
        scene_tokens=list(prior.scene_tokens.keys()),
        token_aliases=dict(prior.token_aliases),
        lora_rank=prior.lora_rank,
        adapter_file=adapter_file,
    )
    _manifest_path(path).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    logger.info(f"Saved prior to {path} (rank {prior.lora_rank}, tokens {prior.known_tokens()})")
    return manifest


def load_prior(path: Path) -> LatentInpaintPrior:
    """Rebuild a prior (and its adapters, if any) from `save_prior` output."""
    path = Path(path)
    manifest_path = _manifest_path(path)
    if not manifest_path.is_file():
        raise CheckpointError(f"prior manifest not found: {manifest_path}", file=str(manifest_path))
    try:
        manifest = PriorManifest.model_validate(json.loads(manifest_path.read_text(encoding="utf-8")))
    except ValueError as e:
        raise CheckpointError(f"{manifest_path}: invalid prior manifest ({e})", file=str(manifest_path))

    prior = LatentInpaintPrior(manifest.config)
    load_module(prior, path, kind="prior")
    if manifest.adapter_file:
        adapters = load_tensors(path.parent / manifest.adapter_file, kind="adapter")
        if manifest.lora_rank > 0:
            config = LoraConfig(
                r=manifest.lora_rank,
                lora_alpha=manifest.lora_rank,
                target_modules=list(ADAPTER_TARGETS),
                lora_dropout=0.0,
            )
            inject_adapter_in_model(config, prior, adapter_name=ADAPTER_NAME)
            lora_state = {k[len("lora.") :]: torch.from_numpy(v.copy()) for k, v in adapters.items() if k.startswith("lora.")}
            set_peft_model_state_dict(prior, lora_state, adapter_name=ADAPTER_NAME)
            prior.lora_rank = manifest.lora_rank
        for name in manifest.scene_tokens:
            key = f"token.{name}"
            if key not in adapters:
                raise CheckpointError(f"{path}: adapter blob lacks scene token '{name}'", file=str(path))
            prior.scene_tokens[name] = torch.nn.Parameter(torch.from_numpy(adapters[key].copy()))
    prior.token_aliases = dict(manifest.token_aliases)
    prior.requires_grad_(False)
    prior.eval()
    return prior
