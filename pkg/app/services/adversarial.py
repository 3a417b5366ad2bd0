"""
Masked patch-adversarial objectives and inpainting-aware patch sampling.

Patches are (B, 3, P, P) tensors and masks (B, 1, P, P) or (B, P, P) booleans.
Real examples are diffusion-inpainted patches, fake examples are renders;
both are masked to the inpainting region before the discriminator sees them.
"""

from typing import Dict, List, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from app.config.logger import Logger
from app.schemas.patches import PatchSample
from app.services.errors import PatchSamplingError

logger = Logger.get_logger(__name__)

INCLUSION_THRESHOLD = 0.5


def _mask_like(mask: torch.Tensor, pixels: torch.Tensor) -> torch.Tensor:
    if mask.dim() == pixels.dim() - 1:
        mask = mask.unsqueeze(-3)
    return mask.to(torch.bool)


def apply_mask(pixels: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Keep pixels where `mask` is true, zero elsewhere."""
    return torch.where(_mask_like(mask, pixels), pixels, torch.zeros_like(pixels))


def discriminate(disc: nn.Module, patches: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
    """Scores and per-block features of pre-masked patches."""
    size = getattr(disc, "patch_size", None)
    if size is not None and tuple(patches.shape[-2:]) != (size, size):
        raise PatchSamplingError(
            f"discriminator expects {size}x{size} patches, got {tuple(patches.shape[-2:])}",
            expected=size,
        )
    return disc(patches)


def f_adv(x: torch.Tensor) -> torch.Tensor:
    """f(x) = -log(1 + exp(-x)) = log sigmoid(x), stable for large |x|."""
    return F.logsigmoid(x)


def adversarial_losses(
    disc: nn.Module, fake_masked: torch.Tensor, real_masked: torch.Tensor
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """
    L_adv = mean f(D(fake)) + mean f(-D(real)).

    The discriminator minimizes L_adv; the field minimizes -lambda_adv * L_adv.
    """
    fake_scores, _ = discriminate(disc, fake_masked)
    real_scores, _ = discriminate(disc, real_masked)
    fake_term = f_adv(fake_scores).mean()
    real_term = f_adv(-real_scores).mean()
    parts = {
        "fake_term": fake_term,
        "real_term": real_term,
        "fake_scores": fake_scores,
        "real_scores": real_scores,
    }
    return fake_term + real_term, parts


def r1_penalty(disc: nn.Module, real: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """
    Squared norm of dD/dx on real patches, averaged over the batch.

    The gradient is taken with respect to the unmasked input, through the
    masking, so it is confined to the mask support. The graph is kept so the
    penalty trains the discriminator.
    """
    real = real.detach().requires_grad_(True)
    scores, _ = discriminate(disc, apply_mask(real, mask))
    (grad,) = torch.autograd.grad(scores.sum(), real, create_graph=True)
    return grad.pow(2).flatten(start_dim=1).sum(dim=1).mean()


def feature_matching(disc: nn.Module, fake_masked: torch.Tensor, real_masked: torch.Tensor) -> torch.Tensor:
    """Sum over blocks of the mean absolute feature difference; the real side is detached."""
    _, fake_features = discriminate(disc, fake_masked)
    with torch.no_grad():
        _, real_features = discriminate(disc, real_masked)
    return sum(torch.mean(torch.abs(f - r.detach())) for f, r in zip(fake_features, real_features))


def candidate_probabilities(counts: np.ndarray, area: int, threshold: float = INCLUSION_THRESHOLD) -> np.ndarray:
    """p_i = d_i / sum_j d_j over candidates whose inpainting fraction reaches the threshold."""
    counts = np.asarray(counts, dtype=np.float64)
    eligible = counts / float(area) >= threshold
    if not eligible.any():
        raise PatchSamplingError("mask too small for adversarial patching", best_fraction=float(counts.max() / area))
    weights = np.where(eligible, counts, 0.0)
    return weights / weights.sum()


def enumerate_candidates(
    masks: List[np.ndarray], candidate_size: int, stride: int
) -> Tuple[List[Tuple[int, int, int]], np.ndarray]:
    """Stride-grid candidate windows (mask index, row, col) and their inpainting pixel counts."""
    windows, counts = [], []
    for index, mask in enumerate(masks):
        h, w = mask.shape
        if h < candidate_size or w < candidate_size:
            continue
        integral = np.pad(np.cumsum(np.cumsum(mask.astype(np.int64), axis=0), axis=1), ((1, 0), (1, 0)))
        rows = list(range(0, h - candidate_size + 1, stride))
        cols = list(range(0, w - candidate_size + 1, stride))
        if rows[-1] != h - candidate_size:
            rows.append(h - candidate_size)
        if cols[-1] != w - candidate_size:
            cols.append(w - candidate_size)
        for r in rows:
            for c in cols:
                s = candidate_size
                count = integral[r + s, c + s] - integral[r, c + s] - integral[r + s, c] + integral[r, c]
                windows.append((index, r, c))
                counts.append(count)
    return windows, np.asarray(counts, dtype=np.int64)


def sample_patch_locations(
    masks: List[np.ndarray],
    n_candidates: int,
    n_selected: int,
    candidate_size: int,
    generator: np.random.Generator,
    stride: int = 0,
) -> List[Tuple[int, int, int]]:
    """
    Importance-sample candidate windows by their inpainting pixel count.

    Windows below the 50% inclusion threshold are never chosen; the rest are
    drawn with replacement with probability proportional to their count.
    With `n_candidates` set, that many eligible windows are kept at random
    first. Returns (mask index, top, left) per selection.
    """
    stride = stride or max(1, candidate_size // 2)
    windows, counts = enumerate_candidates(masks, candidate_size, stride)
    if not windows:
        raise PatchSamplingError("mask too small for adversarial patching", candidate_size=candidate_size)
    area = candidate_size * candidate_size
    eligible = np.flatnonzero(candidate_probabilities(counts, area) > 0)
    if n_candidates and eligible.size > n_candidates:
        eligible = np.sort(generator.choice(eligible, size=n_candidates, replace=False))
    windows = [windows[i] for i in eligible]
    counts = counts[eligible]
    probabilities = candidate_probabilities(counts, area)
    picks = generator.choice(len(windows), size=n_selected, replace=True, p=probabilities)
    logger.debug(f"Selected {n_selected} of {int((probabilities > 0).sum())} eligible candidate windows")
    return [windows[i] for i in picks]


def slice_tiles(top_left: Tuple[int, int], candidate_size: int, patch_size: int) -> List[Tuple[int, int]]:
    """Non-overlapping discriminator-size tiles covering one candidate window."""
    top, left = top_left
    n = candidate_size // patch_size
    return [(top + i * patch_size, left + j * patch_size) for i in range(n) for j in range(n)]


def extract_patch(
    pixels: np.ndarray, mask: np.ndarray, image_id: int, top_left: Tuple[int, int], size: int, kind: str
) -> PatchSample:
    top, left = top_left
    return PatchSample(
        pixels=pixels[top : top + size, left : left + size],
        mask=mask[top : top + size, left : left + size],
        source_image_id=image_id,
        top_left=(top, left),
        kind=kind,
    )


def stack_patches(samples: List[PatchSample]) -> Tuple[torch.Tensor, torch.Tensor]:
    """(B, 3, P, P) float pixels and (B, P, P) bool masks."""
    pixels = torch.from_numpy(np.stack([s.pixels for s in samples])).permute(0, 3, 1, 2).contiguous()
    masks = torch.from_numpy(np.stack([s.mask for s in samples]))
    return pixels, masks
