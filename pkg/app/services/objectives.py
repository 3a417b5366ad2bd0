"""
Reconstruction and depth losses.

Histogram regularizers take bin edges `s` (n + 1, ascending, in [0, 1]) and
weights `w` (n) with any leading batch dimensions and average over rays.
"""

from typing import Tuple

import numpy as np
import torch
from pydantic import BaseModel, Field

from app.config.logger import Logger
from app.schemas.scene import PosedImage
from app.services.errors import DegenerateDepthPriorError, LossInputError

logger = Logger.get_logger(__name__)

INTERLEVEL_EPS = 1e-7
MIN_ALIGNMENT_PIXELS = 32


def pixel_loss(rendered: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over pixels and channels."""
    if rendered.numel() == 0:
        raise LossInputError("pixel loss on an empty pixel set")
    if rendered.shape != target.shape:
        raise LossInputError(f"pixel set shapes differ: {tuple(rendered.shape)} vs {tuple(target.shape)}")
    return torch.mean((rendered - target) ** 2)


def proposal_bound(s: torch.Tensor, s_hat: torch.Tensor, w_hat: torch.Tensor) -> torch.Tensor:
    """
    For each bin of `s`, the summed proposal weight of every proposal bin that
    overlaps it with positive length.
    """
    cumulative = torch.cat([torch.zeros_like(w_hat[..., :1]), torch.cumsum(w_hat, dim=-1)], dim=-1)
    lo, hi = s[..., :-1].contiguous(), s[..., 1:].contiguous()
    # proposal bins ending at or before the final bin's start
    first = torch.searchsorted(s_hat[..., 1:].contiguous(), lo, right=True)
    # proposal bins starting before the final bin's end
    last = torch.searchsorted(s_hat[..., :-1].contiguous(), hi, right=False)
    last = torch.maximum(last, first)
    return torch.gather(cumulative, -1, last) - torch.gather(cumulative, -1, first)


def interlevel_loss(s: torch.Tensor, w: torch.Tensor, s_hat: torch.Tensor, w_hat: torch.Tensor) -> torch.Tensor:
    """
    Penalizes final weights that exceed the proposal's overlap mass:
    sum_i max(0, w_i - bound_i)^2 / (w_i + eps), averaged over rays.

    Gradients reach the proposal weights only; zero-width final bins are skipped.
    """
    w = w.detach()
    s = s.detach()
    bound = proposal_bound(s, s_hat.detach(), w_hat)
    per_bin = torch.clamp(w - bound, min=0.0) ** 2 / (w + INTERLEVEL_EPS)
    per_bin = torch.where(s[..., 1:] > s[..., :-1], per_bin, torch.zeros_like(per_bin))
    return per_bin.sum(dim=-1).mean()


def distortion_loss(s: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """sum_ij w_i w_j |m_i - m_j| + 1/3 sum_i w_i^2 delta_i, averaged over rays."""
    mid = 0.5 * (s[..., 1:] + s[..., :-1])
    gaps = torch.abs(mid[..., :, None] - mid[..., None, :])
    inter = torch.sum(w * torch.sum(w[..., None, :] * gaps, dim=-1), dim=-1)
    intra = torch.sum(w**2 * (s[..., 1:] - s[..., :-1]), dim=-1) / 3.0
    return (inter + intra).mean()


class DepthAlignment(BaseModel):
    """Affine map d_hat = a * d_tilde + b fitted on reconstruction pixels."""

    a: float
    b: float
    residual: float = Field(..., ge=0)
    n_fit: int = Field(..., ge=2)

    def apply(self, depth: np.ndarray) -> np.ndarray:
        return self.a * np.asarray(depth, dtype=np.float64) + self.b


def solve_shift_scale(estimated: np.ndarray, rendered: np.ndarray, fit_mask: np.ndarray) -> DepthAlignment:
    """Least-squares (a, b) minimizing sum over fit pixels of (a * estimated + b - rendered)^2."""
    fit_mask = np.asarray(fit_mask, dtype=bool)
    x = np.asarray(estimated, dtype=np.float64)[fit_mask]
    y = np.asarray(rendered, dtype=np.float64)[fit_mask]
    if x.size < 2:
        raise DegenerateDepthPriorError("degenerate depth prior", n_fit=int(x.size))
    spread = np.max(np.abs(x - x.mean()))
    if not np.isfinite(spread) or spread <= 1e-12 * max(1.0, float(np.abs(x).max())):
        raise DegenerateDepthPriorError("degenerate depth prior", n_fit=int(x.size))

    design = np.stack([x, np.ones_like(x)], axis=1)
    a, b = np.linalg.solve(design.T @ design, design.T @ y)
    residual = float(np.sqrt(np.mean((a * x + b - y) ** 2)))
    return DepthAlignment(a=float(a), b=float(b), residual=residual, n_fit=int(x.size))


def fit_view_alignment(
    estimated: np.ndarray, rendered: np.ndarray, recon_mask: np.ndarray, min_fit: int = MIN_ALIGNMENT_PIXELS
) -> DepthAlignment:
    """
    Shift-scale fit over a whole view's reconstruction region.

    Rejects fits on fewer than `min_fit` pixels and fits with a <= 0, which
    would invert the prior's depth ordering inside the mask.
    """
    n_fit = int(np.count_nonzero(recon_mask))
    if n_fit < min_fit:
        raise DegenerateDepthPriorError(
            f"depth alignment needs {min_fit} reconstruction pixels, got {n_fit}", n_fit=n_fit
        )
    alignment = solve_shift_scale(estimated, rendered, recon_mask)
    if not alignment.a > 0:
        raise DegenerateDepthPriorError(
            f"depth alignment reverses the prior ordering (a = {alignment.a:.4g})", a=alignment.a, n_fit=n_fit
        )
    return alignment


def depth_ranking_loss(
    rendered: torch.Tensor,
    prior: torch.Tensor,
    pairs: Tuple[torch.Tensor, torch.Tensor],
    margin: float,
) -> Tuple[torch.Tensor, bool]:
    """
    Mean over pairs of max(0, d_near - d_far + margin), where near/far are
    taken from the prior ordering. Tied prior pairs are dropped.

    Returns (loss, empty) where `empty` flags that no usable pair remained.
    """
    i, j = pairs
    prior_i, prior_j = prior[i], prior[j]
    keep = prior_i != prior_j
    if not bool(keep.any()):
        logger.warning("Depth ranking loss received no usable pairs")
        return rendered.sum() * 0.0, True
    near = torch.where(prior_i < prior_j, i, j)[keep]
    far = torch.where(prior_i < prior_j, j, i)[keep]
    return torch.clamp(rendered[near] - rendered[far] + margin, min=0.0).mean(), False


def sample_depth_pairs(
    mask: np.ndarray, n_pairs: int, window: int, generator: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Flat pixel-index pairs with both endpoints inside `mask` and at most
    `window // 2` pixels apart on each axis. May return fewer than `n_pairs`
    when the mask is too thin to place them.
    """
    h, w = mask.shape
    rows, cols = np.nonzero(mask)
    if rows.size < 2:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    half = max(1, window // 2)
    firsts, seconds = [], []
    needed = n_pairs
    for _ in range(8):
        pick = generator.integers(0, rows.size, size=2 * needed)
        dr = generator.integers(-half, half + 1, size=2 * needed)
        dc = generator.integers(-half, half + 1, size=2 * needed)
        r2, c2 = rows[pick] + dr, cols[pick] + dc
        inside = (r2 >= 0) & (r2 < h) & (c2 >= 0) & (c2 < w)
        inside[inside] = mask[r2[inside], c2[inside]]
        inside &= (dr != 0) | (dc != 0)
        firsts.append(rows[pick][inside] * w + cols[pick][inside])
        seconds.append(r2[inside] * w + c2[inside])
        needed = n_pairs - sum(len(f) for f in firsts)
        if needed <= 0:
            break
    first = np.concatenate(firsts)[:n_pairs].astype(np.int64)
    second = np.concatenate(seconds)[:n_pairs].astype(np.int64)
    return first, second


class DepthOracle:
    """
    Stand-in monocular depth estimator.

    Returns the scene's object-free depth inside the mask (ground-truth depth
    elsewhere) under a global affine distortion plus Gaussian noise.
    """

    def __init__(self, seed: int = 0, noise: float = 0.01, scale: float = 0.5, shift: float = 0.3):
        self.seed = seed
        self.noise = noise
        self.scale = scale
        self.shift = shift

    def estimate(self, image: PosedImage, revision: int = 0) -> np.ndarray:
        if image.gt_depth is None:
            raise DegenerateDepthPriorError("depth oracle needs ground-truth depth", image_id=image.image_id)
        base = image.gt_depth.astype(np.float64)
        if image.gt_removed_depth is not None:
            base = np.where(image.mask, image.gt_removed_depth, base)
        rng = np.random.default_rng([self.seed, image.image_id, revision])
        return self.scale * base + self.shift + self.noise * rng.standard_normal(base.shape)


def ranking_margin(near: float, far: float, fraction: float = 1e-4) -> float:
    """Default ranking margin: a small fraction of the depth range."""
    return fraction * (far - near)
