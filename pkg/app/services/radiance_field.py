"""
Volume rendering with proposal resampling.

Ray distances are handled in a normalized space `s` that is linear in inverse
metric distance (near -> 0, far -> 1). Proposal histograms and the final
histogram all live on that shared [0, 1] domain.
"""

from typing import Callable, List, NamedTuple, Optional, Tuple

import torch

from app.config.logger import Logger
from app.models.radiance_field import HashEncoding, NerfModel
from app.schemas.scene import CameraModel
from app.services.errors import RenderError
from app.services.scene_forge import camera_rays

logger = Logger.get_logger(__name__)


class RayHistogram(NamedTuple):
    """Per-ray bin edges in s, bin weights, and metric bin midpoints."""

    edges: torch.Tensor
    weights: torch.Tensor
    midpoints: torch.Tensor


class RenderOutput(NamedTuple):
    color: torch.Tensor
    depth: torch.Tensor
    histogram: RayHistogram
    proposal_histograms: List[RayHistogram]


def contract(points: torch.Tensor) -> torch.Tensor:
    """Identity inside the unit ball, (2 - 1/|x|) x/|x| outside."""
    mag_sq = torch.sum(points**2, dim=-1, keepdim=True).clamp_min(1e-32)
    return torch.where(mag_sq <= 1.0, points, ((2.0 * torch.sqrt(mag_sq) - 1.0) / mag_sq) * points)


def construct_ray_warps(t_near: float, t_far: float) -> Tuple[Callable, Callable]:
    """Maps between metric distance t and normalized inverse distance s."""
    s_near, s_far = 1.0 / t_near, 1.0 / t_far

    def t_to_s(t):
        return (1.0 / t - s_near) / (s_far - s_near)

    def s_to_t(s):
        return 1.0 / (s * s_far + (1.0 - s) * s_near)

    return t_to_s, s_to_t


def hash_encode(points: torch.Tensor, encoding: HashEncoding) -> torch.Tensor:
    """Encode contracted points in [-2, 2]^3."""
    return encoding((points + 2.0) / 4.0)


def hash_decay(model: NerfModel) -> torch.Tensor:
    """Mean squared hash-table entry over every level of every field."""
    tables = model.hash_tables()
    total = sum(torch.sum(table**2) for table in tables)
    count = sum(table.numel() for table in tables)
    return total / count


def _check_finite(sigma: torch.Tensor) -> None:
    if not torch.isfinite(sigma).all():
        bad = torch.nonzero(~torch.isfinite(sigma))[0].tolist()
        logger.error(f"Non-finite density at ray {bad[0]}, sample {bad[-1]}")
        raise RenderError(
            f"non-finite density at ray {bad[0]}, sample {bad[-1]}",
            ray=bad[0],
            sample=bad[-1],
        )


def render_weights(sigma: torch.Tensor, t_edges: torch.Tensor) -> torch.Tensor:
    """w_j = T_j (1 - exp(-sigma_j delta_j)), T_j = prod_{l<j} exp(-sigma_l delta_l)."""
    _check_finite(sigma)
    optical = sigma * (t_edges[..., 1:] - t_edges[..., :-1])
    alpha = 1.0 - torch.exp(-optical)
    transmittance = torch.exp(-torch.cumsum(torch.cat([torch.zeros_like(optical[..., :1]), optical[..., :-1]], -1), -1))
    return transmittance * alpha


def volume_render(
    sigma: torch.Tensor,
    rgb: torch.Tensor,
    t_edges: torch.Tensor,
    background: torch.Tensor,
    t_far: float,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Composite samples; residual mass goes to the background colour and to t_far."""
    weights = render_weights(sigma, t_edges)
    residual = 1.0 - weights.sum(dim=-1)
    midpoints = 0.5 * (t_edges[..., 1:] + t_edges[..., :-1])
    color = torch.sum(weights[..., None] * rgb, dim=-2) + residual[..., None] * background
    depth = torch.sum(weights * midpoints, dim=-1) + residual * t_far
    return color, depth, weights


def _stratified_positions(
    n_rays: int, n_edges: int, dtype, device, generator: Optional[torch.Generator]
) -> torch.Tensor:
    """Strictly ascending positions in [0, 1] with fixed endpoints; jittered when a generator is given."""
    base = torch.linspace(0.0, 1.0, n_edges, dtype=dtype, device=device).expand(n_rays, n_edges).clone()
    if generator is not None and n_edges > 2:
        jitter = torch.rand((n_rays, n_edges - 2), generator=generator, dtype=dtype, device=device) - 0.5
        base[:, 1:-1] = base[:, 1:-1] + jitter / (n_edges - 1)
    return base


def resample_edges(
    edges: torch.Tensor,
    weights: torch.Tensor,
    n_samples: int,
    floor: float,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """
    Inverse-CDF resampling of a histogram into `n_samples` new bins.

    A uniform floor keeps every bin's mass positive, so the CDF is strictly
    increasing and the returned edges are strictly ascending with endpoints
    exactly 0 and 1. Returned edges carry no gradient.
    """
    edges = edges.detach()
    weights = weights.detach().clamp_min(0.0)
    widths = edges[..., 1:] - edges[..., :-1]
    pdf = weights / weights.sum(dim=-1, keepdim=True).clamp_min(1e-12)
    pdf = (1.0 - floor) * pdf + floor * widths
    cdf = torch.cumsum(pdf, dim=-1)
    cdf = torch.cat([torch.zeros_like(cdf[..., :1]), cdf / cdf[..., -1:]], dim=-1)

    u = _stratified_positions(edges.shape[0], n_samples + 1, edges.dtype, edges.device, generator)
    idx = torch.searchsorted(cdf.contiguous(), u.contiguous(), right=True).clamp(1, cdf.shape[-1] - 1)
    cdf_lo, cdf_hi = torch.gather(cdf, -1, idx - 1), torch.gather(cdf, -1, idx)
    s_lo, s_hi = torch.gather(edges, -1, idx - 1), torch.gather(edges, -1, idx)
    frac = ((u - cdf_lo) / (cdf_hi - cdf_lo).clamp_min(1e-12)).clamp(0.0, 1.0)
    resampled = s_lo + frac * (s_hi - s_lo)
    resampled[..., 0], resampled[..., -1] = 0.0, 1.0
    return resampled


def _unit_points(model: NerfModel, origins, directions, t_mid) -> torch.Tensor:
    points = origins[..., None, :] + directions[..., None, :] * t_mid[..., None]
    return (contract(points / model.config.scene_scale) + 2.0) / 4.0


def render_rays(
    model: NerfModel,
    origins: torch.Tensor,
    directions: torch.Tensor,
    generator: Optional[torch.Generator] = None,
) -> RenderOutput:
    """
    Render a batch of rays (B, 3).

    Two proposal rounds resample the histogram before the main field is
    evaluated. Passing a generator jitters the sample positions.
    """
    config = model.config
    _, s_to_t = construct_ray_warps(config.near, config.far)
    n_rays = origins.shape[0]
    dtype = origins.dtype

    edges = _stratified_positions(n_rays, config.samples[0] + 1, dtype, origins.device, generator)
    proposal_histograms = []
    for stage, proposal in enumerate(model.proposals):
        t_edges = s_to_t(edges)
        t_mid = 0.5 * (t_edges[..., 1:] + t_edges[..., :-1])
        sigma = proposal.density(_unit_points(model, origins, directions, t_mid))
        weights = render_weights(sigma, t_edges)
        proposal_histograms.append(RayHistogram(edges, weights, t_mid))
        edges = resample_edges(edges, weights, config.samples[stage + 1], config.resample_floor, generator)

    t_edges = s_to_t(edges)
    t_mid = 0.5 * (t_edges[..., 1:] + t_edges[..., :-1])
    sigma, rgb = model.field(_unit_points(model, origins, directions, t_mid), directions[..., None, :])
    color, depth, weights = volume_render(sigma, rgb, t_edges, model.background.to(dtype), config.far)
    return RenderOutput(color, depth, RayHistogram(edges, weights, t_mid), proposal_histograms)


def render_ray(
    model: NerfModel, origin: torch.Tensor, direction: torch.Tensor, generator: Optional[torch.Generator] = None
) -> RenderOutput:
    """Render a single ray; outputs drop the batch dimension."""
    norm = float(torch.linalg.norm(direction.detach()))
    if abs(norm - 1.0) > 1e-5:
        raise RenderError(f"ray direction must be unit length, got norm {norm:.6f}")
    out = render_rays(model, origin[None], direction[None], generator)

    def _squeeze(h: RayHistogram) -> RayHistogram:
        return RayHistogram(h.edges[0], h.weights[0], h.midpoints[0])

    return RenderOutput(
        out.color[0], out.depth[0], _squeeze(out.histogram), [_squeeze(h) for h in out.proposal_histograms]
    )


def camera_ray_tensors(camera: CameraModel, dtype=torch.float32) -> Tuple[torch.Tensor, torch.Tensor]:
    """Per-pixel rays of a camera as (H*W, 3) tensors."""
    origins, directions = camera_rays(camera)
    return (
        torch.from_numpy(origins.reshape(-1, 3)).to(dtype),
        torch.from_numpy(directions.reshape(-1, 3)).to(dtype),
    )


@torch.no_grad()
def render_image(model: NerfModel, camera: CameraModel, chunk: int = 8192) -> dict:
    """Render a full view deterministically; returns numpy `rgb` (H, W, 3) and `depth` (H, W)."""
    dtype = next(model.parameters()).dtype
    origins, directions = camera_ray_tensors(camera, dtype)
    colors, depths = [], []
    for start in range(0, origins.shape[0], chunk):
        out = render_rays(model, origins[start : start + chunk], directions[start : start + chunk])
        colors.append(out.color)
        depths.append(out.depth)
    rgb = torch.cat(colors).clamp(0.0, 1.0).reshape(camera.height, camera.width, 3)
    depth = torch.cat(depths).reshape(camera.height, camera.width)
    return {"rgb": rgb.float().numpy(), "depth": depth.float().numpy()}
