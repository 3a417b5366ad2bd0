"""
Evaluation protocols over frozen proxy feature extractors.

Scores follow the standard protocols (masked perceptual distance, Frechet and
kernel distances on full views and corner crops, ten-frame clip distances and
flow-warp consistency) but use fixed-seed random networks, so values are only
comparable between runs that share an extractor seed.
"""

from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy import linalg

from app.config.logger import Logger
from app.models.extractors import FeatureExtractor, VideoFeatureExtractor, perceptual_distance
from app.schemas.metrics import CornerCrops, EvalConfig, MetricReport, MetricValues, Provenance
from app.schemas.scene import CameraModel, SceneDataset
from app.services.errors import MetricError
from app.services.radiance_field import render_image
from app.services.scene_forge import camera_rays, render_trajectory
from app.services.trainer import load_field

logger = Logger.get_logger(__name__)

COVARIANCE_EPS = 1e-6
CLIP_LENGTH = 10


def _batch(images: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack([np.asarray(i, dtype=np.float32) for i in images])).permute(0, 3, 1, 2)


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise MetricError(f"image dims differ: {np.shape(a)} vs {np.shape(b)}")


@torch.no_grad()
def pproxy(a: np.ndarray, b: np.ndarray, extractor: FeatureExtractor) -> float:
    """Perceptual proxy distance between two H x W x 3 images."""
    _check_pair(a, b)
    return float(perceptual_distance(extractor, _batch([a]), _batch([b]))[0])


def m_pproxy(a: np.ndarray, b: np.ndarray, mask: np.ndarray, extractor: FeatureExtractor) -> float:
    """Perceptual proxy distance after zeroing both images outside `mask`."""
    _check_pair(a, b)
    keep = np.asarray(mask, dtype=bool)[..., None]
    return pproxy(np.where(keep, a, 0.0), np.where(keep, b, 0.0), extractor)


def _covariance(features: np.ndarray) -> np.ndarray:
    return np.atleast_2d(np.cov(features, rowvar=False))


def _trace_sqrt_product(cov_a: np.ndarray, cov_b: np.ndarray) -> float:
    """tr((A^1/2 B A^1/2)^1/2) through symmetric eigendecompositions."""
    values, vectors = linalg.eigh(cov_a)
    root_a = (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T
    middle = root_a @ cov_b @ root_a
    middle = 0.5 * (middle + middle.T)
    return float(np.sum(np.sqrt(np.clip(linalg.eigvalsh(middle), 0.0, None))))


def frechet_distance(features_a: np.ndarray, features_b: np.ndarray) -> Tuple[float, bool]:
    """
    Frechet distance between Gaussian fits of two feature sets.

    Both covariances get +1e-6 I; the flag reports whether either was
    singular before that.
    """
    features_a = np.asarray(features_a, dtype=np.float64)
    features_b = np.asarray(features_b, dtype=np.float64)
    if features_a.shape[0] < 2 or features_b.shape[0] < 2:
        raise MetricError("Frechet distance needs at least 2 samples per set")
    dim = features_a.shape[1]
    cov_a, cov_b = _covariance(features_a), _covariance(features_b)
    singular = min(linalg.eigvalsh(cov_a).min(), linalg.eigvalsh(cov_b).min()) < 1e-10
    cov_a = cov_a + COVARIANCE_EPS * np.eye(dim)
    cov_b = cov_b + COVARIANCE_EPS * np.eye(dim)
    mean_term = float(np.sum((features_a.mean(axis=0) - features_b.mean(axis=0)) ** 2))
    # averaged over both orders so the score is exactly symmetric
    cross = 0.5 * (_trace_sqrt_product(cov_a, cov_b) + _trace_sqrt_product(cov_b, cov_a))
    return mean_term + float(np.trace(cov_a) + np.trace(cov_b)) - 2.0 * cross, bool(singular)


def kernel_distance(features_a: np.ndarray, features_b: np.ndarray, block_size: int = 50) -> float:
    """
    Unbiased MMD^2 with the cubic polynomial kernel (x.y / d + 1)^3, averaged
    over aligned blocks of equal size.
    """
    features_a = np.asarray(features_a, dtype=np.float64)
    features_b = np.asarray(features_b, dtype=np.float64)
    m = min(block_size, features_a.shape[0], features_b.shape[0])
    if m < 2:
        raise MetricError("kernel distance needs at least 2 samples per block")
    dim = features_a.shape[1]
    n_blocks = min(features_a.shape[0], features_b.shape[0]) // m
    scores = []
    for block in range(n_blocks):
        x = features_a[block * m : (block + 1) * m]
        y = features_b[block * m : (block + 1) * m]
        k_xx = (x @ x.T / dim + 1.0) ** 3
        k_yy = (y @ y.T / dim + 1.0) ** 3
        k_xy = (x @ y.T / dim + 1.0) ** 3
        h = k_xx + k_yy - k_xy - k_xy.T
        scores.append((h.sum() - np.trace(h)) / (m * (m - 1)))
    return float(np.mean(scores))


@torch.no_grad()
def image_features(images: Sequence[np.ndarray], extractor: FeatureExtractor) -> np.ndarray:
    return extractor.pooled(_batch(images)).double().numpy()


def fid_proxy(set_a: Sequence[np.ndarray], set_b: Sequence[np.ndarray], extractor: FeatureExtractor) -> float:
    value, _ = frechet_distance(image_features(set_a, extractor), image_features(set_b, extractor))
    return value


def kid_proxy(set_a: Sequence[np.ndarray], set_b: Sequence[np.ndarray], extractor: FeatureExtractor) -> float:
    return kernel_distance(image_features(set_a, extractor), image_features(set_b, extractor))


def corner_crops(mask: np.ndarray, crop_size: int, mode: str = "quadrant") -> CornerCrops:
    """
    Crop windows centred on four extreme mask pixels.

    `quadrant` picks, in each quadrant around the mask centroid, the pixel
    farthest from the centroid (ties go to the smallest (row, col)); empty
    quadrants fall back to the globally farthest pixel and set `warning`.
    `bbox` uses the corners of the mask's bounding box.
    """
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    if crop_size > min(h, w):
        raise MetricError(f"crop size {crop_size} exceeds image {h}x{w}")
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise MetricError("corner crops of an empty mask")

    warning = rows.size < 4
    if mode == "bbox":
        r0, r1, c0, c1 = rows.min(), rows.max(), cols.min(), cols.max()
        corners = [(r0, c0), (r0, c1), (r1, c0), (r1, c1)]
    elif mode == "quadrant":
        cr, cc = rows.mean(), cols.mean()
        distance = (rows - cr) ** 2 + (cols - cc) ** 2
        farthest = int(np.argmax(distance))
        quadrants = [
            (rows < cr) & (cols < cc),
            (rows < cr) & (cols >= cc),
            (rows >= cr) & (cols < cc),
            (rows >= cr) & (cols >= cc),
        ]
        corners = []
        for members in quadrants:
            if members.any():
                index = int(np.flatnonzero(members)[np.argmax(distance[members])])
            else:
                index, warning = farthest, True
            corners.append((rows[index], cols[index]))
    else:
        raise MetricError(f"unknown corner mode '{mode}'", valid=["quadrant", "bbox"])

    if warning:
        logger.warning(f"Corner crops degenerate for a mask of {rows.size} pixels")
    half = crop_size // 2
    windows = [
        (int(min(max(r - half, 0), h - crop_size)), int(min(max(c - half, 0), w - crop_size))) for r, c in corners
    ]
    return CornerCrops(
        corners=[(int(r), int(c)) for r, c in corners], windows=windows, crop_size=crop_size, warning=warning
    )


def crop(image: np.ndarray, top_left: Tuple[int, int], size: int) -> np.ndarray:
    top, left = top_left
    return image[top : top + size, left : left + size]


def clip_starts(n_frames: int, stride: int = 5, length: int = CLIP_LENGTH) -> List[int]:
    if n_frames < length:
        return []
    return list(range(0, n_frames - length + 1, stride))


@torch.no_grad()
def clip_features(
    sequences: Sequence[np.ndarray], extractor: VideoFeatureExtractor, stride: int = 5
) -> Tuple[np.ndarray, int]:
    """Pooled features of every ten-frame clip; returns (features, skipped scene count)."""
    features, skipped = [], 0
    for frames in sequences:
        starts = clip_starts(len(frames), stride)
        if not starts:
            logger.warning(f"Skipping sequence of {len(frames)} frames (shorter than {CLIP_LENGTH})")
            skipped += 1
            continue
        video = torch.from_numpy(np.asarray(frames, dtype=np.float32)).permute(3, 0, 1, 2)
        clips = torch.stack([video[:, s : s + CLIP_LENGTH] for s in starts])
        features.append(extractor.pooled(clips).double().numpy())
    if not features:
        return np.zeros((0, sum(extractor.widths))), skipped
    return np.concatenate(features), skipped


def fvd_proxy(
    real_sequences: Sequence[np.ndarray],
    fake_sequences: Sequence[np.ndarray],
    extractor: VideoFeatureExtractor,
    stride: int = 5,
) -> Tuple[float, bool]:
    """
    Frechet distance between ten-frame clip features of real and fake sequences.

    Returns (value, singular) like `frechet_distance`; a trajectory yields far
    fewer clips than the feature width, so the covariances are usually
    regularized.
    """
    real, _ = clip_features(real_sequences, extractor, stride)
    fake, _ = clip_features(fake_sequences, extractor, stride)
    if real.shape[0] < 2 or fake.shape[0] < 2:
        raise MetricError("video distance needs at least 2 clips per side", real=real.shape[0], fake=fake.shape[0])
    return frechet_distance(real, fake)


def warp_backward(image: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Sample `image` at (x + flow_x, y + flow_y) for every pixel, bilinear, border clamped."""
    h, w = image.shape[:2]
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    x = (cols + flow[..., 0]) / max(w - 1, 1) * 2.0 - 1.0
    y = (rows + flow[..., 1]) / max(h - 1, 1) * 2.0 - 1.0
    grid = torch.from_numpy(np.stack([x, y], axis=-1))[None]
    source = torch.from_numpy(np.asarray(image, dtype=np.float64)).permute(2, 0, 1)[None]
    warped = F.grid_sample(source, grid, mode="bilinear", padding_mode="border", align_corners=True)
    return warped[0].permute(1, 2, 0).numpy()


def flow_consistency(frames: np.ndarray, flows: np.ndarray, covisible: np.ndarray) -> float:
    """
    Mean over t of the masked mean absolute error between frame t and frame
    t + 1 warped back along the t -> t + 1 flow.
    """
    errors = []
    for t in range(len(frames) - 1):
        warped = warp_backward(frames[t + 1], flows[t])
        error = np.abs(np.asarray(frames[t], dtype=np.float64) - warped).mean(axis=-1)
        mask = np.asarray(covisible[t], dtype=bool)
        errors.append(float(error[mask].mean()) if mask.any() else 0.0)
    return float(np.mean(errors)) if errors else 0.0


def _project(points: np.ndarray, camera: CameraModel) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """World points -> (col, row) pixel-index coordinates and camera-space z."""
    rotation, center = camera.pose[:3, :3], camera.pose[:3, 3]
    local = (points - center) @ rotation
    z = local[..., 2]
    safe = np.where(np.abs(z) > 1e-12, z, 1e-12)
    col = camera.focal * local[..., 0] / safe + camera.cx - 0.5
    row = camera.focal * local[..., 1] / safe + camera.cy - 0.5
    return col, row, z


def geometric_flow(depth: np.ndarray, camera: CameraModel, next_camera: CameraModel) -> np.ndarray:
    """Exact (dx, dy) flow from a view with known ray depth to the next camera."""
    origins, directions = camera_rays(camera)
    points = origins + directions * np.asarray(depth, dtype=np.float64)[..., None]
    col, row, _ = _project(points, next_camera)
    rows, cols = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    return np.stack([col - cols, row - rows], axis=-1)


def covisibility_mask(
    depth: np.ndarray,
    next_depth: np.ndarray,
    camera: CameraModel,
    next_camera: CameraModel,
    tolerance: float = 0.02,
) -> np.ndarray:
    """Pixels whose surface point lands inside the next view unoccluded (relative depth tolerance)."""
    origins, directions = camera_rays(camera)
    points = origins + directions * np.asarray(depth, dtype=np.float64)[..., None]
    col, row, z = _project(points, next_camera)
    h, w = next_depth.shape
    inside = (z > 0) & (col >= 0) & (col <= w - 1) & (row >= 0) & (row <= h - 1)
    r = np.clip(np.rint(row), 0, h - 1).astype(int)
    c = np.clip(np.rint(col), 0, w - 1).astype(int)
    distance = np.linalg.norm(points - next_camera.pose[:3, 3], axis=-1)
    visible = np.abs(distance - next_depth[r, c]) <= tolerance * np.maximum(distance, 1e-6)
    return inside & visible


def seam_energy(image: np.ndarray, mask: np.ndarray) -> float:
    """Mean colour jump over adjacent pixel pairs that straddle the mask boundary."""
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    jumps = []
    for axis in (0, 1):
        a = np.take(image, np.arange(image.shape[axis] - 1), axis=axis)
        b = np.take(image, np.arange(1, image.shape[axis]), axis=axis)
        ma = np.take(mask, np.arange(mask.shape[axis] - 1), axis=axis)
        mb = np.take(mask, np.arange(1, mask.shape[axis]), axis=axis)
        straddle = ma != mb
        jumps.append(np.abs(a - b).mean(axis=-1)[straddle])
    jumps = np.concatenate(jumps)
    return float(jumps.mean()) if jumps.size else 0.0


def psnr_masked(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """PSNR over masked pixels, capped at 100 dB."""
    _check_pair(a, b)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise MetricError("PSNR over an empty mask")
    mse = float(np.mean((np.asarray(a, dtype=np.float64)[mask] - np.asarray(b, dtype=np.float64)[mask]) ** 2))
    return float(-10.0 * np.log10(max(mse, 1e-10)))


def _trajectory(model, dataset: SceneDataset, settings: EvalConfig):
    """(real frames, fake frames, flows, covisibility) for the video metrics."""
    if dataset.scene_descriptor is not None:
        frames = render_trajectory(dataset.scene_descriptor, settings.trajectory_frames)
        cameras = [f["camera"] for f in frames]
        real = np.stack([f["pixels"] for f in frames])
        depths = [f["depth"] for f in frames]
    else:
        views = dataset.test_images()
        cameras = [v.camera for v in views]
        real = np.stack([v.gt_removed_pixels for v in views])
        depths = [v.gt_removed_depth for v in views]
    fake = np.stack([render_image(model, camera)["rgb"] for camera in cameras])
    flows, covisible = [], []
    if all(d is not None for d in depths):
        for t in range(len(cameras) - 1):
            flows.append(geometric_flow(depths[t], cameras[t], cameras[t + 1]))
            covisible.append(covisibility_mask(depths[t], depths[t + 1], cameras[t], cameras[t + 1]))
    return real, fake, flows, covisible


def evaluate(checkpoint: Path, dataset: SceneDataset, settings: Optional[EvalConfig] = None) -> MetricReport:
    """Render every test view from `checkpoint` and score it against the object-free ground truth."""
    settings = settings or EvalConfig()
    tests = dataset.test_images()
    if not tests:
        raise MetricError("dataset has no test views")
    missing = [v.image_id for v in tests if v.gt_removed_pixels is None]
    if missing:
        raise MetricError(f"test views without object-removed ground truth: {missing}", image_ids=missing)

    model, state = load_field(checkpoint)
    extractor = FeatureExtractor(seed=settings.extractor_seed)
    renders = [render_image(model, view.camera)["rgb"] for view in tests]
    truths = [view.gt_removed_pixels for view in tests]
    masks = [view.mask for view in tests]
    regularized, warnings = [], []

    fid, fid_singular = frechet_distance(image_features(renders, extractor), image_features(truths, extractor))
    if fid_singular:
        regularized.append("fid_proxy")

    fake_crops, real_crops = [], []
    for render, truth, mask in zip(renders, truths, masks):
        crops = corner_crops(mask, settings.crop_size, settings.corner_mode)
        if crops.warning:
            warnings.append("corner crops degenerate on a small mask")
        fake_crops.extend(crop(render, w, settings.crop_size) for w in crops.windows)
        real_crops.extend(crop(truth, w, settings.crop_size) for w in crops.windows)
    cfid, cfid_singular = frechet_distance(image_features(fake_crops, extractor), image_features(real_crops, extractor))
    if cfid_singular:
        regularized.append("cfid_proxy")

    real_frames, fake_frames, flows, covisible = _trajectory(model, dataset, settings)
    video = VideoFeatureExtractor(seed=settings.extractor_seed)
    fvd = None
    try:
        fvd, fvd_singular = fvd_proxy([real_frames], [fake_frames], video, settings.clip_stride)
        if fvd_singular:
            regularized.append("fvd_proxy")
    except MetricError as e:
        warnings.append(f"fvd_proxy unavailable: {e.message}")
        logger.warning(f"fvd_proxy unavailable: {e.message}")
    if regularized:
        logger.warning(f"Regularized a singular covariance for: {', '.join(regularized)}")
    flow = flow_consistency(fake_frames, flows, covisible) if flows else None
    if flow is None:
        warnings.append("flow_consistency unavailable: no ground-truth depth along the trajectory")

    values = MetricValues(
        psnr_masked=float(np.mean([psnr_masked(r, t, m) for r, t, m in zip(renders, truths, masks)])),
        pproxy=float(np.mean([pproxy(r, t, extractor) for r, t in zip(renders, truths)])),
        m_pproxy=float(np.mean([m_pproxy(r, t, m, extractor) for r, t, m in zip(renders, truths, masks)])),
        fid_proxy=fid,
        kid_proxy=kid_proxy(renders, truths, extractor) if len(renders) >= 2 else 0.0,
        cfid_proxy=cfid,
        ckid_proxy=kernel_distance(
            image_features(fake_crops, extractor), image_features(real_crops, extractor), settings.kid_block
        ),
        fvd_proxy=fvd,
        flow_consistency=flow,
        seam=float(np.mean([seam_energy(r, m) for r, m in zip(renders, masks)])),
    )
    report = MetricReport(
        values=values,
        provenance=Provenance(
            checkpoint_id=state.checkpoint_id or Path(checkpoint).name,
            dataset_revision=state.dataset_revision,
            extractor_seed=settings.extractor_seed,
            iteration=state.iteration,
        ),
        regularized=regularized,
        warnings=sorted(set(warnings)),
    )
    logger.info(
        f"Evaluated {report.provenance.checkpoint_id}: psnr_masked={values.psnr_masked:.2f} "
        f"m_pproxy={values.m_pproxy:.4f} fid_proxy={values.fid_proxy:.4f}"
    )
    return report
