"""
Procedural scene synthesis.

Scenes are a textured ground plane inside a textured enclosing sphere with
one or more removable primitives near the origin. Views are ray traced with a
single ray through each pixel centre; the object-free render is computed for
every pixel and objects are composited on top, so a view rendered with and
without objects agrees bit-exactly outside the object silhouette.
"""

from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from app.config.logger import Logger
from app.schemas.scene import (
    CameraModel,
    ObjectPrimitive,
    PosedImage,
    SceneDataset,
    SceneDescriptor,
    SceneSpec,
)
from app.services.errors import DegenerateOrbitError, EmptyMaskError, ImageUpdateError

logger = Logger.get_logger(__name__)

_HIT_EPS = 1e-6


def look_at_pose(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose (x right, y down, z forward) looking from eye at target."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    norm = np.linalg.norm(right)
    if norm < 1e-9:
        raise DegenerateOrbitError("camera forward axis is parallel to the up vector", eye=eye.tolist())
    right /= norm
    down = np.cross(forward, right)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, down, forward, eye
    return pose


def camera_rays(camera: CameraModel) -> Tuple[np.ndarray, np.ndarray]:
    """Per-pixel ray origins and unit directions, each (H, W, 3) float64."""
    rows, cols = np.meshgrid(
        np.arange(camera.height, dtype=np.float64) + 0.5,
        np.arange(camera.width, dtype=np.float64) + 0.5,
        indexing="ij",
    )
    directions_cam = np.stack(
        [(cols - camera.cx) / camera.focal, (rows - camera.cy) / camera.focal, np.ones_like(rows)],
        axis=-1,
    )
    directions = directions_cam @ camera.pose[:3, :3].T
    directions /= np.linalg.norm(directions, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.pose[:3, 3], directions.shape).copy()
    return origins, directions


def _mix(colors, weight: np.ndarray) -> np.ndarray:
    a, b = (np.asarray(c, dtype=np.float64) for c in colors)
    return a * (1.0 - weight[..., None]) + b * weight[..., None]


def _lambert(normals: np.ndarray, light: np.ndarray) -> np.ndarray:
    return 0.35 + 0.65 * np.clip(normals @ light, 0.0, None)


def _trace_background(
    descriptor: SceneDescriptor, origins: np.ndarray, directions: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Colour and hit distance of the ground plane / enclosing sphere."""
    light = np.asarray(descriptor.light_direction, dtype=np.float64)
    light /= np.linalg.norm(light)
    radius = descriptor.spec.env_radius

    b = np.sum(origins * directions, axis=-1)
    c = np.sum(origins * origins, axis=-1) - radius**2
    t_env = -b + np.sqrt(np.maximum(b * b - c, 0.0))

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(directions[..., 2] < -_HIT_EPS, -origins[..., 2] / directions[..., 2], np.inf)
    ground_point = origins + directions * np.where(np.isfinite(t_ground), t_ground, 0.0)[..., None]
    hits_ground = np.isfinite(t_ground) & (t_ground > _HIT_EPS) & (t_ground < t_env)

    freq = descriptor.ground_frequency
    pattern = 0.5 + 0.5 * np.sin(freq * ground_point[..., 0]) * np.sin(freq * ground_point[..., 1])
    pattern = 0.7 * pattern + 0.3 * (0.5 + 0.5 * np.sin(0.37 * freq * (ground_point[..., 0] + 2.0 * ground_point[..., 1])))
    ground_rgb = _mix(descriptor.ground_colors, pattern) * _lambert(
        np.broadcast_to(np.array([0.0, 0.0, 1.0]), ground_point.shape), light
    )[..., None]

    sky_point = origins + directions * t_env[..., None]
    elevation = np.clip(sky_point[..., 2] / radius, -1.0, 1.0)
    azimuth = np.arctan2(sky_point[..., 1], sky_point[..., 0])
    sky_pattern = 0.6 * (0.5 + 0.5 * elevation) + 0.4 * (0.5 + 0.5 * np.sin(descriptor.sky_frequency * azimuth) * np.cos(3.0 * elevation))
    sky_rgb = _mix(descriptor.sky_colors, sky_pattern)

    rgb = np.where(hits_ground[..., None], ground_rgb, sky_rgb)
    depth = np.where(hits_ground, t_ground, t_env)
    return np.clip(rgb, 0.0, 1.0), depth


def _intersect_sphere(obj: ObjectPrimitive, origins, directions):
    center = np.asarray(obj.center)
    oc = origins - center
    b = np.sum(oc * directions, axis=-1)
    c = np.sum(oc * oc, axis=-1) - obj.size**2
    disc = b * b - c
    sqrt_disc = np.sqrt(np.maximum(disc, 0.0))
    t = -b - sqrt_disc
    t = np.where(t > _HIT_EPS, t, -b + sqrt_disc)
    t = np.where((disc >= 0.0) & (t > _HIT_EPS), t, np.inf)
    points = origins + directions * np.where(np.isfinite(t), t, 0.0)[..., None]
    normals = (points - center) / obj.size
    return t, points, normals


def _intersect_box(obj: ObjectPrimitive, origins, directions):
    center = np.asarray(obj.center)
    lo, hi = center - obj.size, center + obj.size
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    t_near = np.nanmax(np.minimum(t0, t1), axis=-1)
    t_far = np.nanmin(np.maximum(t0, t1), axis=-1)
    t = np.where((t_far >= t_near) & (t_near > _HIT_EPS), t_near, np.inf)
    points = origins + directions * np.where(np.isfinite(t), t, 0.0)[..., None]
    local = (points - center) / obj.size
    axis = np.argmax(np.abs(local), axis=-1)
    normals = np.zeros_like(local)
    np.put_along_axis(normals, axis[..., None], np.sign(np.take_along_axis(local, axis[..., None], axis=-1)), axis=-1)
    return t, points, normals


def _trace_objects(descriptor: SceneDescriptor, origins, directions):
    """Nearest object hit: colour, distance (inf where missed)."""
    light = np.asarray(descriptor.light_direction, dtype=np.float64)
    light /= np.linalg.norm(light)
    best_t = np.full(origins.shape[:-1], np.inf)
    best_rgb = np.zeros(origins.shape)
    for obj in descriptor.objects:
        intersect = _intersect_sphere if obj.kind == "sphere" else _intersect_box
        t, points, normals = intersect(obj, origins, directions)
        stripes = 0.75 + 0.25 * np.sin(obj.stripe_frequency * points.sum(axis=-1))
        rgb = np.asarray(obj.color)[None, None, :] * stripes[..., None] * _lambert(normals, light)[..., None]
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_rgb = np.where(closer[..., None], rgb, best_rgb)
    return np.clip(best_rgb, 0.0, 1.0), best_t


def render_view(descriptor: SceneDescriptor, camera: CameraModel, with_objects: bool = True) -> dict:
    """
    Ray trace one view.

    Returns a dict with `pixels` (H, W, 3 float32), `depth` (H, W float32,
    metric distance along the unit ray), `silhouette` (H, W bool), plus the
    object-free `removed_pixels` / `removed_depth`.
    """
    origins, directions = camera_rays(camera)
    bg_rgb, bg_depth = _trace_background(descriptor, origins, directions)
    removed_pixels = bg_rgb.astype(np.float32)
    removed_depth = bg_depth.astype(np.float32)

    if with_objects and descriptor.objects:
        obj_rgb, obj_depth = _trace_objects(descriptor, origins, directions)
        silhouette = obj_depth < bg_depth
        pixels = np.where(silhouette[..., None], obj_rgb.astype(np.float32), removed_pixels)
        depth = np.where(silhouette, obj_depth.astype(np.float32), removed_depth)
    else:
        silhouette = np.zeros(bg_depth.shape, dtype=bool)
        pixels, depth = removed_pixels.copy(), removed_depth.copy()

    return {
        "pixels": pixels,
        "depth": depth,
        "silhouette": silhouette,
        "removed_pixels": removed_pixels,
        "removed_depth": removed_depth,
    }


def dilate_mask(silhouette: np.ndarray, radius: int) -> np.ndarray:
    """Dilate a silhouette with a disk of the given pixel radius."""
    if radius <= 0:
        return silhouette.copy()
    yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    disk = (yy * yy + xx * xx) <= radius * radius
    return ndimage.binary_dilation(silhouette, structure=disk)


def describe_scene(spec: SceneSpec) -> SceneDescriptor:
    """Draw the procedural scene content deterministically from the spec seed."""
    rng = np.random.default_rng(spec.seed)
    objects: List[ObjectPrimitive] = []
    size_range = (0.6, 0.9) if spec.n_objects <= 1 else (0.4, 0.65)
    for _ in range(spec.n_objects):
        for _attempt in range(64):
            size = float(rng.uniform(*size_range))
            angle = rng.uniform(0.0, 2.0 * np.pi)
            dist = rng.uniform(0.0, 0.5 if spec.n_objects <= 1 else 0.9)
            kind = "sphere" if rng.uniform() < 0.5 else "box"
            center = (float(dist * np.cos(angle)), float(dist * np.sin(angle)), size)
            clear = all(
                np.hypot(center[0] - o.center[0], center[1] - o.center[1]) > 1.05 * (size + o.size) for o in objects
            )
            if clear:
                break
        objects.append(
            ObjectPrimitive(
                kind=kind,
                center=center,
                size=size,
                color=tuple(float(c) for c in rng.uniform(0.25, 0.95, size=3)),
                stripe_frequency=float(rng.uniform(4.0, 10.0)),
            )
        )

    def _color_pair():
        return tuple(tuple(float(c) for c in rng.uniform(0.15, 0.9, size=3)) for _ in range(2))

    light = rng.normal(size=3)
    light[2] = abs(light[2]) + 1.0
    return SceneDescriptor(
        spec=spec,
        objects=objects,
        ground_colors=_color_pair(),
        ground_frequency=float(rng.uniform(3.0, 6.0)),
        sky_colors=_color_pair(),
        sky_frequency=float(rng.integers(3, 9)),
        light_direction=tuple(float(v) for v in light / np.linalg.norm(light)),
    )


def orbit_cameras(spec: SceneSpec, look_at=(0.0, 0.0, 0.3)) -> Tuple[List[CameraModel], List[CameraModel]]:
    """Train and test cameras on an interleaved orbit around the scene."""
    rng = np.random.default_rng(spec.seed + 1)
    focal = 0.5 * spec.resolution / np.tan(np.deg2rad(spec.field_of_view_deg) / 2.0)

    def _ring(n: int, offset: float) -> List[CameraModel]:
        cameras = []
        for i in range(n):
            azimuth = 2.0 * np.pi * (i + offset) / n
            height = spec.orbit_height + spec.orbit_height_jitter * rng.uniform(-1.0, 1.0)
            eye = np.array([spec.orbit_radius * np.cos(azimuth), spec.orbit_radius * np.sin(azimuth), height])
            cameras.append(
                CameraModel(
                    focal=float(focal),
                    cx=spec.resolution / 2.0,
                    cy=spec.resolution / 2.0,
                    width=spec.resolution,
                    height=spec.resolution,
                    pose=look_at_pose(eye, look_at),
                )
            )
        return cameras

    train = _ring(spec.n_train, 0.0)
    test = _ring(spec.n_test, 0.5)
    check_orbit(np.stack([c.center for c in train + test]), spec)
    return train, test


def check_orbit(centers: np.ndarray, spec: SceneSpec) -> None:
    """Reject camera sets whose centres are collinear (or coincident)."""
    centered = centers - centers.mean(axis=0)
    singular = np.linalg.svd(centered, compute_uv=False)
    if singular[1] <= 1e-9 * max(1.0, singular[0]):
        raise DegenerateOrbitError(
            "degenerate camera orbit: all views collinear",
            orbit_radius=spec.orbit_radius,
            n_views=len(centers),
        )


def synthesize_scene(spec: SceneSpec) -> SceneDataset:
    """Render a posed dataset: train views with objects + masks, test views with objects removed."""
    if spec.orbit_radius <= 0.0:
        raise DegenerateOrbitError("degenerate camera orbit: all views collinear", orbit_radius=spec.orbit_radius)
    descriptor = describe_scene(spec)
    train_cams, test_cams = orbit_cameras(spec, descriptor.look_at)
    radius = spec.effective_dilation
    logger.info(
        f"Synthesizing scene seed={spec.seed} objects={spec.n_objects} "
        f"views={spec.n_train}+{spec.n_test} res={spec.resolution} dilation={radius}"
    )

    images, split = [], {}
    for image_id, (camera, tag) in enumerate(
        [(c, "train") for c in train_cams] + [(c, "test") for c in test_cams]
    ):
        render = render_view(descriptor, camera, with_objects=True)
        mask = dilate_mask(render["silhouette"], radius)
        if not mask.any():
            raise EmptyMaskError("empty mask", image_id=image_id, n_objects=spec.n_objects)
        if mask.all():
            raise EmptyMaskError("mask covers the whole image", image_id=image_id)
        if tag == "train":
            pixels, depth = render["pixels"], render["depth"]
        else:
            pixels, depth = render["removed_pixels"], render["removed_depth"]
        # the silhouette never leaves the mask, so removed == rendered outside it
        images.append(
            PosedImage(
                image_id=image_id,
                pixels=pixels,
                mask=mask,
                camera=camera,
                gt_removed_pixels=render["removed_pixels"],
                gt_depth=depth,
                gt_removed_depth=render["removed_depth"],
            )
        )
        split[image_id] = tag
        logger.debug(f"view {image_id} ({tag}): mask coverage {mask.mean():.3f}")

    return SceneDataset(images=images, split=split, scene_descriptor=descriptor, revision=0)


def render_trajectory(descriptor: SceneDescriptor, n_frames: int, resolution: Optional[int] = None) -> List[dict]:
    """Object-removed frames along a smooth orbit arc, with cameras and depth."""
    spec = descriptor.spec
    resolution = resolution or spec.resolution
    focal = 0.5 * resolution / np.tan(np.deg2rad(spec.field_of_view_deg) / 2.0)
    frames = []
    for i in range(n_frames):
        azimuth = 2.0 * np.pi * i / max(n_frames, 1) * 0.5
        eye = np.array([spec.orbit_radius * np.cos(azimuth), spec.orbit_radius * np.sin(azimuth), spec.orbit_height])
        camera = CameraModel(
            focal=float(focal),
            cx=resolution / 2.0,
            cy=resolution / 2.0,
            width=resolution,
            height=resolution,
            pose=look_at_pose(eye, descriptor.look_at),
        )
        render = render_view(descriptor, camera, with_objects=False)
        frames.append({"camera": camera, "pixels": render["removed_pixels"], "depth": render["removed_depth"]})
    return frames


def update_image(ds: SceneDataset, image_id: int, new_pixels: np.ndarray, mask: np.ndarray) -> SceneDataset:
    """Return a new snapshot with one image's masked region replaced; revision + 1."""
    try:
        current = ds.get(image_id)
    except KeyError:
        raise ImageUpdateError(f"unknown image id {image_id}", image_id=image_id)

    new_pixels = np.asarray(new_pixels, dtype=np.float32)
    mask = np.asarray(mask, dtype=bool)
    if new_pixels.shape != current.pixels.shape:
        raise ImageUpdateError(
            "new pixels do not match the image resolution",
            image_id=image_id,
            expected=list(current.pixels.shape),
            got=list(new_pixels.shape),
        )
    if not np.array_equal(mask, current.mask):
        raise ImageUpdateError("mask differs from the stored mask", image_id=image_id)
    if not np.array_equal(new_pixels[~mask], current.pixels[~mask]):
        raise ImageUpdateError("non-mask pixels modified", image_id=image_id)
    if not np.all(np.isfinite(new_pixels)) or new_pixels.min() < 0.0 or new_pixels.max() > 1.0:
        raise ImageUpdateError("new pixels must be finite and in [0, 1]", image_id=image_id)

    updated = current.model_copy(update={"pixels": new_pixels.copy()})
    images = [updated if image.image_id == image_id else image for image in ds.images]
    return ds.model_copy(update={"images": images, "revision": ds.revision + 1})
