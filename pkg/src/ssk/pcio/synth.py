"""Synthetic desk-scale scenes: hollow objects sampled on their visible surfaces plus ground clutter."""

import logging
import math
from collections.abc import Sequence

import numpy as np

from ssk.geom.boxes import CLASS_NAMES, Box3D
from ssk.geom.iou import bev_intersection
from ssk.geom.voxel_spec import VoxelSpec
from ssk.pcio.formats import PointCloud, Scene

logger = logging.getLogger(__name__)

# Canonical (l, w, h) per class, matching the anchor sizes
CLASS_SIZES: dict[int, tuple[float, float, float]] = {
    0: (3.9, 1.6, 1.56),
    1: (0.8, 0.6, 1.73),
    2: (1.76, 0.6, 1.73),
}
SIZE_JITTER = 0.1
GROUND_Z = -1.78
POINTS_PER_M2 = 12.0
REFERENCE_RANGE = 5.0
MIN_OBJECT_POINTS = 8
CLUTTER_POINTS = 300
CLUTTER_DEPTH = 0.3
# Clutter stays this far under the ground so no box claims it
CLUTTER_GAP = 1e-3
PLACEMENT_ATTEMPTS = 200
DEFAULT_CLASS_MIX = (0.5, 0.25, 0.25)


def object_point_count(box: Box3D) -> int:
    """Point budget for one object: proportional to visible area, decaying with squared range."""
    length, width, height = box.dims
    area = length * width + 2.0 * height * (length + width)
    distance = max(math.hypot(box.center[0], box.center[1]), REFERENCE_RANGE)
    return max(MIN_OBJECT_POINTS, int(round(POINTS_PER_M2 * area * (REFERENCE_RANGE / distance) ** 2)))


def sample_box_surface(box: Box3D, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on the five non-bottom faces of ``box`` (world frame); interiors stay empty."""
    length, width, height = box.dims
    hl, hw, hh = length / 2, width / 2, height / 2
    # top, front, back, left, right
    areas = np.array([length * width, width * height, width * height, length * height, length * height])
    face = rng.choice(5, size=count, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=count)
    v = rng.uniform(-1.0, 1.0, size=count)
    local = np.zeros((count, 3))
    top, front, back, left, right = (face == k for k in range(5))
    local[top] = np.stack([u[top] * hl, v[top] * hw, np.full(top.sum(), hh)], axis=1)
    local[front] = np.stack([np.full(front.sum(), hl), u[front] * hw, v[front] * hh], axis=1)
    local[back] = np.stack([np.full(back.sum(), -hl), u[back] * hw, v[back] * hh], axis=1)
    local[left] = np.stack([u[left] * hl, np.full(left.sum(), hw), v[left] * hh], axis=1)
    local[right] = np.stack([u[right] * hl, np.full(right.sum(), -hw), v[right] * hh], axis=1)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    world = np.empty_like(local)
    world[:, 0] = c * local[:, 0] - s * local[:, 1] + box.center[0]
    world[:, 1] = s * local[:, 0] + c * local[:, 1] + box.center[1]
    world[:, 2] = local[:, 2] + box.center[2]
    return world


def _place_object(
    class_id: int,
    spec: VoxelSpec,
    placed: list[Box3D],
    rng: np.random.Generator,
) -> Box3D | None:
    base = np.asarray(CLASS_SIZES[class_id])
    dims = base * rng.uniform(1.0 - SIZE_JITTER, 1.0 + SIZE_JITTER, size=3)
    reach = 0.5 * math.hypot(dims[0], dims[1])
    lo = np.asarray(spec.range_min[:2]) + reach
    hi = np.asarray(spec.range_max[:2]) - reach
    top = GROUND_Z + dims[2]
    if np.any(lo >= hi) or GROUND_Z < spec.range_min[2] or top >= spec.range_max[2]:
        return None
    for _ in range(PLACEMENT_ATTEMPTS):
        xy = rng.uniform(lo, hi)
        yaw = rng.uniform(-math.pi, math.pi)
        box = Box3D((xy[0], xy[1], GROUND_Z + dims[2] / 2), tuple(dims), yaw, class_id)
        candidate = box.as_array()
        if all(bev_intersection(candidate, other.as_array()) <= 0.0 for other in placed):
            return box
    return None


def synth_scene(
    seed: int,
    spec: VoxelSpec,
    n_objects: int,
    class_mix: Sequence[float] = DEFAULT_CLASS_MIX,
    clutter_points: int = CLUTTER_POINTS,
) -> Scene:
    """
    Generate one reproducible scene.

    Objects sit on the ground plane, lie fully inside the range and never
    overlap in BEV. Clutter is uniform over the range just below the ground.

    Args:
        seed: RNG seed; identical seeds give identical scenes
        spec: Crop range the scene must fit
        n_objects: Number of objects requested
        class_mix: Relative frequency per class id

    Raises:
        ValueError: If n_objects is negative or class_mix is malformed
    """
    if n_objects < 0:
        raise ValueError(f"n_objects must be >= 0, got {n_objects}")
    mix = np.asarray(class_mix, dtype=np.float64)
    if mix.shape != (len(CLASS_NAMES),) or np.any(mix < 0) or mix.sum() <= 0:
        raise ValueError(f"class_mix must hold {len(CLASS_NAMES)} non-negative weights, got {class_mix}")
    rng = np.random.default_rng(seed)

    boxes: list[Box3D] = []
    for _ in range(n_objects):
        class_id = int(rng.choice(len(CLASS_NAMES), p=mix / mix.sum()))
        box = _place_object(class_id, spec, boxes, rng)
        if box is None:
            logger.debug(f"Scene {seed}: no free spot for a {CLASS_NAMES[class_id]}")
            continue
        boxes.append(box)

    xyz_parts, refl_parts = [], []
    for box in boxes:
        count = object_point_count(box)
        xyz_parts.append(sample_box_surface(box, count, rng))
        refl_parts.append(rng.uniform(0.2, 0.9, size=count))

    ground = min(GROUND_Z, min((b.center[2] - b.dims[2] / 2 for b in boxes), default=GROUND_Z))
    clutter_top = ground - CLUTTER_GAP
    clutter_bottom = max(spec.range_min[2], clutter_top - CLUTTER_DEPTH)
    if clutter_points > 0 and clutter_bottom < clutter_top:
        lo = np.array([spec.range_min[0], spec.range_min[1], clutter_bottom])
        hi = np.array([spec.range_max[0], spec.range_max[1], clutter_top])
        clutter = rng.uniform(lo, hi, size=(clutter_points, 3))
        xyz_parts.append(clutter)
        refl_parts.append(rng.uniform(0.0, 0.3, size=clutter_points))

    if xyz_parts:
        cloud = PointCloud(np.concatenate(xyz_parts), np.concatenate(refl_parts))
    else:
        cloud = PointCloud.empty()
    return Scene(cloud, boxes, f"{seed:06d}")
