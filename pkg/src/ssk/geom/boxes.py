"""Oriented 3D boxes, surface distances, centerness and residual box coding."""

import math
from dataclasses import dataclass

import numpy as np

CLASS_NAMES: tuple[str, ...] = ("car", "pedestrian", "cyclist")
# Surface points round-trip through float32 files; keep them on their face
INSIDE_TOLERANCE = 1e-5


def wrap_angle(angle):
    """Wrap radians to (-pi, pi]."""
    wrapped = np.pi - np.mod(np.pi - np.asarray(angle, dtype=np.float64), 2.0 * np.pi)
    return float(wrapped) if np.ndim(wrapped) == 0 else wrapped


@dataclass(frozen=True)
class Box3D:
    """Oriented box in the LiDAR frame; yaw rotates the length axis from +x toward +y."""

    center: tuple[float, float, float]
    dims: tuple[float, float, float]
    yaw: float = 0.0
    class_id: int = 0

    def __post_init__(self):
        center = tuple(float(v) for v in self.center)
        dims = tuple(float(v) for v in self.dims)
        if len(center) != 3 or len(dims) != 3:
            raise ValueError(f"Box3D needs 3 center and 3 dim values, got {center}, {dims}")
        if not all(math.isfinite(v) for v in (*center, *dims, float(self.yaw))):
            raise ValueError(f"Box3D fields must be finite: {center}, {dims}, {self.yaw}")
        if min(dims) <= 0:
            raise ValueError(f"Box3D dims must be positive, got {dims}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))
        object.__setattr__(self, "class_id", int(self.class_id))

    @property
    def volume(self) -> float:
        length, width, height = self.dims
        return length * width * height

    def as_array(self) -> np.ndarray:
        return np.array([*self.center, *self.dims, self.yaw], dtype=np.float64)

    @classmethod
    def from_array(cls, values, class_id: int = 0) -> "Box3D":
        values = np.asarray(values, dtype=np.float64)
        return cls(tuple(values[:3]), tuple(values[3:6]), float(values[6]), class_id)


def boxes_to_array(boxes: list[Box3D]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 7))
    return np.stack([b.as_array() for b in boxes])


@dataclass(frozen=True)
class SurfaceDistances:
    """Signed distances to the front, back, left, right, up and down faces."""

    f: np.ndarray
    b: np.ndarray
    l: np.ndarray  # noqa: E741
    r: np.ndarray
    u: np.ndarray
    d: np.ndarray

    def stack(self) -> np.ndarray:
        return np.stack([self.f, self.b, self.l, self.r, self.u, self.d], axis=-1)


def to_local(points, box: Box3D) -> np.ndarray:
    """Express world points in the box frame (translate, then rotate by -yaw)."""
    p = np.asarray(points, dtype=np.float64) - np.asarray(box.center)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    x = c * p[..., 0] + s * p[..., 1]
    y = -s * p[..., 0] + c * p[..., 1]
    return np.stack([x, y, p[..., 2]], axis=-1)


def surface_distances(points, box: Box3D) -> SurfaceDistances:
    """Distances of one point (3,) or many points (N×3) to the six faces of ``box``."""
    local = to_local(points, box)
    half = np.asarray(box.dims) / 2.0
    x, y, z = local[..., 0], local[..., 1], local[..., 2]
    return SurfaceDistances(
        f=half[0] - x, b=half[0] + x,
        l=half[1] - y, r=half[1] + y,
        u=half[2] - z, d=half[2] + z,
    )


def centerness_mask(points, box: Box3D):
    """
    Cube root of the product of the min/max face-distance ratios per axis pair.

    1 at the centroid, 0 on or outside the box.
    """
    dist = surface_distances(points, box).stack()
    inside = np.all(dist > 1e-12, axis=-1)
    safe = np.where(dist > 1e-12, dist, 1.0)
    pairs = safe.reshape(dist.shape[:-1] + (3, 2))
    ratio = pairs.min(axis=-1) / pairs.max(axis=-1)
    mask = np.where(inside, np.cbrt(np.prod(ratio, axis=-1)), 0.0)
    return float(mask) if mask.ndim == 0 else mask


def points_in_box(points, box: Box3D) -> np.ndarray:
    """Closed-box membership: every face distance is non-negative."""
    dist = surface_distances(points, box).stack()
    return np.all(dist >= -INSIDE_TOLERANCE, axis=-1)


def assign_points_to_boxes(points: np.ndarray, boxes: list[Box3D]) -> np.ndarray:
    """Index of the first box containing each point, -1 for background."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    owner = np.full(len(points), -1, dtype=np.int64)
    for i, box in enumerate(boxes):
        radius = 0.5 * math.sqrt(sum(d * d for d in box.dims)) + INSIDE_TOLERANCE
        near = np.nonzero((owner < 0) & (np.linalg.norm(points - np.asarray(box.center), axis=1) <= radius))[0]
        if near.size:
            owner[near[points_in_box(points[near], box)]] = i
    return owner


def point_centerness(points: np.ndarray, boxes: list[Box3D], owner: np.ndarray | None = None) -> np.ndarray:
    """Centerness of every point w.r.t. its owning box (0 for background)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if owner is None:
        owner = assign_points_to_boxes(points, boxes)
    mask = np.zeros(len(points))
    for i, box in enumerate(boxes):
        rows = np.nonzero(owner == i)[0]
        if rows.size:
            mask[rows] = centerness_mask(points[rows], box)
    return mask


def bev_corners(box_array: np.ndarray) -> np.ndarray:
    """Counter-clockwise BEV corners (4×2) of a 7-vector box."""
    cx, cy, _, length, width, _, yaw = box_array
    c, s = math.cos(yaw), math.sin(yaw)
    local = np.array([[0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]]) * [length, width]
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + [cx, cy]


def encode_box_residual(gt, anchor) -> np.ndarray:
    """
    SECOND-style residual of ``gt`` w.r.t. ``anchor``.

    Accepts Box3D values or (..., 7) arrays; returns (..., 7):
    (dx/da, dy/da, dz/ha, log l/la, log w/wa, log h/ha, wrap(dyaw)), da = sqrt(la² + wa²).
    """
    g = gt.as_array() if isinstance(gt, Box3D) else np.asarray(gt, dtype=np.float64)
    a = anchor.as_array() if isinstance(anchor, Box3D) else np.asarray(anchor, dtype=np.float64)
    diag = np.sqrt(a[..., 3] ** 2 + a[..., 4] ** 2)
    return np.stack(
        [
            (g[..., 0] - a[..., 0]) / diag,
            (g[..., 1] - a[..., 1]) / diag,
            (g[..., 2] - a[..., 2]) / a[..., 5],
            np.log(g[..., 3] / a[..., 3]),
            np.log(g[..., 4] / a[..., 4]),
            np.log(g[..., 5] / a[..., 5]),
            wrap_angle(g[..., 6] - a[..., 6]),
        ],
        axis=-1,
    )


def decode_box_residual(residual, anchor) -> np.ndarray:
    """Inverse of :func:`encode_box_residual`; returns (..., 7) box arrays."""
    r = np.asarray(residual, dtype=np.float64)
    a = anchor.as_array() if isinstance(anchor, Box3D) else np.asarray(anchor, dtype=np.float64)
    diag = np.sqrt(a[..., 3] ** 2 + a[..., 4] ** 2)
    return np.stack(
        [
            r[..., 0] * diag + a[..., 0],
            r[..., 1] * diag + a[..., 1],
            r[..., 2] * a[..., 5] + a[..., 2],
            np.exp(r[..., 3]) * a[..., 3],
            np.exp(r[..., 4]) * a[..., 4],
            np.exp(r[..., 5]) * a[..., 5],
            wrap_angle(r[..., 6] + a[..., 6]),
        ],
        axis=-1,
    )
