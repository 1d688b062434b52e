"""Dynamic voxelization and the scatter reductions over its point-to-voxel map."""

from dataclasses import dataclass

import numpy as np

from ssk.geom.voxel_spec import VoxelSpec, world_to_voxel
from ssk.nn.ops import segment_max, segment_mean

COORD_FEATURE_DIM = 10


@dataclass(frozen=True)
class VoxelAssignment:
    """
    Every in-range point mapped to exactly one occupied voxel.

    ``voxel_coords`` is duplicate-free and sorted by x-major flattened key;
    ``point_to_slot[i]`` indexes the voxel of point ``i``.
    """

    point_coords: np.ndarray
    voxel_coords: np.ndarray
    point_to_slot: np.ndarray
    spec: VoxelSpec

    @property
    def num_points(self) -> int:
        return len(self.point_to_slot)

    @property
    def num_voxels(self) -> int:
        return len(self.voxel_coords)

    def counts(self) -> np.ndarray:
        return np.bincount(self.point_to_slot, minlength=self.num_voxels)


def dynamic_voxelize(xyz: np.ndarray, spec: VoxelSpec) -> VoxelAssignment:
    """
    Assign every point to its voxel, with no per-voxel cap and no padding.

    Raises:
        ValueError: If a point lies outside the crop range
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    if len(xyz) == 0:
        empty = np.zeros((0, 3), dtype=np.int64)
        return VoxelAssignment(empty, empty, np.zeros(0, dtype=np.int64), spec)
    point_coords = world_to_voxel(xyz, spec).reshape(-1, 3)
    keys = spec.flat_keys(point_coords)
    unique_keys, slots = np.unique(keys, return_inverse=True)
    return VoxelAssignment(point_coords, spec.unflatten_keys(unique_keys), slots.reshape(-1), spec)


def compose_coord_feature(xyz: np.ndarray, reflectance: np.ndarray, assignment: VoxelAssignment) -> np.ndarray:
    """
    Per-point (x, y, z, r, x_c, y_c, z_c, x_p, y_p, z_p).

    (x_c, y_c, z_c) is the mean of the points sharing the voxel and
    (x_p, y_p, z_p) the offset of the point from that mean.
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    reflectance = np.asarray(reflectance, dtype=np.float64).reshape(-1, 1)
    centroid = segment_mean(xyz, assignment.point_to_slot, assignment.num_voxels)[assignment.point_to_slot]
    return np.concatenate([xyz, reflectance, centroid, xyz - centroid], axis=1)


def scatter_mean(features: np.ndarray, assignment: VoxelAssignment) -> np.ndarray:
    return segment_mean(np.asarray(features, dtype=np.float64), assignment.point_to_slot, assignment.num_voxels)


def scatter_max(features: np.ndarray, assignment: VoxelAssignment) -> np.ndarray:
    best, _ = segment_max(np.asarray(features, dtype=np.float64), assignment.point_to_slot, assignment.num_voxels)
    return best


def weighted_mean(features: np.ndarray, weights: np.ndarray, assignment: VoxelAssignment) -> np.ndarray:
    """Per-voxel mean of the weighted rows (not normalized by the weight sum)."""
    weights = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    return scatter_mean(np.asarray(features, dtype=np.float64) * weights, assignment)
