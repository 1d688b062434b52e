"""Hierarchical voxel RoI pooling: coarse and fine grid points inside each proposal."""

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ssk.agg.semantic import FeatureLayer3D
from ssk.geom.boxes import Box3D
from ssk.nn import ops
from ssk.nn.autograd import Tape, Tensor
from ssk.nn.base import Fcn, Module
from ssk.nn.params import ParamStore

MAX_NEIGHBORS = 16


@dataclass(frozen=True)
class PoolConfig:
    """Grid resolutions with their query radii, in aggregation-voxel edges."""

    grids: tuple[int, ...] = (3, 6)
    radii: tuple[float, ...] = (6.0, 3.0)
    width: int = 32
    max_neighbors: int = MAX_NEIGHBORS

    def __post_init__(self):
        if len(self.grids) != len(self.radii) or not self.grids:
            raise ValueError(f"Each pooling grid needs a radius: {self.grids}, {self.radii}")
        if min(self.grids) < 1 or min(self.radii) <= 0 or self.max_neighbors < 1:
            raise ValueError(f"Invalid pooling config: {self}")

    def out_dim(self) -> int:
        return sum(g ** 3 for g in self.grids) * self.width


def grid_points(box: Box3D, grid: int) -> np.ndarray:
    """grid³ cell centers spread uniformly over the rotated box, x-major."""
    steps = (np.arange(grid) + 0.5) / grid - 0.5
    gx, gy, gz = np.meshgrid(steps, steps, steps, indexing="ij")
    local = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1) * np.asarray(box.dims)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    world = np.empty_like(local)
    world[:, 0] = c * local[:, 0] - s * local[:, 1] + box.center[0]
    world[:, 1] = s * local[:, 0] + c * local[:, 1] + box.center[1]
    world[:, 2] = local[:, 2] + box.center[2]
    return world


def query_neighbors(centers: np.ndarray, queries: np.ndarray, radius: float, k: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Up to ``k`` nearest layer points within ``radius`` of each query, nearest first.

    Returns:
        (query row, layer row) pairs as two aligned index arrays
    """
    if len(centers) == 0 or len(queries) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    tree = cKDTree(centers)
    k = min(k, len(centers))
    dist, idx = tree.query(queries, k=k, distance_upper_bound=radius)
    dist = np.asarray(dist).reshape(len(queries), k)
    idx = np.asarray(idx).reshape(len(queries), k)
    hit = np.isfinite(dist) & (dist <= radius)
    rows = np.broadcast_to(np.arange(len(queries))[:, None], idx.shape)
    return rows[hit].astype(np.int64), idx[hit].astype(np.int64)


class HvRoiPool(Module):
    """Per-resolution shared FCN over (feature ⊕ offset to grid point), max over neighbors."""

    def __init__(self, store: ParamStore, cin: int, voxel_edge: float, rng: np.random.Generator, config: PoolConfig | None = None, name: str = "roi"):
        super().__init__(store, name)
        self.config = config or PoolConfig()
        self.cin = cin
        self.voxel_edge = voxel_edge
        self.fcns = [Fcn(store, f"{name}.grid{g}", cin + 3, self.config.width, rng) for g in self.config.grids]

    @property
    def out_dim(self) -> int:
        return self.config.out_dim()

    def forward(self, tape: Tape, layer: FeatureLayer3D, boxes: list[Box3D]) -> Tensor:
        """Pooled rows, one per box (P×out_dim); boxes with no neighbors pool to zero."""
        p = len(boxes)
        if p == 0:
            return tape.constant(np.zeros((0, self.out_dim)))
        centers = layer.centers.value
        parts = []
        for grid, radius, fcn in zip(self.config.grids, self.config.radii, self.fcns, strict=True):
            g = grid ** 3
            queries = np.concatenate([grid_points(b, grid) for b in boxes])
            rows, neighbors = query_neighbors(centers, queries, radius * self.voxel_edge, self.config.max_neighbors)
            if len(rows) == 0:
                parts.append(tape.constant(np.zeros((p, g * self.config.width))))
                continue
            offsets = tape.constant(centers[neighbors] - queries[rows])
            encoded = fcn(tape, ops.concat([layer.features[neighbors], offsets], axis=1))
            pooled = ops.group_reduce_max(encoded, rows, p * g)
            parts.append(pooled.reshape(p, g * self.config.width))
        return ops.concat(parts, axis=1)
