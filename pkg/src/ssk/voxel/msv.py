"""
Multi-scale voxelization encoder.

Each level fuses a coordinate branch and a point branch, pools a per-voxel
max back onto the points, predicts a distance weight W_d per point and
averages the weighted point features into sparse voxels. Levels 1-3 keep
the top-weighted points for the next, coarser level; the last level can
vote its points toward object centers.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from ssk.geom.voxel_spec import VoxelSpec
from ssk.nn import ops
from ssk.nn.autograd import Tape, Tensor
from ssk.nn.base import Fcn, Linear, Module
from ssk.nn.params import ParamStore
from ssk.voxel.dynamic import COORD_FEATURE_DIM, VoxelAssignment, compose_coord_feature, dynamic_voxelize

logger = logging.getLogger(__name__)

VOTE_LIMIT = np.array([3.0, 3.0, 2.0])
TOPK_EPS = 1e-9

# (point-feature width, fused width C', output width) per level
DEFAULT_CHANNELS: tuple[tuple[int, int, int], ...] = ((10, 16, 16), (16, 24, 24), (24, 24, 32), (32, 32, 48))
DEFAULT_RATES: tuple[float, ...] = (0.4, 0.4, 0.6)


@dataclass
class SparseVoxelTensor:
    """Unique integer voxel coordinates with one feature row each."""

    coords: np.ndarray
    features: Tensor
    spec: VoxelSpec
    level: str = ""

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        if len(self.coords) != self.features.shape[0]:
            raise ValueError(f"{len(self.coords)} coords but {self.features.shape[0]} feature rows")

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def channels(self) -> int:
        return self.features.shape[1]


@dataclass
class PointwiseFeature:
    """Point coordinates X_i (world, m), features V_i and distance weights W_d, row-aligned."""

    coords: np.ndarray
    features: Tensor
    weights: Tensor
    reflectance: np.ndarray

    def __len__(self) -> int:
        return len(self.coords)

    def take(self, rows: np.ndarray) -> "PointwiseFeature":
        rows = np.asarray(rows, dtype=np.int64)
        return PointwiseFeature(self.coords[rows], self.features[rows], self.weights[rows], self.reflectance[rows])


def level_specs(base: VoxelSpec, levels: int = 4) -> list[VoxelSpec]:
    """Specs with voxel size doubling at every level."""
    return [base.scaled(2.0 ** i) for i in range(levels)]


def topk_count(n: int, rate: float) -> int:
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"Sampling rate must lie in (0, 1], got {rate}")
    return min(n, int(math.ceil(rate * n - TOPK_EPS)))


def topk_indices(weights: np.ndarray, rate: float) -> np.ndarray:
    """
    Indices of the ceil(rate·N) largest weights, ascending.

    Ties are broken by the lower original index.
    """
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    k = topk_count(len(weights), rate)
    order = np.lexsort((np.arange(len(weights)), -weights))
    return np.sort(order[:k])


def topk_by_weight(pw: PointwiseFeature, rate: float) -> PointwiseFeature:
    return pw.take(topk_indices(pw.weights.value, rate))


def center_vote(coords: np.ndarray, features: Tensor, vote_head: "Linear") -> tuple[Tensor, Tensor]:
    """
    Shift coordinates by the head's offsets, clamped to ±(3, 3, 2) m.

    Returns:
        Voted coordinates and the raw (unclamped) offsets, both K×3
    """
    tape = features.tape
    offsets = vote_head(tape, features)
    applied = ops.clamp(offsets, -VOTE_LIMIT, VOTE_LIMIT)
    return ops.add(tape.constant(np.asarray(coords, dtype=np.float64)), applied), offsets


class MsvLevel(Module):
    """One multi-scale voxelization level."""

    def __init__(self, store: ParamStore, name: str, point_dim: int, fused_dim: int, out_dim: int, rng: np.random.Generator):
        super().__init__(store, name)
        if fused_dim % 2:
            raise ValueError(f"{name}: fused width {fused_dim} must be even")
        self.point_dim, self.fused_dim, self.out_dim = point_dim, fused_dim, out_dim
        half = fused_dim // 2
        self.coord_fcn = Fcn(store, f"{name}.coord", COORD_FEATURE_DIM, half, rng)
        self.point_fcn = Fcn(store, f"{name}.point", point_dim, half, rng)
        self.weight_head = Linear(store, f"{name}.weight", 2 * fused_dim, 1, rng)
        self.integrate1 = Fcn(store, f"{name}.integrate1", 2 * fused_dim, out_dim, rng)
        self.integrate2 = Fcn(store, f"{name}.integrate2", out_dim, out_dim, rng)

    def forward(
        self,
        tape: Tape,
        coord_feature: np.ndarray,
        point_feature: Tensor,
        assignment: VoxelAssignment,
    ) -> tuple[Tensor, Tensor, Tensor]:
        """
        Returns:
            Per-voxel features S (M×C_out), per-point features V (N×C_out), weights W_d (N×1)
        """
        if point_feature.shape[1] != self.point_dim:
            raise ValueError(f"{self.name}: point features have {point_feature.shape[1]} channels, schedule says {self.point_dim}")
        slots, m = assignment.point_to_slot, assignment.num_voxels
        fused = ops.concat([self.coord_fcn(tape, tape.constant(coord_feature)), self.point_fcn(tape, point_feature)], axis=1)
        pooled = ops.group_reduce_max(fused, slots, m)
        local = ops.concat([fused, pooled[slots]], axis=1)
        weights = ops.sigmoid(self.weight_head(tape, local))
        integrated = self.integrate2(tape, self.integrate1(tape, local))
        features = integrated * weights
        return ops.group_reduce_mean(features, slots, m), features, weights


@dataclass
class MsvOutput:
    """
    Per-level sparse voxels S_i and pointwise features V_i.

    ``points`` keep the measured coordinates; when the last level votes,
    its voted coordinates are in ``voted_coords`` and S_4 is pooled on them.
    """

    voxels: list[SparseVoxelTensor]
    points: list[PointwiseFeature]
    pre_vote_coords: np.ndarray
    voted_coords: Tensor | None
    vote_offsets: Tensor | None

    def last_level_coords(self) -> np.ndarray:
        if self.voted_coords is not None:
            return self.voted_coords.value
        return self.points[-1].coords


class MultiScaleVoxelEncoder(Module):
    """Four MSV levels chained by top-K sampling, with an optional center vote on the last."""

    def __init__(
        self,
        store: ParamStore,
        base_spec: VoxelSpec,
        rng: np.random.Generator,
        channels: Sequence[tuple[int, int, int]] = DEFAULT_CHANNELS,
        rates: Sequence[float] = DEFAULT_RATES,
        vote: bool = True,
        name: str = "msv",
    ):
        super().__init__(store, name)
        if len(rates) != len(channels) - 1:
            raise ValueError(f"{len(channels)} levels need {len(channels) - 1} sampling rates, got {len(rates)}")
        if channels[0][0] != COORD_FEATURE_DIM:
            raise ValueError(f"Level 1 consumes the {COORD_FEATURE_DIM}-d coordinate feature, schedule says {channels[0][0]}")
        for prev, cur in zip(channels, channels[1:], strict=False):
            if cur[0] != prev[2]:
                raise ValueError(f"Channel schedule breaks between levels: {prev} -> {cur}")
        for rate in rates:
            topk_count(1, rate)
        self.specs = level_specs(base_spec, len(channels))
        self.rates = tuple(rates)
        self.vote = vote
        self.levels = [MsvLevel(store, f"{name}.level{i + 1}", *ch, rng) for i, ch in enumerate(channels)]
        self.vote_head = Linear(store, f"{name}.vote", channels[-1][2], 3, rng) if vote else None

    @property
    def out_channels(self) -> list[int]:
        return [level.out_dim for level in self.levels]

    def forward(self, tape: Tape, xyz: np.ndarray, reflectance: np.ndarray) -> MsvOutput:
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        reflectance = np.asarray(reflectance, dtype=np.float64).reshape(-1)
        point_feature: Tensor | None = None
        voxels: list[SparseVoxelTensor] = []
        points: list[PointwiseFeature] = []
        pre_vote = np.zeros((0, 3))
        voted = offsets = None

        for i, (level, spec) in enumerate(zip(self.levels, self.specs, strict=True)):
            assignment = dynamic_voxelize(xyz, spec)
            coord_feature = compose_coord_feature(xyz, reflectance, assignment)
            if point_feature is None:
                point_feature = tape.constant(coord_feature)
            s, v, w = level(tape, coord_feature, point_feature, assignment)
            pw = PointwiseFeature(xyz, v, w, reflectance)
            last = i == len(self.levels) - 1

            if last and self.vote_head is not None:
                pre_vote = xyz
                voted, offsets = center_vote(xyz, v, self.vote_head)
                moved = np.clip(voted.value, np.asarray(spec.range_min), np.nextafter(np.asarray(spec.range_max), -np.inf))
                assignment = dynamic_voxelize(moved, spec)
                s = ops.group_reduce_mean(v, assignment.point_to_slot, assignment.num_voxels)
            voxels.append(SparseVoxelTensor(assignment.voxel_coords, s, spec, f"S{i + 1}"))
            points.append(pw)

            if not last:
                kept = topk_by_weight(pw, self.rates[i])
                xyz, reflectance, point_feature = kept.coords, kept.reflectance, kept.features
            logger.debug(f"{level.name}: {assignment.num_points} points -> {assignment.num_voxels} voxels")

        return MsvOutput(voxels, points, pre_vote, voted, offsets)
