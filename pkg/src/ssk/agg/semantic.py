"""Semantic point cloud, semantic voxels and the masked center vote of the 3D feature layer."""

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from ssk.geom.voxel_spec import VoxelSpec, voxel_to_world
from ssk.nn import ops
from ssk.nn.autograd import Tape, Tensor
from ssk.nn.base import Fcn, Linear, Module
from ssk.nn.params import ParamStore
from ssk.pcio.formats import write_ply
from ssk.voxel.dynamic import dynamic_voxelize
from ssk.voxel.msv import VOTE_LIMIT, SparseVoxelTensor

NUM_BRANCHES = 4
# Source tags: V1..V4 -> 0..3, F1..F4 -> 4..7
F_TAG_OFFSET = NUM_BRANCHES

# Voxel tags in exported layers
VOXEL_V_ONLY = 0
VOXEL_F_ONLY = 1
VOXEL_MIXED = 2


class VoteScheme(str, Enum):
    NONE = "none"
    ALL = "all"
    V_ONLY = "v_only"
    F_ONLY = "f_only"

    @classmethod
    def parse(cls, value: "str | VoteScheme") -> "VoteScheme":
        aliases = {"v": cls.V_ONLY, "f": cls.F_ONLY}
        if isinstance(value, cls):
            return value
        try:
            return aliases.get(value) or cls(value)
        except ValueError as e:
            raise ValueError(f"Unknown vote scheme '{value}', choose from none, all, v_only (v), f_only (f)") from e


def source_tag_name(tag: int) -> str:
    return f"V{tag + 1}" if tag < F_TAG_OFFSET else f"F{tag - F_TAG_OFFSET + 1}"


@dataclass
class SemanticPointCloud:
    """Feature points in world coordinates with a common feature width and one source tag each."""

    coords: np.ndarray
    features: Tensor
    tags: np.ndarray

    def __len__(self) -> int:
        return len(self.coords)

    def count_by_tag(self) -> dict[str, int]:
        values, counts = np.unique(self.tags, return_counts=True)
        return {source_tag_name(int(v)): int(c) for v, c in zip(values, counts, strict=True)}


@dataclass
class SemanticVoxels:
    """
    Mean-pooled semantic points per aggregation voxel.

    ``vote_mask`` is 1 exactly when the voxel holds no V-tagged point.
    """

    coords: np.ndarray
    features: Tensor
    centers: np.ndarray
    has_v: np.ndarray
    has_f: np.ndarray

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def vote_mask(self) -> np.ndarray:
        return ~self.has_v

    def voxel_tags(self) -> np.ndarray:
        return np.where(self.has_v & self.has_f, VOXEL_MIXED, np.where(self.has_v, VOXEL_V_ONLY, VOXEL_F_ONLY))


@dataclass
class FeatureLayer3D:
    """Semantic voxels after the masked vote; ``centers`` carries the vote gradient."""

    centers: Tensor
    features: Tensor
    pre_vote_centers: np.ndarray
    voted: np.ndarray
    voxel_tags: np.ndarray

    def __len__(self) -> int:
        return len(self.pre_vote_centers)


class SemanticProjector(Module):
    """Two FCN layers per source branch mapping each feature width to a common width."""

    def __init__(
        self,
        store: ParamStore,
        v_channels: list[int],
        f_channels: list[int],
        width: int,
        rng: np.random.Generator,
        name: str = "agg.project",
    ):
        super().__init__(store, name)
        self.width = width
        self.stacks = []
        for tag, cin in enumerate([*v_channels, *f_channels]):
            label = source_tag_name(tag)
            self.stacks.append((Fcn(store, f"{name}.{label}.0", cin, width, rng), Fcn(store, f"{name}.{label}.1", width, width, rng)))

    def forward(self, tape: Tape, tag: int, x: Tensor) -> Tensor:
        first, second = self.stacks[tag]
        return second(tape, first(tape, x))


def build_semantic_points(
    tape: Tape,
    v_branches: list[tuple[np.ndarray, Tensor] | None],
    f_branches: list[SparseVoxelTensor | None],
    projector: SemanticProjector,
) -> SemanticPointCloud:
    """
    Concatenate projected V_i points (own coordinates) and F_i voxels (voxel centers).

    Empty or missing branches are skipped.
    """
    coords, features, tags = [], [], []
    for i, branch in enumerate(v_branches):
        if branch is None or len(branch[0]) == 0:
            continue
        xyz, feat = branch
        coords.append(np.asarray(xyz, dtype=np.float64).reshape(-1, 3))
        features.append(projector(tape, i, feat))
        tags.append(np.full(len(xyz), i, dtype=np.int64))
    for i, f in enumerate(f_branches):
        if f is None or len(f) == 0:
            continue
        coords.append(voxel_to_world(f.coords, f.spec).reshape(-1, 3))
        features.append(projector(tape, F_TAG_OFFSET + i, f.features))
        tags.append(np.full(len(f), F_TAG_OFFSET + i, dtype=np.int64))
    if not coords:
        return SemanticPointCloud(np.zeros((0, 3)), tape.constant(np.zeros((0, projector.width))), np.zeros(0, dtype=np.int64))
    return SemanticPointCloud(np.concatenate(coords), ops.concat(features, axis=0), np.concatenate(tags))


def semantic_voxelize(points: SemanticPointCloud, spec: VoxelSpec) -> SemanticVoxels:
    """Group points by aggregation voxel; features and world centers are member means."""
    inside = np.clip(points.coords, np.asarray(spec.range_min), np.nextafter(np.asarray(spec.range_max), -np.inf))
    assignment = dynamic_voxelize(inside, spec)
    slots, m = assignment.point_to_slot, assignment.num_voxels
    features = ops.group_reduce_mean(points.features, slots, m)
    centers = ops.segment_mean(points.coords, slots, m)
    is_v = points.tags < F_TAG_OFFSET
    has_v = np.bincount(slots, weights=is_v.astype(np.float64), minlength=m) > 0
    has_f = np.bincount(slots, weights=(~is_v).astype(np.float64), minlength=m) > 0
    return SemanticVoxels(assignment.voxel_coords, features, centers, has_v, has_f)


def vote_selection(voxels: SemanticVoxels, scheme: VoteScheme | str) -> np.ndarray:
    scheme = VoteScheme.parse(scheme)
    if scheme is VoteScheme.NONE:
        return np.zeros(len(voxels), dtype=bool)
    if scheme is VoteScheme.ALL:
        return np.ones(len(voxels), dtype=bool)
    if scheme is VoteScheme.V_ONLY:
        return voxels.has_v & ~voxels.has_f
    return voxels.vote_mask.copy()


def masked_center_vote(
    tape: Tape,
    voxels: SemanticVoxels,
    scheme: VoteScheme | str,
    vote_head: Linear | None,
) -> FeatureLayer3D:
    """
    Move the selected voxel centers by the clamped head offsets.

    Voxels outside the selection keep their exact centers.

    Raises:
        ValueError: On an unknown scheme, or a voting scheme without a head
    """
    selected = vote_selection(voxels, scheme)
    base = tape.constant(voxels.centers)
    if selected.any():
        if vote_head is None:
            raise ValueError(f"Vote scheme {scheme} needs a vote head")
        offsets = ops.clamp(vote_head(tape, voxels.features), -VOTE_LIMIT, VOTE_LIMIT)
        centers = ops.where(selected[:, None], base + offsets, base)
    else:
        centers = base
    return FeatureLayer3D(centers, voxels.features, voxels.centers, selected, voxels.voxel_tags())


def export_semantic_ply(path: Path | str, stage: str, points: SemanticPointCloud, layer: FeatureLayer3D) -> None:
    """
    Write one stage of the feature layer as tagged PLY.

    Stages: ``semantic_points`` (source tags), ``pre_vote`` and ``post_vote`` (voxel tags).
    """
    if stage == "semantic_points":
        write_ply(path, points.coords, points.tags, "source")
    elif stage == "pre_vote":
        write_ply(path, layer.pre_vote_centers, layer.voxel_tags, "source")
    elif stage == "post_vote":
        write_ply(path, layer.centers.value, layer.voxel_tags, "source")
    else:
        raise ValueError(f"Unknown export stage '{stage}', choose from semantic_points, pre_vote, post_vote")
