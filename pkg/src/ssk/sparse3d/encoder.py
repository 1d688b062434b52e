"""Four-branch sparse 3D encoder with cross-branch concatenation."""

import logging
from dataclasses import dataclass

import numpy as np

from ssk.geom.voxel_spec import VoxelSpec
from ssk.nn import ops
from ssk.nn.autograd import Tape
from ssk.nn.base import Module
from ssk.nn.params import ParamStore
from ssk.sparse3d.conv import SparseConv3d
from ssk.sparse3d.rulebook import ConvMode
from ssk.voxel.msv import SparseVoxelTensor

logger = logging.getLogger(__name__)

Stride = tuple[int, int, int]

DEFAULT_BRANCH_STRIDES: tuple[tuple[Stride, ...], ...] = (
    ((2, 2, 2), (2, 2, 2)),
    ((2, 2, 2), (2, 2, 2)),
    ((2, 2, 2), (2, 2, 1)),
    ((2, 2, 1), (2, 2, 1)),
)
# Total downsampling each branch must reach over its blocks
REQUIRED_DOWNSAMPLE: tuple[Stride, ...] = ((4, 4, 4), (4, 4, 4), (4, 4, 2), (4, 4, 1))
DEFAULT_LAYOUT: tuple[str, ...] = ("subm", "spconv", "spconv")
LAYER_KINDS = ("subm", "spconv")


@dataclass(frozen=True)
class EncoderConfig:
    """
    Per-branch block strides and the per-block layer layout.

    The first layer of a block carries the block stride; a strided
    ``subm`` layer runs as a regular sparse convolution.
    """

    branch_strides: tuple[tuple[Stride, ...], ...] = DEFAULT_BRANCH_STRIDES
    layout: tuple[str, ...] = DEFAULT_LAYOUT

    def __post_init__(self):
        if len(self.branch_strides) != len(REQUIRED_DOWNSAMPLE):
            raise ValueError(f"Encoder needs {len(REQUIRED_DOWNSAMPLE)} branches, got {len(self.branch_strides)}")
        for i, (blocks, required) in enumerate(zip(self.branch_strides, REQUIRED_DOWNSAMPLE, strict=True)):
            total = tuple(int(np.prod([b[axis] for b in blocks])) for axis in range(3))
            if total != required:
                raise ValueError(f"Branch {i + 1} downsamples by {total}, expected {required}")
        if not self.layout or any(kind not in LAYER_KINDS for kind in self.layout):
            raise ValueError(f"Block layout must be a non-empty sequence of {LAYER_KINDS}, got {self.layout}")


def _check_aligned(fine: VoxelSpec, coarse: VoxelSpec) -> np.ndarray:
    ratio = np.asarray(coarse.voxel_size) / np.asarray(fine.voxel_size)
    rounded = np.round(ratio)
    if (
        np.any(rounded < 1)
        or not np.allclose(ratio, rounded, atol=1e-6)
        or not np.allclose(fine.range_min, coarse.range_min, atol=1e-9)
    ):
        raise ValueError(f"Grid misalignment: voxel {fine.voxel_size} cannot pool onto {coarse.voxel_size}")
    return rounded.astype(np.int64)


def align_to(x: SparseVoxelTensor, spec: VoxelSpec) -> SparseVoxelTensor:
    """
    Mean-pool a tensor onto a coarser grid whose voxel size is an integer multiple.

    Raises:
        ValueError: On grid misalignment
    """
    ratio = _check_aligned(x.spec, spec)
    if np.all(ratio == 1):
        return SparseVoxelTensor(x.coords, x.features, spec, x.level)
    keys = spec.flat_keys(x.coords // ratio)
    unique_keys, groups = np.unique(keys, return_inverse=True)
    pooled = ops.group_reduce_mean(x.features, groups.reshape(-1), len(unique_keys))
    return SparseVoxelTensor(spec.unflatten_keys(unique_keys), pooled, spec, x.level)


def union_concat(a: SparseVoxelTensor, b: SparseVoxelTensor, level: str = "") -> SparseVoxelTensor:
    """Channel concatenation over the union of active sites; a missing side is zero."""
    _check_aligned(a.spec, b.spec)
    _check_aligned(b.spec, a.spec)
    keys_a, keys_b = a.spec.flat_keys(a.coords), b.spec.flat_keys(b.coords)
    union = np.union1d(keys_a, keys_b).astype(np.int64)
    n = len(union)
    left = ops.scatter_rows(a.features, np.searchsorted(union, keys_a), n)
    right = ops.scatter_rows(b.features, np.searchsorted(union, keys_b), n)
    return SparseVoxelTensor(a.spec.unflatten_keys(union), ops.concat([left, right], axis=1), a.spec, level)


class SparseBlock(Module):
    def __init__(
        self,
        store: ParamStore,
        name: str,
        cin: int,
        cout: int,
        stride: Stride,
        layout: tuple[str, ...],
        rng: np.random.Generator,
    ):
        super().__init__(store, name)
        self.layers = []
        for j, kind in enumerate(layout):
            layer_stride = stride if j == 0 else (1, 1, 1)
            strided = kind == "spconv" or layer_stride != (1, 1, 1)
            mode = ConvMode.STRIDED if strided else ConvMode.SUBMANIFOLD
            self.layers.append(
                SparseConv3d(store, f"{name}.conv{j}", cin if j == 0 else cout, cout, rng, layer_stride, mode)
            )

    def forward(self, tape: Tape, x: SparseVoxelTensor) -> SparseVoxelTensor:
        for layer in self.layers:
            x = layer(tape, x)
        return x


class Encoder3D(Module):
    """
    Branch i runs its blocks on S_i; the first layer doubles the channels.

    F_1 = f_1(S_1), F_2 = f_2(S_2), F_3 = Cat(F_1, f_3(S_3)), F_4 = Cat(F_2, f_4(S_4)).
    """

    def __init__(
        self,
        store: ParamStore,
        in_channels: list[int],
        rng: np.random.Generator,
        config: EncoderConfig | None = None,
        name: str = "enc3d",
    ):
        super().__init__(store, name)
        self.config = config or EncoderConfig()
        if len(in_channels) != len(self.config.branch_strides):
            raise ValueError(f"Encoder expects {len(self.config.branch_strides)} inputs, got {len(in_channels)}")
        self.branches: list[list[SparseBlock]] = []
        for i, (cin, strides) in enumerate(zip(in_channels, self.config.branch_strides, strict=True)):
            width = 2 * cin
            blocks = [
                SparseBlock(store, f"{name}.branch{i + 1}.block{b + 1}", cin if b == 0 else width, width, stride, self.config.layout, rng)
                for b, stride in enumerate(strides)
            ]
            self.branches.append(blocks)
        widths = [2 * c for c in in_channels]
        self.out_channels = [widths[0], widths[1], widths[0] + widths[2], widths[1] + widths[3]]

    def output_specs(self, specs: list[VoxelSpec]) -> list[VoxelSpec]:
        """Grids of F_1..F_4 for inputs on ``specs``."""
        out = []
        for spec, strides in zip(specs, self.config.branch_strides, strict=True):
            for stride in strides:
                spec = spec.scaled(stride)
            out.append(spec)
        return out

    def run_branch(self, tape: Tape, index: int, x: SparseVoxelTensor) -> SparseVoxelTensor:
        for block in self.branches[index]:
            x = block(tape, x)
        return x

    def forward(self, tape: Tape, inputs: list[SparseVoxelTensor]) -> list[SparseVoxelTensor]:
        if len(inputs) != len(self.branches):
            raise ValueError(f"Encoder expects {len(self.branches)} inputs, got {len(inputs)}")
        f = [self.run_branch(tape, i, s) for i, s in enumerate(inputs)]
        out = [
            SparseVoxelTensor(f[0].coords, f[0].features, f[0].spec, "F1"),
            SparseVoxelTensor(f[1].coords, f[1].features, f[1].spec, "F2"),
            union_concat(align_to(f[0], f[2].spec), f[2], "F3"),
            union_concat(align_to(f[1], f[3].spec), f[3], "F4"),
        ]
        for t in out:
            logger.debug(f"{t.level}: {len(t)} sites, {t.channels} channels, grid {t.spec.grid_dims}")
        return out
