"""Bird's-eye-view flattening and the 2D encoder built from Base Blocks."""

import logging
from dataclasses import dataclass

import numpy as np

from ssk.geom.voxel_spec import VoxelSpec
from ssk.nn import ops
from ssk.nn.autograd import Tape, Tensor
from ssk.nn.base import Conv2d, Module
from ssk.nn.params import ParamStore
from ssk.voxel.msv import SparseVoxelTensor

logger = logging.getLogger(__name__)

# Output channels of the three Base Blocks per branch
DEFAULT_WIDTHS: tuple[tuple[int, int, int], ...] = (
    (96, 128, 256),
    (96, 128, 256),
    (128, 128, 256),
    (128, 128, 256),
)
BRANCH_DEPTH = 3


@dataclass
class BevMap:
    """H×W×C dense map over the x-y plane of ``spec``; row = y index, column = x index."""

    features: Tensor
    spec: VoxelSpec

    @property
    def shape(self) -> tuple[int, int, int]:
        h, w, c = self.features.shape
        return h, w, c


def bev_channels(channels: int, spec: VoxelSpec) -> int:
    return channels * spec.grid_dims[2]


def to_bev(x: SparseVoxelTensor) -> BevMap:
    """
    Densify and fold the vertical axis into channels.

    Voxel (i, j, k) lands at pixel (j, i), channels [k·C, (k+1)·C).
    """
    w, h, d = x.spec.grid_dims
    c = x.channels
    rows = (x.coords[:, 1] * w + x.coords[:, 0]) * d + x.coords[:, 2]
    dense = ops.scatter_rows(x.features, rows, h * w * d)
    return BevMap(dense.reshape(h, w, d * c), x.spec)


class BaseBlock(Module):
    """
    Parallel 1×1 and 3×3 branches (three conv+ReLU+norm each), concatenated
    and added to the residual path, then 1×1 and 3×3 integration convs.
    """

    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, rng: np.random.Generator):
        super().__init__(store, name)
        self.cin, self.cout = cin, cout
        self.branch1 = [Conv2d(store, f"{name}.b1x1.{j}", cin if j == 0 else cout, cout, rng, kernel=1) for j in range(3)]
        self.branch3 = [Conv2d(store, f"{name}.b3x3.{j}", cin if j == 0 else cout, cout, rng, kernel=3) for j in range(3)]
        # 1×1 projection when the residual width differs from the concatenation
        self.residual = Conv2d(store, f"{name}.residual", cin, 2 * cout, rng, kernel=1, activate=False) if cin != 2 * cout else None
        self.integrate1 = Conv2d(store, f"{name}.integrate1", 2 * cout, cout, rng, kernel=1)
        self.integrate3 = Conv2d(store, f"{name}.integrate3", cout, cout, rng, kernel=3)

    def forward(self, tape: Tape, x: Tensor) -> Tensor:
        if x.shape[2] != self.cin:
            raise ValueError(f"{self.name}: expected {self.cin} channels, got {x.shape[2]}")
        a = x
        for conv in self.branch1:
            a = conv(tape, a)
        b = x
        for conv in self.branch3:
            b = conv(tape, b)
        residual = x if self.residual is None else self.residual(tape, x)
        fused = ops.concat([a, b], axis=2) + residual
        return self.integrate3(tape, self.integrate1(tape, fused))


class Downsample(Module):
    """Depthwise 3×3 stride 2, depthwise 3×3, then a 1×1 channel mix."""

    def __init__(self, store: ParamStore, name: str, channels: int, rng: np.random.Generator):
        super().__init__(store, name)
        self.down = Conv2d(store, f"{name}.down", channels, channels, rng, kernel=3, stride=2, groups=channels)
        self.depthwise = Conv2d(store, f"{name}.depthwise", channels, channels, rng, kernel=3, groups=channels)
        self.mix = Conv2d(store, f"{name}.mix", channels, channels, rng, kernel=1)

    def forward(self, tape: Tape, x: Tensor) -> Tensor:
        return self.mix(tape, self.depthwise(tape, self.down(tape, x)))


class Encoder2D(Module):
    """
    Per branch: B'_i = BaseBlocks(BEV_i), B_i = integrate(Cat(B'_i, D_{i-1})),
    D_i = Downsample(B'_i) for i < 4. The fused output is B_4.
    """

    def __init__(
        self,
        store: ParamStore,
        in_channels: list[int],
        rng: np.random.Generator,
        widths: tuple[tuple[int, ...], ...] = DEFAULT_WIDTHS,
        name: str = "enc2d",
    ):
        super().__init__(store, name)
        if len(widths) != len(in_channels):
            raise ValueError(f"{len(in_channels)} BEV inputs but {len(widths)} width schedules")
        self.in_channels = list(in_channels)
        self.blocks: list[list[BaseBlock]] = []
        self.integrate: list[tuple[Conv2d, Conv2d]] = []
        self.downsample: list[Downsample] = []
        prev_out = 0
        for i, (cin, schedule) in enumerate(zip(in_channels, widths, strict=True)):
            if len(schedule) != BRANCH_DEPTH:
                raise ValueError(f"Branch {i + 1} needs {BRANCH_DEPTH} Base Block widths, got {schedule}")
            branch, width = [], cin
            for j, cout in enumerate(schedule):
                branch.append(BaseBlock(store, f"{name}.branch{i + 1}.block{j + 1}", width, cout, rng))
                width = cout
            self.blocks.append(branch)
            joined = width + prev_out
            self.integrate.append(
                (
                    Conv2d(store, f"{name}.branch{i + 1}.integrate1", joined, width, rng, kernel=1),
                    Conv2d(store, f"{name}.branch{i + 1}.integrate3", width, width, rng, kernel=3),
                )
            )
            if i < len(in_channels) - 1:
                self.downsample.append(Downsample(store, f"{name}.branch{i + 1}.downsample", width, rng))
            prev_out = width
        self.out_channels = prev_out

    def forward(self, tape: Tape, maps: list[BevMap]) -> BevMap:
        if len(maps) != len(self.blocks):
            raise ValueError(f"Encoder expects {len(self.blocks)} BEV maps, got {len(maps)}")
        carry: Tensor | None = None
        out: Tensor | None = None
        for i, bev in enumerate(maps):
            x = bev.features
            if x.shape[2] != self.in_channels[i]:
                raise ValueError(f"BEV map {i + 1} has {x.shape[2]} channels, expected {self.in_channels[i]}")
            for block in self.blocks[i]:
                x = block(tape, x)
            base = x
            if carry is not None:
                if carry.shape[:2] != x.shape[:2]:
                    raise ValueError(f"Branch {i + 1}: downsampled map {carry.shape[:2]} does not match {x.shape[:2]}")
                x = ops.concat([x, carry], axis=2)
            first, second = self.integrate[i]
            out = second(tape, first(tape, x))
            if i < len(self.downsample):
                carry = self.downsample[i](tape, base)
            logger.debug(f"B_{i + 1}: {out.shape}")
        if out is None:
            raise ValueError("Encoder needs at least one BEV map")
        return BevMap(out, maps[-1].spec)
