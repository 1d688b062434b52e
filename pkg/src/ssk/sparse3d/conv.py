"""Gather-multiply-scatter sparse convolution and its module wrapper."""

import numpy as np

from ssk.nn import ops
from ssk.nn.autograd import Tape, Tensor
from ssk.nn.base import ChannelNorm, Module
from ssk.nn.params import ParamStore
from ssk.sparse3d.rulebook import KERNEL_OFFSETS, ConvMode, Rulebook, build_rulebook
from ssk.voxel.msv import SparseVoxelTensor

KERNEL_VOLUME = len(KERNEL_OFFSETS)


def sparse_conv_apply(rb: Rulebook, features: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """
    Apply a 27-offset kernel along a rulebook.

    Args:
        rb: Rulebook built from the coordinates of ``features``
        features: M×Cin input rows
        weight: 27×Cin×Cout kernel in ``KERNEL_OFFSETS`` order
        bias: Optional Cout vector added to every output row

    Returns:
        M'×Cout output rows aligned with ``rb.out_coords``
    """
    if features.value.ndim != 2 or features.shape[0] != rb.num_inputs:
        raise ValueError(f"Rulebook expects {rb.num_inputs} input rows, got features {features.shape}")
    if weight.shape[:2] != (KERNEL_VOLUME, features.shape[1]) or weight.value.ndim != 3:
        raise ValueError(f"Kernel shape {weight.shape} does not fit {features.shape[1]} input channels")
    cout = weight.shape[2]
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"Bias shape {bias.shape} does not match Cout={cout}")

    x, w = features.value, weight.value
    out = np.zeros((rb.num_outputs, cout))
    for k in range(KERNEL_VOLUME):
        if len(rb.in_slots[k]):
            np.add.at(out, rb.out_slots[k], x[rb.in_slots[k]] @ w[k])
    parents: tuple[Tensor, ...] = (features, weight)
    if bias is not None:
        out = out + bias.value
        parents = (features, weight, bias)

    def backward(g):
        dx = np.zeros_like(x)
        dw = np.zeros_like(w)
        for k in range(KERNEL_VOLUME):
            src, dst = rb.in_slots[k], rb.out_slots[k]
            if len(src):
                np.add.at(dx, src, g[dst] @ w[k].T)
                dw[k] = x[src].T @ g[dst]
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return features.tape.record(out, parents, backward)


class SparseConv3d(Module):
    """3×3×3 sparse convolution → ReLU → ChannelNorm on a SparseVoxelTensor."""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        cin: int,
        cout: int,
        rng: np.random.Generator,
        stride=(1, 1, 1),
        mode: ConvMode | str = ConvMode.SUBMANIFOLD,
    ):
        super().__init__(store, name)
        self.cin, self.cout = cin, cout
        self.stride = tuple(int(s) for s in np.broadcast_to(np.asarray(stride), (3,)))
        self.mode = ConvMode(mode)
        if self.mode is ConvMode.SUBMANIFOLD and self.stride != (1, 1, 1):
            raise ValueError(f"{name}: submanifold layers cannot stride {self.stride}")
        fan_in = KERNEL_VOLUME * cin
        store.add(f"{name}.weight", rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(KERNEL_VOLUME, cin, cout)))
        store.add(f"{name}.bias", np.zeros(cout))
        self.norm = ChannelNorm(store, f"{name}.norm", cout)

    def forward(self, tape: Tape, x: SparseVoxelTensor) -> SparseVoxelTensor:
        if x.channels != self.cin:
            raise ValueError(f"{self.name}: expected {self.cin} channels, got {x.channels}")
        rb = build_rulebook(x.coords, x.spec.grid_dims, self.stride, self.mode)
        out = sparse_conv_apply(rb, x.features, self.param(tape, "weight"), self.param(tape, "bias"))
        out = self.norm(tape, ops.relu(out))
        spec = x.spec.scaled(self.stride) if self.stride != (1, 1, 1) else x.spec
        if spec.grid_dims != rb.out_dims:
            raise ValueError(f"{self.name}: output grid {rb.out_dims} disagrees with spec grid {spec.grid_dims}")
        return SparseVoxelTensor(rb.out_coords, out, spec, x.level)
