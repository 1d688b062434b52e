"""Rulebooks: per-offset (input slot, output slot) pairs for 3×3×3 sparse convolution."""

from dataclasses import dataclass
from enum import Enum
from itertools import product

import numpy as np

# Offsets in kernel order
KERNEL_OFFSETS = np.array(list(product((-1, 0, 1), repeat=3)), dtype=np.int64)
CENTER_OFFSET = 13


class ConvMode(str, Enum):
    SUBMANIFOLD = "submanifold"
    STRIDED = "strided"


@dataclass(frozen=True)
class Rulebook:
    """
    ``pairs[k]`` lists (input slot, output slot) for kernel offset ``KERNEL_OFFSETS[k]``.

    Output ``o`` reads input ``o·stride + offset``.
    """

    in_slots: tuple[np.ndarray, ...]
    out_slots: tuple[np.ndarray, ...]
    out_coords: np.ndarray
    out_dims: tuple[int, int, int]
    stride: tuple[int, int, int]
    mode: ConvMode
    num_inputs: int

    @property
    def num_outputs(self) -> int:
        return len(self.out_coords)

    def num_pairs(self) -> int:
        return int(sum(len(p) for p in self.in_slots))


def _keys(coords: np.ndarray, dims) -> np.ndarray:
    return (coords[:, 0] * dims[1] + coords[:, 1]) * dims[2] + coords[:, 2]


def _lookup(sorted_keys: np.ndarray, order: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Slot of each query key in the ordered key table, -1 when absent."""
    if len(sorted_keys) == 0:
        return np.full(len(queries), -1, dtype=np.int64)
    pos = np.searchsorted(sorted_keys, queries)
    pos = np.minimum(pos, len(sorted_keys) - 1)
    return np.where(sorted_keys[pos] == queries, order[pos], -1)


def strided_output_dims(dims, stride) -> tuple[int, int, int]:
    """Output grid of a 3-wide, padding-1 convolution: floor((D - 1)/s) + 1 per axis."""
    out = tuple((int(d) - 1) // int(s) + 1 for d, s in zip(dims, stride, strict=True))
    return out[0], out[1], out[2]


def build_rulebook(
    coords: np.ndarray,
    grid_dims,
    stride=(1, 1, 1),
    mode: ConvMode | str = ConvMode.SUBMANIFOLD,
) -> Rulebook:
    """
    Build the gather/scatter pairs for one 3×3×3 convolution with padding 1.

    Submanifold mode keeps the output sites equal to the input sites and
    requires stride 1. Strided mode activates every output whose receptive
    field touches an active input.

    Raises:
        ValueError: On stride < 1, strided submanifold, or coordinates outside the grid
    """
    mode = ConvMode(mode)
    stride = tuple(int(s) for s in np.broadcast_to(np.asarray(stride), (3,)))
    if min(stride) < 1:
        raise ValueError(f"Stride must be >= 1, got {stride}")
    if mode is ConvMode.SUBMANIFOLD and stride != (1, 1, 1):
        raise ValueError(f"Submanifold convolution keeps the active set and needs stride 1, got {stride}")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    dims = np.asarray(grid_dims, dtype=np.int64)
    if len(coords) and (coords.min() < 0 or np.any(coords.max(axis=0) >= dims)):
        raise ValueError(f"Active coordinates outside grid {tuple(dims)}")

    in_keys = _keys(coords, dims)
    in_order = np.argsort(in_keys, kind="stable")
    in_sorted = in_keys[in_order]
    if len(in_sorted) > 1 and np.any(np.diff(in_sorted) == 0):
        raise ValueError("Duplicate active coordinates")

    if mode is ConvMode.SUBMANIFOLD:
        out_dims = tuple(int(d) for d in dims)
        out_coords = coords
        in_slots, out_slots = [], []
        for offset in KERNEL_OFFSETS:
            neighbor = coords + offset
            valid = np.all((neighbor >= 0) & (neighbor < dims), axis=1)
            slot = np.full(len(coords), -1, dtype=np.int64)
            slot[valid] = _lookup(in_sorted, in_order, _keys(neighbor[valid], dims))
            hit = np.nonzero(slot >= 0)[0]
            in_slots.append(slot[hit])
            out_slots.append(hit)
        return Rulebook(tuple(in_slots), tuple(out_slots), out_coords, (out_dims[0], out_dims[1], out_dims[2]), stride, mode, len(coords))

    out_dims = strided_output_dims(dims, stride)
    out_dims_arr = np.asarray(out_dims)
    step = np.asarray(stride)
    candidates = []
    for offset in KERNEL_OFFSETS:
        shifted = coords - offset
        out = shifted // step
        valid = np.all((shifted % step == 0) & (out >= 0) & (out < out_dims_arr), axis=1)
        candidates.append((np.nonzero(valid)[0], out[valid]))
    all_out = np.concatenate([c[1] for c in candidates]) if candidates else np.zeros((0, 3), dtype=np.int64)
    out_keys = np.unique(_keys(all_out, out_dims_arr))
    out_coords = np.stack(
        [out_keys // (out_dims[1] * out_dims[2]), (out_keys // out_dims[2]) % out_dims[1], out_keys % out_dims[2]],
        axis=1,
    ).astype(np.int64)
    in_slots, out_slots = [], []
    for rows, out in candidates:
        in_slots.append(rows.astype(np.int64))
        out_slots.append(np.searchsorted(out_keys, _keys(out, out_dims_arr)).astype(np.int64))
    return Rulebook(tuple(in_slots), tuple(out_slots), out_coords.reshape(-1, 3), out_dims, stride, mode, len(coords))
