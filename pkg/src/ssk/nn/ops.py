"""Differentiable operators and the segment kernels they share with the voxel module."""

from __future__ import annotations

import builtins
from collections.abc import Sequence

import numpy as np

from ssk.nn.autograd import Tape, Tensor


def _tape_of(*values) -> Tape:
    for v in values:
        if isinstance(v, Tensor):
            return v.tape
    raise ValueError("At least one operand must be a Tensor")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Segment kernels (plain numpy, summation in ascending row order)
# ---------------------------------------------------------------------------


def segment_count(groups: np.ndarray, num_groups: int) -> np.ndarray:
    return np.bincount(groups, minlength=num_groups).astype(np.int64)


def segment_sum(x: np.ndarray, groups: np.ndarray, num_groups: int) -> np.ndarray:
    out = np.zeros((num_groups,) + x.shape[1:], dtype=np.float64)
    np.add.at(out, groups, x)
    return out


def segment_mean(x: np.ndarray, groups: np.ndarray, num_groups: int) -> np.ndarray:
    total = segment_sum(x, groups, num_groups)
    count = segment_count(groups, num_groups)
    shape = (num_groups,) + (1,) * (x.ndim - 1)
    return total / np.maximum(count, 1).reshape(shape)


def segment_max(x: np.ndarray, groups: np.ndarray, num_groups: int) -> tuple[np.ndarray, np.ndarray]:
    """
    Per-group componentwise max and the first row attaining it.

    Empty groups yield 0 with argmax -1.
    """
    n = x.shape[0]
    best = np.full((num_groups,) + x.shape[1:], -np.inf)
    np.maximum.at(best, groups, x)
    rows = np.arange(n).reshape((n,) + (1,) * (x.ndim - 1))
    hit = np.where(x == best[groups], rows, n)
    first = np.full((num_groups,) + x.shape[1:], n, dtype=np.int64)
    np.minimum.at(first, groups, hit)
    empty = first == n
    best[empty] = 0.0
    first[empty] = -1
    return best, first


def _check_groups(groups: np.ndarray, num_groups: int) -> np.ndarray:
    groups = np.asarray(groups, dtype=np.int64)
    if num_groups <= 0 and groups.size:
        raise ValueError("Group id space is empty")
    if groups.size and (groups.min() < 0 or groups.max() >= num_groups):
        raise ValueError(f"Group ids must lie in [0, {num_groups})")
    return groups


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    return tape.record(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    return tape.record(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    return tape.record(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def div(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    return tape.record(
        a.value / b.value,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.shape),
        ),
    )


def matmul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return tape.record(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` with x: N×Cin, weight: Cin×Cout, bias: Cout."""
    if x.value.ndim != 2 or weight.value.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear shape mismatch: x {x.shape}, weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"linear bias shape {bias.shape} does not match Cout={weight.shape[1]}")
    tape = x.tape
    out = x.value @ weight.value
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        out = out + bias.value
        parents = (x, weight, bias)

    def backward(g):
        grads = [g @ weight.value.T, x.value.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return tape.record(out, parents, backward)


# ---------------------------------------------------------------------------
# Unary functions
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return x.tape.record(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.value)
    return x.tape.record(s, (x,), lambda g: (g * s * (1.0 - s),))


def log_sigmoid(x: Tensor) -> Tensor:
    value = -np.logaddexp(0.0, -x.value)
    return x.tape.record(value, (x,), lambda g: (g * (1.0 - _sigmoid(x.value)),))


def log(x: Tensor) -> Tensor:
    return x.tape.record(np.log(x.value), (x,), lambda g: (g / x.value,))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.value)
    return x.tape.record(e, (x,), lambda g: (g * e,))


def abs(x: Tensor) -> Tensor:
    return x.tape.record(np.abs(x.value), (x,), lambda g: (g * np.sign(x.value),))


def square(x: Tensor) -> Tensor:
    return x.tape.record(x.value * x.value, (x,), lambda g: (2.0 * g * x.value,))


def sqrt(x: Tensor) -> Tensor:
    r = np.sqrt(x.value)
    return x.tape.record(r, (x,), lambda g: (0.5 * g / r,))


def power(x: Tensor, exponent: float) -> Tensor:
    return x.tape.record(
        np.power(x.value, exponent),
        (x,),
        lambda g: (g * exponent * np.power(x.value, exponent - 1.0),),
    )


def clamp(x: Tensor, low, high) -> Tensor:
    """Clip to [low, high]; the gradient is zero wherever the clip is active."""
    low = np.asarray(low, dtype=np.float64)
    high = np.asarray(high, dtype=np.float64)
    inside = (x.value > low) & (x.value < high)
    return x.tape.record(np.clip(x.value, low, high), (x,), lambda g: (g * inside,))


def where(condition: np.ndarray, a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = tape.lift(a), tape.lift(b)
    condition = np.asarray(condition, dtype=bool)
    return tape.record(
        np.where(condition, a.value, b.value),
        (a, b),
        lambda g: (
            _unbroadcast(np.where(condition, g, 0.0), a.shape),
            _unbroadcast(np.where(condition, 0.0, g), b.shape),
        ),
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


# ---------------------------------------------------------------------------
# Shape manipulation and reductions
# ---------------------------------------------------------------------------


def sum(x: Tensor, axis: int | None = None) -> Tensor:
    def backward(g):
        if axis is None:
            return (np.full(x.shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return x.tape.record(np.asarray(x.value.sum(axis=axis)), (x,), backward)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    count = x.value.size if axis is None else x.shape[axis]
    return sum(x, axis=axis) / builtins.max(count, 1)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    return x.tape.record(x.value.reshape(tuple(shape)), (x,), lambda g: (g.reshape(original),))


def index(x: Tensor, key) -> Tensor:
    """Basic or integer-array indexing; repeated integer indices accumulate gradient."""
    if isinstance(key, np.ndarray) and key.dtype == bool:
        key = np.nonzero(key)[0]

    def backward(g):
        full = np.zeros_like(x.value)
        np.add.at(full, key, g)
        return (full,)

    return x.tape.record(np.array(x.value[key]), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ranks = {t.value.ndim for t in tensors}
    if len(ranks) != 1:
        raise ValueError(f"concat rank mismatch: {sorted(ranks)}")
    ndim = ranks.pop()
    axis = axis % ndim
    for t in tensors[1:]:
        for dim in range(ndim):
            if dim != axis and t.shape[dim] != tensors[0].shape[dim]:
                raise ValueError(
                    f"concat mismatch on axis {dim}: {tensors[0].shape} vs {t.shape}"
                )
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    value = np.concatenate([t.value for t in tensors], axis=axis)
    return tensors[0].tape.record(
        value, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis))
    )


def scatter_rows(x: Tensor, rows: np.ndarray, num_rows: int) -> Tensor:
    """Place row ``i`` of x at output row ``rows[i]`` (summing collisions); other rows are 0."""
    rows = np.asarray(rows, dtype=np.int64)
    out = np.zeros((num_rows,) + x.shape[1:])
    np.add.at(out, rows, x.value)
    return x.tape.record(out, (x,), lambda g: (g[rows],))


def group_reduce_sum(x: Tensor, groups: np.ndarray, num_groups: int) -> Tensor:
    groups = _check_groups(groups, num_groups)
    return x.tape.record(
        segment_sum(x.value, groups, num_groups), (x,), lambda g: (g[groups],)
    )


def group_reduce_mean(x: Tensor, groups: np.ndarray, num_groups: int) -> Tensor:
    """Per-group arithmetic mean; the backward pass splits each gradient uniformly."""
    groups = _check_groups(groups, num_groups)
    count = np.maximum(segment_count(groups, num_groups), 1)
    shape = (-1,) + (1,) * (x.value.ndim - 1)

    def backward(g):
        return ((g / count.reshape(shape))[groups],)

    return x.tape.record(segment_mean(x.value, groups, num_groups), (x,), backward)


def group_reduce_max(x: Tensor, groups: np.ndarray, num_groups: int) -> Tensor:
    """Per-group componentwise max; the gradient is routed to the first argmax row."""
    groups = _check_groups(groups, num_groups)
    best, first = segment_max(x.value, groups, num_groups)

    def backward(g):
        full = np.zeros_like(x.value)
        valid = first >= 0
        cols = np.broadcast_to(np.arange(x.shape[1]), first.shape)
        np.add.at(full, (first[valid], cols[valid]), g[valid])
        return (full,)

    return x.tape.record(best, (x,), backward)


# ---------------------------------------------------------------------------
# Normalization and convolution
# ---------------------------------------------------------------------------


def channel_norm(
    x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5
) -> tuple[Tensor, np.ndarray | None, np.ndarray | None]:
    """
    Normalize every channel (last axis) over all remaining positions.

    Returns:
        The normalized tensor and the batch mean/variance (None for empty input)
    """
    channels = x.shape[-1]
    flat = x.value.reshape(-1, channels)
    rows = flat.shape[0]
    if rows == 0:
        return x.tape.record(x.value.copy(), (x, scale, shift), lambda g: (g, np.zeros(channels), np.zeros(channels))), None, None

    mu = flat.mean(axis=0)
    var = ((flat - mu) ** 2).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (flat - mu) * inv
    out = (xhat * scale.value + shift.value).reshape(x.shape)

    def backward(g):
        gf = g.reshape(-1, channels)
        dxhat = gf * scale.value
        dx = inv / rows * (rows * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx.reshape(x.shape), (gf * xhat).sum(axis=0), gf.sum(axis=0)

    return x.tape.record(out, (x, scale, shift), backward), mu, var


def conv2d_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """
    Grouped 2D cross-correlation on a single H×W×Cin map.

    Args:
        x: Input map H×W×Cin
        weight: Kernel k×k×(Cin/groups)×Cout
        bias: Optional Cout vector
        stride: Spatial stride
        padding: Zero padding on each border
        groups: Channel groups; must divide Cin and Cout

    Returns:
        Output map H'×W'×Cout with H' = floor((H + 2p - k)/s) + 1
    """
    if x.value.ndim != 3 or weight.value.ndim != 4:
        raise ValueError(f"conv2d expects H×W×C input and k×k×Cin×Cout weight, got {x.shape}, {weight.shape}")
    k = weight.shape[0]
    if k not in (1, 3) or weight.shape[1] != k:
        raise ValueError(f"conv2d supports 1×1 and 3×3 kernels, got {weight.shape[:2]}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    height, width, cin = x.shape
    cout = weight.shape[3]
    if groups < 1 or cin % groups or cout % groups:
        raise ValueError(f"groups={groups} must divide Cin={cin} and Cout={cout}")
    cin_g, cout_g = cin // groups, cout // groups
    if weight.shape[2] != cin_g:
        raise ValueError(f"conv2d weight expects {weight.shape[2]} input channels per group, input has {cin_g}")
    out_h = conv2d_output_size(height, k, stride, padding)
    out_w = conv2d_output_size(width, k, stride, padding)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"conv2d input {height}×{width} too small for kernel {k}, stride {stride}")

    xp = np.pad(x.value, ((padding, padding), (padding, padding), (0, 0)))
    xp = xp.reshape(xp.shape[0], xp.shape[1], groups, cin_g)
    wg = weight.value.reshape(k, k, cin_g, groups, cout_g)
    span_h = stride * (out_h - 1) + 1
    span_w = stride * (out_w - 1) + 1

    out = np.zeros((out_h, out_w, groups, cout_g))
    for di in range(k):
        for dj in range(k):
            patch = xp[di:di + span_h:stride, dj:dj + span_w:stride]
            out += np.einsum("hwgc,cgd->hwgd", patch, wg[di, dj])
    out = out.reshape(out_h, out_w, cout)
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        out = out + bias.value
        parents = (x, weight, bias)

    def backward(g):
        gg = g.reshape(out_h, out_w, groups, cout_g)
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(wg)
        for di in range(k):
            for dj in range(k):
                patch = xp[di:di + span_h:stride, dj:dj + span_w:stride]
                dw[di, dj] = np.einsum("hwgc,hwgd->cgd", patch, gg)
                dxp[di:di + span_h:stride, dj:dj + span_w:stride] += np.einsum("hwgd,cgd->hwgc", gg, wg[di, dj])
        dx = dxp.reshape(dxp.shape[0], dxp.shape[1], cin)[padding:padding + height, padding:padding + width]
        grads = [dx, dw.reshape(weight.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1)))
        return grads

    return x.tape.record(out, parents, backward)
