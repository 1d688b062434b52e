"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays."""

from __future__ import annotations

import os
from collections.abc import Callable, Sequence
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from ssk.nn.params import ParamStore

DEBUG_FINITE = os.getenv("SSK_DEBUG", "0") not in ("", "0", "false", "False")

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """A float64 array node recorded on a tape."""

    __array_priority__ = 100.0

    def __init__(
        self,
        value: np.ndarray,
        tape: Tape,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.value

    # Arithmetic delegates to ssk.nn.ops; imported lazily to avoid a cycle.
    def __add__(self, other):
        from ssk.nn import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from ssk.nn import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from ssk.nn import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from ssk.nn import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from ssk.nn import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from ssk.nn import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from ssk.nn import ops
        return ops.div(self, other)

    def __neg__(self):
        from ssk.nn import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from ssk.nn import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from ssk.nn import ops
        return ops.index(self, key)

    def sum(self, axis: int | None = None) -> Tensor:
        from ssk.nn import ops
        return ops.sum(self, axis=axis)

    def mean(self, axis: int | None = None) -> Tensor:
        from ssk.nn import ops
        return ops.mean(self, axis=axis)

    def reshape(self, *shape: int) -> Tensor:
        from ssk.nn import ops
        return ops.reshape(self, shape)


class Tape:
    """
    Records differentiable operations in execution order.

    One tape serves one scene. Parameters are read from a ``ParamStore``
    without mutating it, so several tapes may share a store; gradients and
    normalization-statistic updates stay on the tape until the caller
    applies them.
    """

    def __init__(self, training: bool = True, grad: bool = True):
        self.training = training
        self.grad_enabled = grad
        self.nodes: list[Tensor] = []
        self.buffer_updates: dict[str, np.ndarray] = {}
        self._params: dict[str, Tensor] = {}

    def constant(self, value) -> Tensor:
        return Tensor(np.asarray(value, dtype=np.float64), self)

    def variable(self, value, name: str | None = None) -> Tensor:
        """Leaf tensor that accumulates a gradient."""
        return Tensor(np.array(value, dtype=np.float64), self, requires_grad=self.grad_enabled, name=name)

    def param(self, store: ParamStore, name: str) -> Tensor:
        """Leaf tensor bound to a stored parameter; one leaf per name per tape."""
        leaf = self._params.get(name)
        if leaf is None:
            trainable = self.grad_enabled and store.is_trainable(name)
            leaf = Tensor(store.get(name), self, requires_grad=trainable, name=name)
            self._params[name] = leaf
        return leaf

    def lift(self, value) -> Tensor:
        if isinstance(value, Tensor):
            return value
        return self.constant(value)

    def record(
        self,
        value: np.ndarray,
        parents: Sequence[Tensor],
        backward_fn: BackwardFn,
    ) -> Tensor:
        if DEBUG_FINITE and not np.all(np.isfinite(value)):
            raise FloatingPointError(f"Non-finite value produced by {backward_fn.__qualname__}")
        out = Tensor(value, self)
        if self.grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.parents = tuple(parents)
            out.backward_fn = backward_fn
            self.nodes.append(out)
        return out

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(node) through every recorded node in reverse order."""
        if loss.value.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            return
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is None or node.backward_fn is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads, strict=True):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.value.shape:
                    raise ValueError(
                        f"Gradient shape {g.shape} does not match value shape {parent.value.shape}"
                    )
                parent.grad = g if parent.grad is None else parent.grad + g

    def param_grads(self) -> dict[str, np.ndarray]:
        return {
            name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
            for name, leaf in self._params.items()
            if leaf.requires_grad
        }

    def free(self) -> None:
        """Drop the recorded graph so intermediate arrays can be collected."""
        for node in self.nodes:
            node.parents = ()
            node.backward_fn = None
        self.nodes.clear()
