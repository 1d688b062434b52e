"""Base class and shared building blocks for learnable modules."""

from abc import ABC, abstractmethod

import numpy as np

from ssk.nn import ops
from ssk.nn.autograd import Tape, Tensor
from ssk.nn.params import ParamStore

NORM_MOMENTUM = 0.1
NORM_EPS = 1e-5


class Module(ABC):
    """A learnable component whose parameters live in a shared ParamStore."""

    def __init__(self, store: ParamStore, name: str):
        self.store = store
        self.name = name

    def param(self, tape: Tape, key: str) -> Tensor:
        return tape.param(self.store, f"{self.name}.{key}")

    @abstractmethod
    def forward(self, tape: Tape, *args, **kwargs):
        """Run the module on a tape."""
        pass

    def __call__(self, tape: Tape, *args, **kwargs):
        return self.forward(tape, *args, **kwargs)


class Linear(Module):
    """Fully connected layer with He-initialized weights and zero bias."""

    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, rng: np.random.Generator, bias_init: float = 0.0):
        super().__init__(store, name)
        self.cin, self.cout = cin, cout
        store.add(f"{name}.weight", rng.normal(0.0, np.sqrt(2.0 / max(cin, 1)), size=(cin, cout)))
        store.add(f"{name}.bias", np.full(cout, bias_init))

    def forward(self, tape: Tape, x: Tensor) -> Tensor:
        if x.shape[-1] != self.cin:
            raise ValueError(f"{self.name}: expected {self.cin} input channels, got {x.shape[-1]}")
        return ops.linear(x, self.param(tape, "weight"), self.param(tape, "bias"))


class ChannelNorm(Module):
    """
    Per-channel affine normalization.

    Training tapes normalize with batch statistics and queue running-stat
    updates on the tape; evaluation tapes use the running statistics.
    """

    def __init__(self, store: ParamStore, name: str, channels: int):
        super().__init__(store, name)
        self.channels = channels
        store.add(f"{name}.scale", np.ones(channels))
        store.add(f"{name}.shift", np.zeros(channels))
        store.add(f"{name}.running_mean", np.zeros(channels), buffer=True)
        store.add(f"{name}.running_var", np.ones(channels), buffer=True)

    def forward(self, tape: Tape, x: Tensor) -> Tensor:
        scale, shift = self.param(tape, "scale"), self.param(tape, "shift")
        if tape.training:
            out, mu, var = ops.channel_norm(x, scale, shift, eps=NORM_EPS)
            if mu is not None and var is not None:
                rm = self.store.get(f"{self.name}.running_mean")
                rv = self.store.get(f"{self.name}.running_var")
                tape.buffer_updates[f"{self.name}.running_mean"] = (1 - NORM_MOMENTUM) * rm + NORM_MOMENTUM * mu
                tape.buffer_updates[f"{self.name}.running_var"] = (1 - NORM_MOMENTUM) * rv + NORM_MOMENTUM * var
            return out
        rm = self.store.get(f"{self.name}.running_mean")
        rv = self.store.get(f"{self.name}.running_var")
        return (x - rm) * (1.0 / np.sqrt(rv + NORM_EPS)) * scale + shift


class Fcn(Module):
    """Linear → ChannelNorm → ReLU."""

    def __init__(self, store: ParamStore, name: str, cin: int, cout: int, rng: np.random.Generator):
        super().__init__(store, name)
        self.linear = Linear(store, f"{name}.linear", cin, cout, rng)
        self.norm = ChannelNorm(store, f"{name}.norm", cout)

    def forward(self, tape: Tape, x: Tensor) -> Tensor:
        return ops.relu(self.norm(tape, self.linear(tape, x)))


class Conv2d(Module):
    """2D convolution, optionally followed by ReLU and ChannelNorm."""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        cin: int,
        cout: int,
        rng: np.random.Generator,
        kernel: int = 3,
        stride: int = 1,
        groups: int = 1,
        activate: bool = True,
        bias_init: float = 0.0,
    ):
        super().__init__(store, name)
        self.cin, self.cout = cin, cout
        self.kernel, self.stride, self.groups = kernel, stride, groups
        self.padding = kernel // 2
        fan_in = kernel * kernel * (cin // groups)
        store.add(f"{name}.weight", rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(kernel, kernel, cin // groups, cout)))
        store.add(f"{name}.bias", np.full(cout, bias_init))
        self.norm = ChannelNorm(store, f"{name}.norm", cout) if activate else None

    def forward(self, tape: Tape, x: Tensor) -> Tensor:
        out = ops.conv2d(
            x,
            self.param(tape, "weight"),
            self.param(tape, "bias"),
            stride=self.stride,
            padding=self.padding,
            groups=self.groups,
        )
        if self.norm is None:
            return out
        return self.norm(tape, ops.relu(out))
