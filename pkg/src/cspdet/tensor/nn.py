"""Module/Parameter containers and the standard layers."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from ..errors import InvalidArgument
from . import functional as F
from . import profiler
from .core import DEFAULT_DTYPE, Tensor

_INIT_RNG = np.random.default_rng(0)


def manual_seed(seed: int) -> None:
    """Reseed the generator used for weight initialization."""
    global _INIT_RNG
    _INIT_RNG = np.random.default_rng(seed)


def init_rng() -> np.random.Generator:
    return _INIT_RNG


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Tree of layers.  Children are discovered from instance attributes,
    including lists and dicts of modules, in assignment order."""

    training = True
    _scope_name = ""

    def __call__(self, *args, **kwargs):
        if profiler._ACTIVE is None:
            return self.forward(*args, **kwargs)
        with profiler.scope(self._scope_name):
            return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    # -- traversal -----------------------------------------------------------
    def _members(self):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            yield key, val

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for key, val in self._members():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, Module):
                        yield f"{key}.{k}", item

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.named_children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in self._members():
            if isinstance(val, Parameter):
                yield (f"{prefix}.{key}" if prefix else key), val
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}.{name}" if prefix else name)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, val in self._members():
            if isinstance(val, F.RunningStats):
                base = f"{prefix}.{key}" if prefix else key
                yield f"{base}.mean", val.mean
                yield f"{base}.var", val.var
        for name, child in self.named_children():
            yield from child.named_buffers(f"{prefix}.{name}" if prefix else name)

    def assign_scope_names(self) -> None:
        for name, mod in self.named_modules():
            mod._scope_name = name

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    # -- state ------------------------------------------------------------------
    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast parameters and running statistics in place (64-bit gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, mod in self.named_modules():
            for _, val in mod._members():
                if isinstance(val, F.RunningStats):
                    val.mean = val.mean.astype(dtype)
                    val.var = val.var.astype(dtype)
        return self


def _normal(shape, std: float) -> np.ndarray:
    return (_INIT_RNG.standard_normal(shape) * std).astype(DEFAULT_DTYPE)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int | None = None,
                 groups: int = 1, bias: bool = True, init_std: float | None = None):
        if in_ch % groups or out_ch % groups:
            raise InvalidArgument(f"channels {in_ch}->{out_ch} not divisible by groups {groups}")
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.groups = groups
        fan_out = out_ch * kernel * kernel // groups
        std = math.sqrt(2.0 / fan_out) if init_std is None else init_std
        self.weight = Parameter(_normal((out_ch, in_ch // groups, kernel, kernel), std))
        self.bias = Parameter(np.zeros(out_ch, dtype=DEFAULT_DTYPE)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class ConvTranspose2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 2):
        fan_out = out_ch * kernel * kernel
        self.kernel = kernel
        self.weight = Parameter(_normal((in_ch, out_ch, kernel, kernel), math.sqrt(2.0 / fan_out)))
        self.bias = Parameter(np.zeros(out_ch, dtype=DEFAULT_DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose2d(x, self.weight, self.bias, stride=self.kernel)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.weight = Parameter(np.ones(channels, dtype=DEFAULT_DTYPE))
        self.bias = Parameter(np.zeros(channels, dtype=DEFAULT_DTYPE))
        self.stats = F.RunningStats(channels, momentum, eps)

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.weight, self.bias, self.stats, "train" if self.training else "eval")


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True, init_std: float | None = None):
        if init_std is None:
            bound = 1.0 / math.sqrt(in_features)
            w = _INIT_RNG.uniform(-bound, bound, (in_features, out_features)).astype(DEFAULT_DTYPE)
        else:
            w = _normal((in_features, out_features), init_std)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features, dtype=DEFAULT_DTYPE)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class ConvBNAct(Module):
    """Conv (no bias) -> BatchNorm -> optional activation."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, groups: int = 1,
                 act: str | None = "swish"):
        self.conv = Conv2d(in_ch, out_ch, kernel, stride, groups=groups, bias=False)
        self.bn = BatchNorm2d(out_ch)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return F.apply_activation(y, self.act) if self.act else y
