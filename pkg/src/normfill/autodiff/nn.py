"""Parameter containers."""

from __future__ import annotations

from typing import Dict, Iterator, Tuple

import numpy as np

from . import functional as F
from .tensor import Tensor, parameter


class Module:
    """Base class; parameters and sub-modules are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None


class Conv2d(Module):
    """Convolution with fan-in scaled uniform init and zero bias."""

    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, gain: float = 2.0, bias: bool = True):
        fan_in = cin * kernel * kernel
        bound = np.sqrt(3.0 * gain / fan_in)
        self.weight = parameter(rng.uniform(-bound, bound, size=(cout, cin, kernel, kernel)))
        self.bias = parameter(np.zeros(cout)) if bias else None
        self.stride = stride
        self.padding = kernel // 2
        self.cin, self.cout, self.kernel = cin, cout, kernel

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def upsampled(self, x: Tensor) -> Tensor:
        """Same as ``self(upsample_nearest2x(x))`` for stride-1 layers."""
        return F.upsample_conv2d(x, self.weight, self.bias)

    def count(self) -> int:
        return self.cout * self.cin * self.kernel ** 2 + (self.cout if self.bias is not None else 0)


def conv_param_count(cin: int, cout: int, kernel: int, bias: bool = True) -> int:
    return cout * cin * kernel * kernel + (cout if bias else 0)
