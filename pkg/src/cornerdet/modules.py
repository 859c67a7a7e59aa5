"""Layer containers: parameter registration, modes, and Conv/BN blocks."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    """Base class; children and parameters are discovered by attribute walk."""

    def __init__(self):
        self.training = True

    def children(self) -> Iterator["Module"]:
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{key}.{i}.")
        for key, value in getattr(self, "_buffers", {}).items():
            yield prefix + key, value

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self) -> "Module":
        self.training = True
        for child in self.children():
            child.train()
        return self

    def eval(self) -> "Module":
        self.training = False
        for child in self.children():
            child.eval()
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming_kernel(rng: np.random.Generator, cout: int, cin: int, kh: int, kw: int) -> np.ndarray:
    std = np.sqrt(2.0 / (cin * kh * kw))
    return rng.normal(0.0, std, size=(cout, cin, kh, kw))


class Conv2d(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        cin: int,
        cout: int,
        kernel_size: int,
        stride: int = 1,
        padding: Optional[int] = None,
        bias: bool = True,
        bias_init: float = 0.0,
    ):
        super().__init__()
        if padding is None:
            padding = (kernel_size - 1) // 2
        self.stride = stride
        self.padding = padding
        self.weight = Parameter(kaiming_kernel(rng, cout, cin, kernel_size, kernel_size), "weight")
        self.bias = Parameter(np.full(cout, bias_init), "bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class TransposeConv2d(Module):
    def __init__(self, rng: np.random.Generator, cin: int, cout: int, kernel_size: int = 2, stride: int = 2):
        super().__init__()
        self.stride = stride
        std = np.sqrt(2.0 / (cin * kernel_size * kernel_size))
        self.weight = Parameter(
            rng.normal(0.0, std, size=(cin, cout, kernel_size, kernel_size)), "weight"
        )

    def forward(self, x: Tensor) -> Tensor:
        return T.transpose_conv2d(x, self.weight, stride=self.stride)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels), "gamma")
        self.beta = Parameter(np.zeros(channels), "beta")
        self._buffers = {
            "running_mean": np.zeros(channels),
            "running_var": np.ones(channels),
        }

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(
            x,
            self.gamma,
            self.beta,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            eps=self.eps,
            momentum=self.momentum,
            training=self.training,
        )


class ConvBN(Module):
    """Conv followed by batch norm, no activation (residual tails, skips)."""

    def __init__(self, rng, cin, cout, kernel_size, stride=1):
        super().__init__()
        self.conv = Conv2d(rng, cin, cout, kernel_size, stride=stride, bias=False)
        self.bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x))


class ConvBNReLU(Module):
    def __init__(self, rng, cin, cout, kernel_size, stride=1):
        super().__init__()
        self.conv = Conv2d(rng, cin, cout, kernel_size, stride=stride, bias=False)
        self.bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.conv(x)))
