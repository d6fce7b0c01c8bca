"""Parameter containers and basic layers built on the op catalogue."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor, default_dtype


def Parameter(data, name: str = "") -> Tensor:
    return Tensor(np.asarray(data, dtype=default_dtype()), requires_grad=True, name=name)


def fan_in_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Parameter(rng.uniform(-bound, bound, size=shape))


class Module:
    """Attribute-registered parameters, buffers and submodules.

    Registration order is attribute assignment order, so ``named_parameters``
    is deterministic.
    """

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, key, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[key] = value
        elif isinstance(value, Module):
            self._modules[key] = value
        elif isinstance(value, np.ndarray):
            self._buffers[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for k, v in self._params.items():
            yield prefix + k, v
        for k, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{k}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for k, v in self._buffers.items():
            yield prefix + k, v
        for k, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}{k}.")

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict((k, p.data) for k, p in self.named_parameters())
        out.update((k, b) for k, b in self.named_buffers())
        return out

    def load_state_dict(self, state: dict) -> None:
        own = self.state_dict()
        for name, arr in own.items():
            if name not in state:
                raise KeyError(f"missing tensor {name!r}")
            if state[name].shape != arr.shape:
                raise ValueError(f"tensor {name!r}: shape {state[name].shape} != {arr.shape}")
        for name, p in self.named_parameters():
            p.data = np.array(state[name], dtype=p.data.dtype)
        for name, b in self.named_buffers():
            b[...] = state[name]

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def freeze(self, frozen: bool = True) -> "Module":
        for p in self.parameters():
            p.requires_grad = not frozen
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to(self, dtype) -> "Module":
        for p in self._params.values():
            p.data = p.data.astype(dtype)
        for k, b in list(self._buffers.items()):
            setattr(self, k, b.astype(dtype))
        for m in self._modules.values():
            m.to(dtype)
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._modules)), m)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, i):
        return list(self._modules.values())[i]


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = fan_in_uniform(rng, (n_in, n_out), n_in)
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    """Channel-last conv with "same" zero padding in time (stride 1 in time by default)."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, kernel=(3, 3), stride=(1, 1)):
        super().__init__()
        kt, kf = kernel
        self.stride = tuple(stride)
        self.padding = (kt // 2, kf // 2)
        self.weight = fan_in_uniform(rng, (kt, kf, c_in, c_out), kt * kf * c_in)
        self.bias = Parameter(np.zeros(c_out))

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        super().__init__()
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=default_dtype())
        self.running_var = np.ones(channels, dtype=default_dtype())

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                                training=self.training)


class GRUCell(Module):
    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.hidden = hidden
        bound = 1.0 / np.sqrt(hidden)
        self.w_ih = Parameter(rng.uniform(-bound, bound, (n_in, 3 * hidden)))
        self.w_hh = Parameter(rng.uniform(-bound, bound, (hidden, 3 * hidden)))
        self.b_ih = Parameter(np.zeros(3 * hidden))
        self.b_hh = Parameter(np.zeros(3 * hidden))

    def forward(self, x: Tensor, h: Tensor) -> Tensor:
        return ops.gru_cell(x, h, self.w_ih, self.w_hh, self.b_ih, self.b_hh)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.weight = Parameter(rng.normal(0.0, 1.0 / np.sqrt(dim), (n, dim)))

    def forward(self, ids) -> Tensor:
        return ops.getitem(self.weight, np.asarray(ids, dtype=np.int64))
