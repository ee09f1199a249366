"""Layer zoo: modules with parameters, activations, norms, and the cost model.

Cost convention used throughout: one multiply-accumulate = 2 FLOPs, conv/linear
FLOPs = 2 * weight_params * output_positions per image, bias/norm/activation/pool/
resize cost excluded. Parameter counts come from the live tensors so the reported
numbers can never drift from the built model.
"""
from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, concat, conv2d, max_pool2d, upsample_nearest2x


def make_divisible(x: float, divisor: int = 8) -> int:
    return max(divisor, int(math.ceil(x / divisor) * divisor))


def autopad(k: int) -> int:
    return k // 2


# ---- activations ----


def hswish(x: Tensor) -> Tensor:
    return x * (x + 3.0).clamp(0.0, 6.0) * (1.0 / 6.0)


def mish(x: Tensor) -> Tensor:
    return x * x.softplus().tanh()


def silu(x: Tensor) -> Tensor:
    return x * x.sigmoid()


ACTIVATIONS = {
    "leakyrelu": lambda x: x.leaky_relu(0.01),
    "hswish": hswish,
    "mish": mish,
    "gelu": lambda x: x.gelu(),
    "silu": silu,
    "relu": lambda x: x.relu(),
    "sigmoid": lambda x: x.sigmoid(),
    "identity": lambda x: x,
}


def activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


# ---- module base ----


class Module:
    def __init__(self):
        self.training = True
        self._buffer_names: set[str] = set()

    def register_buffer(self, name: str, value: Tensor) -> None:
        setattr(self, name, value)
        self._buffer_names.add(name)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _owned(self):
        for name, value in vars(self).items():
            if name.startswith("_") or name == "training":
                continue
            yield name, value

    def named_parameters(self, prefix: str = ""):
        for name, value in self._owned():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad and name not in self._buffer_names:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = ""):
        for name, value in self._owned():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if name in self._buffer_names:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_state(self, prefix: str = ""):
        """Parameters plus buffers: everything a checkpoint must carry."""
        yield from self.named_parameters(prefix)
        yield from self.named_buffers(prefix)

    def modules(self):
        yield self
        for _, value in self._owned():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def flops(self, hw: tuple[int, int]) -> int:
        """FLOPs for one image at the given input spatial size; override per layer."""
        return 0

    def out_hw(self, hw: tuple[int, int]) -> tuple[int, int]:
        return hw


# ---- parameterized layers ----


def _he_weight(rng: np.random.Generator, cout: int, cin_per_group: int, k: int) -> Tensor:
    fan_in = cin_per_group * k * k
    w = rng.standard_normal((cout, cin_per_group, k, k)) * math.sqrt(2.0 / fan_in)
    return Tensor(w.astype(np.float32), requires_grad=True)


class Conv2d(Module):
    def __init__(self, c1: int, c2: int, k: int = 1, s: int = 1, p: int | None = None,
                 g: int = 1, bias: bool = True, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        if c1 % g or c2 % g:
            raise ValueError("channels must divide groups")
        self.c1, self.c2, self.k, self.s, self.g = c1, c2, k, s, g
        self.p = autopad(k) if p is None else p
        self.weight = _he_weight(rng, c2, c1 // g, k)
        self.bias = Tensor(np.zeros(c2, np.float32), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.s, padding=self.p, groups=self.g)

    def out_hw(self, hw):
        h, w = hw
        return ((h + 2 * self.p - self.k) // self.s + 1,
                (w + 2 * self.p - self.k) // self.s + 1)

    def flops(self, hw):
        ho, wo = self.out_hw(hw)
        return 2 * self.weight.size * ho * wo


class BatchNorm2d(Module):
    def __init__(self, c: int, eps: float = 1e-5, momentum: float = 0.03):
        super().__init__()
        self.c, self.eps, self.momentum = c, eps, momentum
        self.weight = Tensor(np.ones(c, np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(c, np.float32), requires_grad=True)
        self.register_buffer("running_mean", Tensor(np.zeros(c, np.float32)))
        self.register_buffer("running_var", Tensor(np.ones(c, np.float32)))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ValueError("BatchNorm2d expects NCHW")
        if self.training:
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            var = ((x - mu) ** 2).mean(axis=(0, 2, 3), keepdims=True)
            n = x.size // x.shape[1]
            with np.errstate(all="ignore"):
                unbiased = var.numpy() * (n / max(n - 1, 1))
            m = self.momentum
            self.running_mean.data = ((1 - m) * self.running_mean.data
                                      + m * mu.numpy().reshape(-1)).astype(np.float32)
            self.running_var.data = ((1 - m) * self.running_var.data
                                     + m * unbiased.reshape(-1)).astype(np.float32)
        else:
            mu = self.running_mean.reshape(1, self.c, 1, 1)
            var = self.running_var.reshape(1, self.c, 1, 1)
        xhat = (x - mu) / ((var + self.eps) ** 0.5)
        return xhat * self.weight.reshape(1, self.c, 1, 1) + self.bias.reshape(1, self.c, 1, 1)


class LayerNorm(Module):
    """Normalizes the last axis; optional affine."""

    def __init__(self, d: int, eps: float = 1e-5, affine: bool = True):
        super().__init__()
        self.d, self.eps, self.affine = d, eps, affine
        if affine:
            self.weight = Tensor(np.ones(d, np.float32), requires_grad=True)
            self.bias = Tensor(np.zeros(d, np.float32), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        xhat = (x - mu) / ((var + self.eps) ** 0.5)
        if self.affine:
            return xhat * self.weight + self.bias
        return xhat


class Linear(Module):
    def __init__(self, cin: int, cout: int, bias: bool = True,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.cin, self.cout = cin, cout
        w = rng.standard_normal((cin, cout)) * math.sqrt(1.0 / cin)
        self.weight = Tensor(w.astype(np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, np.float32), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class ConvBnAct(Module):
    """Conv -> BN -> activation, the detector's standard building block."""

    def __init__(self, c1: int, c2: int, k: int = 1, s: int = 1, p: int | None = None,
                 g: int = 1, act: str = "mish", bn: bool = True,
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.conv = Conv2d(c1, c2, k, s, p, g, bias=not bn, rng=rng)
        self.bn = BatchNorm2d(c2) if bn else None
        self.act_name = act
        self.act = activation(act)

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv(x)
        if self.bn is not None:
            y = self.bn(y)
        return self.act(y)

    def out_hw(self, hw):
        return self.conv.out_hw(hw)

    def flops(self, hw):
        return self.conv.flops(hw)


def channel_shuffle(x: Tensor, groups: int = 2) -> Tensor:
    """Interleave channel groups; a pure permutation, hence exactly invertible."""
    n, c, h, w = x.shape
    if c % groups:
        raise ValueError(f"channel_shuffle: {c} channels not divisible by {groups} groups")
    y = x.reshape(n, groups, c // groups, h, w)
    y = y.transpose(0, 2, 1, 3, 4)
    return y.reshape(n, c, h, w)


# ---- structural blocks shared by both models ----


class Bottleneck(Module):
    """1x1 reduce -> 3x3 conv, optional residual."""

    def __init__(self, c1: int, c2: int, shortcut: bool = True, e: float = 1.0,
                 act: str = "mish", rng: np.random.Generator | None = None):
        super().__init__()
        ch = int(c2 * e)
        self.cv1 = ConvBnAct(c1, ch, 1, act=act, rng=rng)
        self.cv2 = ConvBnAct(ch, c2, 3, act=act, rng=rng)
        self.add = shortcut and c1 == c2

    def forward(self, x: Tensor) -> Tensor:
        y = self.cv2(self.cv1(x))
        return x + y if self.add else y

    def flops(self, hw):
        return self.cv1.flops(hw) + self.cv2.flops(hw)


class C3(Module):
    """Cross-stage block: split 1x1 branches, n bottlenecks on one, concat, fuse."""

    def __init__(self, c1: int, c2: int, n: int = 1, shortcut: bool = True,
                 e: float = 0.5, act: str = "mish", rng: np.random.Generator | None = None):
        super().__init__()
        ch = int(c2 * e)
        self.cv1 = ConvBnAct(c1, ch, 1, act=act, rng=rng)
        self.cv2 = ConvBnAct(c1, ch, 1, act=act, rng=rng)
        self.m = [Bottleneck(ch, ch, shortcut, e=1.0, act=act, rng=rng) for _ in range(n)]
        self.cv3 = ConvBnAct(2 * ch, c2, 1, act=act, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        y = self.cv1(x)
        for b in self.m:
            y = b(y)
        return self.cv3(concat([y, self.cv2(x)], axis=1))

    def flops(self, hw):
        total = self.cv1.flops(hw) + self.cv2.flops(hw) + self.cv3.flops(hw)
        total += sum(b.flops(hw) for b in self.m)
        return total


class SPPF(Module):
    """Spatial pyramid pooling, fast variant: three chained k-pools, concat, fuse."""

    def __init__(self, c1: int, c2: int, k: int = 5, act: str = "mish",
                 rng: np.random.Generator | None = None):
        super().__init__()
        ch = c1 // 2
        self.cv1 = ConvBnAct(c1, ch, 1, act=act, rng=rng)
        self.cv2 = ConvBnAct(ch * 4, c2, 1, act=act, rng=rng)
        self.k = k

    def forward(self, x: Tensor) -> Tensor:
        y = self.cv1(x)
        p1 = max_pool2d(y, self.k, 1, padding=self.k // 2)
        p2 = max_pool2d(p1, self.k, 1, padding=self.k // 2)
        p3 = max_pool2d(p2, self.k, 1, padding=self.k // 2)
        return self.cv2(concat([y, p1, p2, p3], axis=1))

    def flops(self, hw):
        return self.cv1.flops(hw) + self.cv2.flops(hw)


class Upsample2x(Module):
    def forward(self, x: Tensor) -> Tensor:
        return upsample_nearest2x(x)

    def out_hw(self, hw):
        return (hw[0] * 2, hw[1] * 2)


class Concat(Module):
    def __init__(self, axis: int = 1):
        super().__init__()
        self.axis = axis

    def forward(self, xs: list[Tensor]) -> Tensor:
        return concat(xs, axis=self.axis)
