"""Small functional layer builders on top of the autodiff engine.

Layers register their tensors into a shared Parameters registry at
construction and are plain callables afterwards. Setting `c4=True` on a conv
averages its kernel over the four quarter-turn rotations before every apply,
which makes the layer exactly equivariant to 90-degree rotations of its input
(stride-2 convs additionally need an even kernel so the sampling grid stays
symmetric).
"""

from __future__ import annotations

import numpy as np

from . import engine
from .engine import Parameters, Tensor


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def symmetrize_c4(w: Tensor) -> Tensor:
    total = engine.add(engine.add(w, engine.rot90_spatial(w, 1)),
                       engine.add(engine.rot90_spatial(w, 2), engine.rot90_spatial(w, 3)))
    return engine.scale(total, 0.25)


class Conv:
    def __init__(self, params: Parameters, name: str, cin: int, cout: int, k: int,
                 stride: int = 1, padding: int | None = None, bias: bool = False,
                 rng: np.random.Generator | None = None, zero_init: bool = False,
                 c4: bool = False, dtype=np.float32):
        self.stride = stride
        self.padding = (k - 1) // 2 if padding is None else padding
        self.c4 = c4
        if c4 and stride == 2 and k % 2:
            raise ValueError(f"{name}: stride-2 c4 convs need an even kernel, got {k}")
        if zero_init:
            w = np.zeros((cout, cin, k, k), dtype=dtype)
        else:
            w = he_normal(rng, (cout, cin, k, k), cin * k * k, dtype)
        self.weight = params.add(f"{name}.weight", Tensor(w))
        self.bias = params.add(f"{name}.bias", Tensor(np.zeros(cout, dtype=dtype))) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        w = symmetrize_c4(self.weight) if self.c4 else self.weight
        return engine.conv2d(x, w, stride=self.stride, padding=self.padding, bias=self.bias)


class BatchNorm:
    def __init__(self, params: Parameters, name: str, channels: int, dtype=np.float32):
        self.gamma = params.add(f"{name}.gamma", Tensor(np.ones(channels, dtype=dtype)))
        self.beta = params.add(f"{name}.beta", Tensor(np.zeros(channels, dtype=dtype)))
        self.running_mean = params.add(f"{name}.running_mean", Tensor(np.zeros(channels, dtype=dtype)), buffer=True)
        self.running_var = params.add(f"{name}.running_var", Tensor(np.ones(channels, dtype=dtype)), buffer=True)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return engine.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, training)


class ConvBnRelu:
    def __init__(self, params, name, cin, cout, k, stride=1, padding=None, rng=None, c4=False, dtype=np.float32):
        self.conv = Conv(params, name + ".conv", cin, cout, k, stride, padding, rng=rng, c4=c4, dtype=dtype)
        self.bn = BatchNorm(params, name + ".bn", cout, dtype=dtype)

    def __call__(self, x, training):
        return engine.relu(self.bn(self.conv(x), training))


class ResBlock:
    """conv-bn-relu-conv-bn plus a (projected) skip, then relu."""

    def __init__(self, params, name, cin, cout, rng, c4=False, dtype=np.float32):
        self.conv1 = Conv(params, name + ".conv1", cin, cout, 3, rng=rng, c4=c4, dtype=dtype)
        self.bn1 = BatchNorm(params, name + ".bn1", cout, dtype=dtype)
        self.conv2 = Conv(params, name + ".conv2", cout, cout, 3, rng=rng, c4=c4, dtype=dtype)
        self.bn2 = BatchNorm(params, name + ".bn2", cout, dtype=dtype)
        if cin != cout:
            self.skip = Conv(params, name + ".skip", cin, cout, 1, rng=rng, c4=c4, dtype=dtype)
            self.skip_bn = BatchNorm(params, name + ".skip_bn", cout, dtype=dtype)
        else:
            self.skip = None

    def __call__(self, x, training):
        h = engine.relu(self.bn1(self.conv1(x), training))
        h = self.bn2(self.conv2(h), training)
        s = self.skip_bn(self.skip(x), training) if self.skip is not None else x
        return engine.relu(engine.add(h, s))


def upsample2x(x: Tensor, mode: str) -> Tensor:
    if mode == "nearest":
        return engine.upsample_nearest2x(x)
    if mode == "bilinear":
        return engine.upsample_bilinear2x(x)
    raise ValueError(f"unknown upsample mode {mode!r}")
