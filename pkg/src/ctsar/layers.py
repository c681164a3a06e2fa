"""Layer modules and the CTSAR-CNN stack.

The network is five stages of ``Conv2d(3x3, pad 1) -> ReLU -> ResBlock ->
MaxPool2d(2, 2)``, with spatial self-attention after the first and fourth
pools, followed by a 3x3 adaptive average pool and a two-layer head.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import functional as F
from .tensor import ShapeError, Tensor, add, matmul, mul, relu, reshape

NUM_CLASSES = 4
POOLED_GRID = 3


class Module:
    """Minimal container tracking parameters and children in assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=data.dtype)


def _he_normal(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> Tensor:
    return _param((rng.standard_normal(shape) * F.he_std(fan_in)).astype(dtype))


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 padding: int = 1, rng: Optional[np.random.Generator] = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = _he_normal(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, dtype)
        self.bias = _param(np.zeros(out_channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ResBlock(Module):
    """``relu(x + conv2(relu(conv1(x))))`` with channel- and extent-preserving 3x3 convs."""

    def __init__(self, channels: int, rng=None, dtype=np.float32):
        super().__init__()
        self.conv1 = Conv2d(channels, channels, 3, 1, 1, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(channels, channels, 3, 1, 1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return relu(add(x, self.conv2(relu(self.conv1(x)))))


class MaxPool2d(Module):
    def __init__(self, kernel_size: int = 2, stride: int = 2):
        super().__init__()
        self.kernel_size, self.stride = kernel_size, stride

    def forward(self, x: Tensor) -> Tensor:
        return F.max_pool2d(x, self.kernel_size, self.stride)


class AdaptiveAvgPool2d(Module):
    def __init__(self, output_size: int = POOLED_GRID):
        super().__init__()
        self.output_size = output_size

    def forward(self, x: Tensor) -> Tensor:
        return F.adaptive_avg_pool2d(x, self.output_size)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng()
        self.in_features, self.out_features = in_features, out_features
        self.weight = _he_normal(rng, (out_features, in_features), in_features, dtype)
        self.bias = _param(np.zeros(out_features, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class PointwiseConv(Module):
    """1x1 convolution applied to a flattened ``[B, C, N]`` feature map."""

    def __init__(self, in_channels: int, out_channels: int, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng()
        self.weight = _he_normal(rng, (out_channels, in_channels, 1, 1), in_channels, dtype)
        self.bias = _param(np.zeros(out_channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        out_c, in_c = self.weight.shape[:2]
        w = reshape(self.weight, (out_c, in_c))
        return add(matmul(w, x), reshape(self.bias, (out_c, 1)))


class SelfAttention(Module):
    """Spatial self-attention over all H*W positions with a zero-initialised gate.

    Queries and keys are projected to C/8 channels, values keep C channels.
    Returns ``x + gamma * o`` where ``o[:, :, i] = sum_j A[i, j] v[:, :, j]``
    and each row of ``A`` is a softmax over key positions.
    """

    def __init__(self, channels: int, rng=None, dtype=np.float32):
        super().__init__()
        if channels % 8:
            raise ShapeError(f"SelfAttention needs channels divisible by 8, got {channels}")
        self.channels = channels
        self.q = PointwiseConv(channels, channels // 8, rng=rng, dtype=dtype)
        self.k = PointwiseConv(channels, channels // 8, rng=rng, dtype=dtype)
        self.v = PointwiseConv(channels, channels, rng=rng, dtype=dtype)
        self.gamma = _param(np.zeros(1, dtype=dtype))

    def attention_map(self, x: Tensor) -> np.ndarray:
        """The ``[B, N, N]`` softmax map (rows index query positions)."""
        B, C, H, W = x.shape
        flat = reshape(x, (B, C, H * W))
        return F.spatial_attention(self.q(flat), self.k(flat), self.v(flat)).attention

    def forward(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        if C != self.channels:
            raise ShapeError(f"SelfAttention built for {self.channels} channels, got input {x.shape}")
        flat = reshape(x, (B, C, H * W))
        o = F.spatial_attention(self.q(flat), self.k(flat), self.v(flat))
        return add(x, mul(self.gamma, reshape(o, (B, C, H, W))))


@dataclass(frozen=True)
class LayerSpec:
    index: int  # row number in the architecture table (row 11 does not exist)
    kind: str
    in_channels: Optional[int] = None
    out_channels: Optional[int] = None
    kernel: Optional[int] = None
    stride: Optional[int] = None
    padding: Optional[int] = None


BASE_CHANNELS = (64, 128, 256, 512, 512)
ATTENTION_STAGES = (0, 3)
HIDDEN = 1024


def table2_specs(channels=BASE_CHANNELS, hidden: int = HIDDEN, attention: bool = True) -> list[LayerSpec]:
    specs: list[LayerSpec] = []
    rows = iter([1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 12, 13, 14, 15, 16, 17, 18])
    cin = 3
    for stage, c in enumerate(channels):
        specs.append(LayerSpec(next(rows), "Conv2d", cin, c, 3, 1, 1))
        specs.append(LayerSpec(next(rows), "ResBlock", c, c))
        specs.append(LayerSpec(next(rows), "MaxPool2d", c, c, 2, 2))
        if stage in ATTENTION_STAGES:
            row = next(rows)
            if attention:
                specs.append(LayerSpec(row, "SelfAttention", c, c))
        cin = c
    flat = channels[-1] * POOLED_GRID * POOLED_GRID
    specs.append(LayerSpec(19, "AdaptiveAvgPool2d", cin, cin, POOLED_GRID))
    specs.append(LayerSpec(20, "Linear", flat, hidden))
    specs.append(LayerSpec(21, "Linear", hidden, NUM_CLASSES))
    return specs


class Stage(Module):
    def __init__(self, cin: int, cout: int, attention: bool, rng, dtype):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, 1, 1, rng=rng, dtype=dtype)
        self.res = ResBlock(cout, rng=rng, dtype=dtype)
        self.pool = MaxPool2d(2, 2)
        self.attn = SelfAttention(cout, rng=rng, dtype=dtype) if attention else None

    def layers(self) -> list[Module]:
        return [m for m in (self.conv, self.res, self.pool, self.attn) if m is not None]

    def forward(self, x: Tensor) -> Tensor:
        x = self.pool(self.res(relu(self.conv(x))))
        return self.attn(x) if self.attn is not None else x


class Head(Module):
    def __init__(self, in_features: int, hidden: int, rng, dtype):
        super().__init__()
        self.fc1 = Linear(in_features, hidden, rng=rng, dtype=dtype)
        self.fc2 = Linear(hidden, NUM_CLASSES, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(x)))


class CTSARCNN(Module):
    def __init__(self, channels=BASE_CHANNELS, hidden: int = HIDDEN, attention: bool = True,
                 seed: Optional[int] = 0, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.channels = tuple(int(c) for c in channels)
        self.hidden = hidden
        self.has_attention = attention
        cin = 3
        for i, c in enumerate(self.channels):
            setattr(self, f"block{i + 1}", Stage(cin, c, attention and i in ATTENTION_STAGES, rng, dtype))
            cin = c
        self.avgpool = AdaptiveAvgPool2d(POOLED_GRID)
        self.head = Head(cin * POOLED_GRID * POOLED_GRID, hidden, rng, dtype)

    @property
    def stages(self) -> list[Stage]:
        return [getattr(self, f"block{i + 1}") for i in range(len(self.channels))]

    @property
    def specs(self) -> list[LayerSpec]:
        return table2_specs(self.channels, self.hidden, self.has_attention)

    def layers(self) -> list[Module]:
        out: list[Module] = []
        for stage in self.stages:
            out.extend(stage.layers())
        return out + [self.avgpool, self.head.fc1, self.head.fc2]

    def census(self) -> Counter:
        return Counter(type(m).__name__ for m in self.layers())

    def forward(self, x: Tensor) -> Tensor:
        for stage in self.stages:
            x = stage(x)
        x = self.avgpool(x)
        return self.head(reshape(x, (x.shape[0], -1)))

    def trace_shapes(self, x: Tensor) -> list[tuple[LayerSpec, tuple]]:
        """Run a forward pass recording the output shape after every table row."""
        trace = []
        specs = iter(self.specs)
        for stage in self.stages:
            x = relu(stage.conv(x))
            trace.append((next(specs), x.shape))
            for layer in (stage.res, stage.pool, stage.attn):
                if layer is None:
                    continue
                x = layer(x)
                trace.append((next(specs), x.shape))
        x = self.avgpool(x)
        trace.append((next(specs), x.shape))
        x = relu(self.head.fc1(reshape(x, (x.shape[0], -1))))
        trace.append((next(specs), x.shape))
        x = self.head.fc2(x)
        trace.append((next(specs), x.shape))
        return trace


def scaled_channels(width_mult: float) -> tuple[int, ...]:
    """Channel counts scaled by ``width_mult``, rounded to multiples of 8."""
    if width_mult <= 0:
        raise ValueError(f"width_mult must be positive, got {width_mult}")
    return tuple(max(8, int(round(c * width_mult / 8)) * 8) for c in BASE_CHANNELS)


def build_ctsar_cnn(seed: int = 0, width_mult: float = 1.0, attention: bool = True, dtype=np.float32) -> CTSARCNN:
    """Build the network with fan-in scaled normal weights, zero biases and zero attention gates."""
    return CTSARCNN(scaled_channels(width_mult), HIDDEN, attention=attention, seed=seed, dtype=dtype)


def model_from_state(state: dict[str, np.ndarray], dtype=np.float32) -> CTSARCNN:
    """Rebuild a network whose shapes match ``state`` and load it."""
    channels = tuple(state[f"block{i + 1}.conv.weight"].shape[0] for i in range(len(BASE_CHANNELS)))
    hidden = state["head.fc1.weight"].shape[0]
    attention = any(".attn." in name for name in state)
    model = CTSARCNN(channels, hidden, attention=attention, seed=None, dtype=dtype)
    model.load_state_dict(state)
    return model
