import math
from dataclasses import dataclass
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple

import torch
from torch import nn, Tensor
import torch.nn.functional as F


class ShapeError(ValueError):
    """Raised when a tensor or a configured layer chain has the wrong shape."""


class StaleStateError(RuntimeError):
    """Raised when recurrent state from one clip is fed frames of another."""


def to_hwc(grid: Tensor) -> Tensor:
    """(..., C, H, W) -> (..., H, W, C) row-major view."""
    return grid.movedim(-3, -1)


def _fmt(shape) -> str:
    return 'x'.join(str(s) for s in shape)


def conv2d_forward(x: Tensor, spec, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Valid (no padding) convolution described by `spec`."""
    if x.dim() not in (3, 4):
        raise ShapeError(f'conv2d expects (C, H, W) or (N, C, H, W), got {_fmt(x.shape)}')
    c, h, w = x.shape[-3:]
    if c != spec.in_channels:
        raise ShapeError(f'conv2d expects {spec.in_channels} input channels, got {c} ({_fmt(x.shape)})')
    if h < spec.kernel[0] or w < spec.kernel[1]:
        raise ShapeError(f'conv2d input {h}x{w} is smaller than kernel {_fmt(spec.kernel)}')
    return F.conv2d(x, weight, bias, stride=spec.stride)


def fc_forward(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
               activation: Optional[str] = None) -> Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f'fully-connected layer expects {weight.shape[1]} inputs, got {x.shape[-1]}')
    x = F.linear(x, weight, bias)
    if activation == 'relu':
        x = F.relu(x)
    elif activation is not None:
        raise ValueError(f'Unknown activation: {activation}')
    return x


def xavier_fans(shape: Sequence[int]) -> Tuple[int, int]:
    if len(shape) == 1:
        return shape[0], shape[0]
    receptive = math.prod(shape[2:])
    return shape[1] * receptive, shape[0] * receptive


def xavier_init(shape: Sequence[int], seed: int, dtype=torch.float64) -> Tensor:
    """Glorot normal draw with variance 2 / (fan_in + fan_out)."""
    shape = tuple(int(s) for s in shape)
    if not shape or min(shape) < 1:
        raise ValueError(f'Shape must be positive, got {shape}')
    fan_in, fan_out = xavier_fans(shape)
    generator = torch.Generator().manual_seed(int(seed))
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return torch.randn(shape, generator=generator, dtype=dtype) * std


def init_parameters(module: nn.Module, seed: int):
    """Xavier weights and zero biases for every conv / linear layer, in registration order."""
    k = 0
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            with torch.no_grad():
                m.weight.copy_(xavier_init(m.weight.shape, seed * 1000 + k, m.weight.dtype))
                if m.bias is not None:
                    m.bias.zero_()
            k += 1
    return module


def resample_grid(x: Tensor, size: Sequence[int]) -> Tensor:
    """Bilinear resize of the last two axes.

    Shrinking is antialiased so that detail finer than the output pitch averages out.
    """
    size = tuple(int(s) for s in size)
    if len(size) != 2 or min(size) < 1:
        raise ValueError(f'Target size must be two positive ints, got {size}')
    h, w = x.shape[-2:]
    if (h, w) == size:
        return x
    shrink = size[0] < h or size[1] < w
    y = F.interpolate(x.reshape(-1, 1, h, w), size=size, mode='bilinear',
                      align_corners=False, antialias=shrink)
    return y.reshape(*x.shape[:-2], *size)


class ConvBlock(nn.Module):
    """Conv -> BatchNorm -> ReLU -> Dropout."""

    def __init__(self, spec, norm: bool = True, activation: bool = True, dropout: float = 0.0):
        super().__init__()
        self.spec = spec
        self.conv = nn.Conv2d(spec.in_channels, spec.out_channels, spec.kernel, spec.stride)
        # torch momentum weighs the batch: running = 0.9 * running + 0.1 * batch
        self.norm = nn.BatchNorm2d(spec.out_channels, momentum=0.1) if norm else nn.Identity()
        self.activation = activation
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        x = self.norm(conv2d_forward(x, self.spec, self.conv.weight, self.conv.bias))
        if self.activation:
            x = F.relu(x)
        return self.dropout(x)


class ConvStack(nn.Module):
    def __init__(self, specs: Sequence, norm: bool = True, dropout: float = 0.0):
        super().__init__()
        self.specs = list(specs)
        self.blocks = nn.ModuleList([
            ConvBlock(spec, norm=norm, dropout=dropout) for spec in self.specs
        ])

    def forward(self, x: Tensor) -> Tensor:
        if x.dim() != 4:
            raise ShapeError(f'expected (N, C, H, W) input, got {_fmt(x.shape)}')
        trace = [tuple(x.shape[1:])]
        for i, block in enumerate(self.blocks):
            try:
                x = block(x)
            except ShapeError as e:
                raise ShapeError(f'layer {i}: {e}; trace: '
                                 + ' -> '.join(_fmt(s) for s in trace)) from None
            trace.append(tuple(x.shape[1:]))
        return x


class RecurrentState(NamedTuple):
    hidden: Tensor
    cell: Tensor


@dataclass
class StreamState:
    """Recurrent states of one clip (or segment) together with its id."""
    clip_id: Optional[str]
    states: Tuple[RecurrentState, ...]


def check_stream(state: StreamState, clip_id: Optional[str]):
    if state.clip_id != clip_id:
        raise StaleStateError(f'recurrent state belongs to clip {state.clip_id!r}, '
                              f'got a frame of clip {clip_id!r}; reset the state at clip start')


class ConvLSTMCell(nn.Module):
    """Convolutional LSTM with same-padded gates i, f, o, g."""

    def __init__(self, in_channels: int, hidden_channels: int, size: Sequence[int], kernel: int = 3):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError(f'Same padding needs an odd kernel, got {kernel}')
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels
        self.size = tuple(size)
        self.gates = nn.Conv2d(in_channels + hidden_channels, 4 * hidden_channels,
                               kernel, padding=kernel // 2)

    def init_state(self, batch: int = 1) -> RecurrentState:
        w = self.gates.weight
        zeros = torch.zeros(batch, self.hidden_channels, *self.size, dtype=w.dtype, device=w.device)
        return RecurrentState(zeros, zeros.clone())

    def forward(self, x: Tensor, state: Optional[RecurrentState] = None) -> Tuple[Tensor, RecurrentState]:
        expected = (self.in_channels, *self.size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError(f'recurrent cell expects (N, {_fmt(expected)}), got {_fmt(x.shape)}')
        if state is None:
            state = self.init_state(x.shape[0])
        if state.hidden.shape != state.cell.shape or \
                tuple(state.hidden.shape) != (x.shape[0], self.hidden_channels, *self.size):
            raise ShapeError(f'recurrent state {_fmt(state.hidden.shape)} / {_fmt(state.cell.shape)} '
                             f'does not match (N={x.shape[0]}, {self.hidden_channels}, {_fmt(self.size)})')
        i, f, o, g = self.gates(torch.cat([x, state.hidden], dim=1)).chunk(4, dim=1)
        cell = torch.sigmoid(f) * state.cell + torch.sigmoid(i) * torch.tanh(g)
        hidden = torch.sigmoid(o) * torch.tanh(cell)
        return hidden, RecurrentState(hidden, cell)


class Dense(nn.Linear):
    def __init__(self, in_features: int, out_features: int, activation: Optional[str] = 'relu'):
        super().__init__(in_features, out_features)
        self.activation = activation

    def forward(self, x):
        return fc_forward(x, self.weight, self.bias, self.activation)


class FCHead(nn.Module):
    """Stack of dense layers, ReLU + dropout between them, linear output."""

    def __init__(self, in_features: int, widths: Sequence[int], dropout: float = 0.0):
        super().__init__()
        layers = []
        for k, width in enumerate(widths):
            last = k == len(widths) - 1
            layers.append(Dense(in_features, width, activation=None if last else 'relu'))
            if not last:
                layers.append(nn.Dropout(dropout))
            in_features = width
        self.layers = nn.Sequential(*layers)

    def forward(self, x):
        return self.layers(x)


class Frozen(nn.Module):
    """Holds a module with gradients off and evaluation mode pinned."""

    def __init__(self, module: nn.Module):
        super().__init__()
        self.module = module.requires_grad_(False)
        self.train(False)

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, *args, **kwargs):
        with torch.no_grad():
            return self.module(*args, **kwargs)


def make_adam(parameters: Iterable[nn.Parameter], lr: float = 1e-3,
              betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> torch.optim.Adam:
    trainable: List[nn.Parameter] = [p for p in parameters if p.requires_grad]
    return torch.optim.Adam(trainable, lr=lr, betas=tuple(betas), eps=eps)
