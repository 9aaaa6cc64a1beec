import math
from typing import Sequence

import torch
from torch import Tensor


def sinusoidal(position: Tensor,
               features: int,
               min_scale: float = 1.0,
               max_scale: float = 10000.0) -> Tensor:
    """Sinusoid signal of `position` along a new last axis.

    Args:
            position: Tensor of positions, any shape.
            features: Number of output features; the first `features // 2` are sines,
            the rest cosines.
            min_scale: Frequency of the first band.
            max_scale: The last band has frequency `min_scale / max_scale`.

    Returns:
            Tensor of shape `position.shape + (features,)`.
    """
    n_sin = features // 2
    n_bands = features - n_sin
    scale_factor = -math.log(max_scale / min_scale) / max(n_bands - 1, 1)
    div_term = min_scale * torch.exp(
        torch.arange(n_bands, dtype=position.dtype, device=position.device) * scale_factor)
    rads = position[..., None] * div_term
    return torch.cat([torch.sin(rads[..., :n_sin]), torch.cos(rads)], dim=-1)


def positional_encoding(cell: Sequence[int], channels: int, dtype=torch.float64) -> Tensor:
    """Encodes a grid cell (row, col): first half of the channels for the row, second half for the column."""
    if channels % 2:
        raise ValueError(f'Positional encoding needs an even channel count, got {channels}')
    position = torch.tensor([float(cell[0]), float(cell[1])], dtype=dtype)
    return sinusoidal(position, channels // 2).reshape(channels)
