from typing import Sequence

from torch import nn, Tensor

from .layers import ConvStack, ShapeError, resample_grid


class PeripheralEncoder(nn.Module):
    """Trainable head over backbone features of the whole frame, upsampled to the attention grid."""

    def __init__(self, head_specs: Sequence, feature_size: Sequence[int],
                 grid: Sequence[int] = (9, 16), dropout: float = 0.2):
        super().__init__()
        self.feature_size = tuple(feature_size)
        self.grid = tuple(grid)
        self.head = ConvStack(head_specs, norm=True, dropout=dropout)

    def forward(self, features: Tensor) -> Tensor:
        x = self.head(features)
        if tuple(x.shape[-2:]) != self.feature_size:
            raise ShapeError(f'peripheral head yields {tuple(x.shape[1:])}, '
                             f'expected spatial size {self.feature_size}')
        return resample_grid(x, self.grid)


class FovealEncoder(nn.Module):
    """Head over backbone features of one fovea patch; shared by all foveae of a frame.

    Combined mode emits a patch-span x patch-span grid (3x3), dual mode a 14x14 grid.
    """

    def __init__(self, head_specs: Sequence, output_size: int, dropout: float = 0.2):
        super().__init__()
        self.output_size = output_size
        self.head = ConvStack(head_specs, norm=True, dropout=dropout)

    def forward(self, features: Tensor) -> Tensor:
        y = self.head(features)
        if tuple(y.shape[-2:]) != (self.output_size, self.output_size):
            raise ShapeError(f'foveal head yields {tuple(y.shape[1:])}, '
                             f'expected {self.output_size}x{self.output_size}')
        return y
