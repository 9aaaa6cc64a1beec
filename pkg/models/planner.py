from typing import Optional, Sequence, Tuple

import torch
from torch import nn, Tensor

from .layers import ConvLSTMCell, FCHead, ShapeError, StreamState, check_stream
from .utils import positional_encoding


def insert_fovea_features(patches: Tensor, corners: Sequence[Sequence[Sequence[int]]],
                          grid: Sequence[int] = (9, 16)) -> Tensor:
    """Writes (N, n, C, s, s) fovea patches into a zero (N, C, gh, gw) grid.

    Where patches overlap the elementwise maximum is kept, so the result does not
    depend on insertion order.
    """
    if patches.dim() != 5:
        raise ShapeError(f'expected (N, n, C, s, s) patches, got {tuple(patches.shape)}')
    N, n, C, s, _ = patches.shape
    gh, gw = grid
    canvas = patches.new_full((N, n, C, gh, gw), float('-inf'))
    for b in range(N):
        if len(corners[b]) != n:
            raise ShapeError(f'{len(corners[b])} corners for {n} patches')
        for k, (h, w) in enumerate(corners[b]):
            if not (0 <= h <= gh - s and 0 <= w <= gw - s):
                raise ValueError(f'Corner {(h, w)} puts a {s}x{s} patch outside the {gh}x{gw} grid')
            canvas[b, k, :, h:h + s, w:w + s] = patches[b, k]
    merged = canvas.amax(dim=1)
    return torch.where(torch.isinf(merged), torch.zeros_like(merged), merged)


def concat_features(peripheral: Tensor, foveal: Tensor) -> Tensor:
    """Channel concatenation, peripheral channels first."""
    if peripheral.shape != foveal.shape:
        raise ShapeError(f'cannot fuse peripheral {tuple(peripheral.shape)} '
                         f'with foveal {tuple(foveal.shape)}')
    return torch.cat([peripheral, foveal], dim=-3)


class CombinedPlanner(nn.Module):
    """ConvLSTM over the fused grid followed by the FC speed head.

    Also serves the periphery-only variant, which feeds the peripheral grid alone.
    """

    def __init__(self, in_channels: int, hidden_channels: int = 8, grid: Sequence[int] = (9, 16),
                 fc_widths: Sequence[int] = (64, 32, 16, 1), dropout: float = 0.2, kernel: int = 3):
        super().__init__()
        self.recurrent = ConvLSTMCell(in_channels, hidden_channels, grid, kernel)
        self.head = FCHead(hidden_channels * grid[0] * grid[1], fc_widths, dropout)

    def init_state(self, clip_id: Optional[str] = None, batch: int = 1) -> StreamState:
        return StreamState(clip_id, (self.recurrent.init_state(batch),))

    def step(self, x: Tensor, state: StreamState,
             clip_id: Optional[str] = None) -> Tuple[Tensor, StreamState]:
        check_stream(state, clip_id)
        h, cell_state = self.recurrent(x, state.states[0])
        return self.head(h.flatten(1)).squeeze(-1), StreamState(clip_id, (cell_state,))

    def forward(self, x: Tensor) -> Tensor:
        """(T, C, gh, gw) -> (T,) speed predictions with a fresh state."""
        state = self.recurrent.init_state()
        hidden = []
        for t in range(x.shape[0]):
            h, state = self.recurrent(x[t:t + 1], state)
            hidden.append(h)
        return self.head(torch.cat(hidden).flatten(1)).squeeze(-1)


class DualPlanner(nn.Module):
    """Separate ConvLSTM streams for the peripheral grid and the merged foveal patches.

    Each foveal patch gets the positional encoding of its cell added to every location;
    the n patches are then stacked along channels into one foveal stream.
    """

    def __init__(self, feature_channels: int = 8, num_foveae: int = 2, hidden_channels: int = 8,
                 grid: Sequence[int] = (9, 16), patch_size: int = 14,
                 fc_widths: Sequence[int] = (64, 32, 16, 1), dropout: float = 0.2, kernel: int = 3):
        super().__init__()
        self.feature_channels = feature_channels
        self.num_foveae = num_foveae
        self.peripheral = ConvLSTMCell(feature_channels, hidden_channels, grid, kernel)
        self.foveal = ConvLSTMCell(feature_channels * num_foveae, hidden_channels,
                                   (patch_size, patch_size), kernel)
        flat = hidden_channels * (grid[0] * grid[1] + patch_size * patch_size)
        self.head = FCHead(flat, fc_widths, dropout)

    def merge_foveae(self, patches: Tensor, cells: Sequence[Sequence[Sequence[int]]]) -> Tensor:
        """(N, n, C, s, s) patches + cells -> (N, n * C, s, s) with positions encoded."""
        N, n, C = patches.shape[:3]
        if n != self.num_foveae or C != self.feature_channels:
            raise ShapeError(f'expected {self.num_foveae} foveal patches with {self.feature_channels} '
                             f'channels, got {tuple(patches.shape)}')
        encodings = torch.stack([
            torch.stack([positional_encoding(cell, C, patches.dtype) for cell in frame_cells])
            for frame_cells in cells
        ]).to(patches.device)
        return (patches + encodings[..., None, None]).flatten(1, 2)

    def init_state(self, clip_id: Optional[str] = None, batch: int = 1) -> StreamState:
        return StreamState(clip_id, (self.peripheral.init_state(batch), self.foveal.init_state(batch)))

    def _readout(self, hp: Tensor, hf: Tensor) -> Tensor:
        return self.head(torch.cat([hp.flatten(1), hf.flatten(1)], dim=1)).squeeze(-1)

    def step(self, peripheral: Tensor, patches: Tensor, cells, state: StreamState,
             clip_id: Optional[str] = None) -> Tuple[Tensor, StreamState]:
        check_stream(state, clip_id)
        hp, sp = self.peripheral(peripheral, state.states[0])
        hf, sf = self.foveal(self.merge_foveae(patches, cells), state.states[1])
        return self._readout(hp, hf), StreamState(clip_id, (sp, sf))

    def forward(self, peripheral: Tensor, patches: Tensor, cells) -> Tensor:
        """(T, C, gh, gw), (T, n, C, s, s) and T cell lists -> (T,) predictions."""
        foveal = self.merge_foveae(patches, cells)
        sp = self.peripheral.init_state()
        sf = self.foveal.init_state()
        hps, hfs = [], []
        for t in range(peripheral.shape[0]):
            hp, sp = self.peripheral(peripheral[t:t + 1], sp)
            hf, sf = self.foveal(foveal[t:t + 1], sf)
            hps.append(hp)
            hfs.append(hf)
        return self._readout(torch.cat(hps), torch.cat(hfs))
