from typing import Optional, Sequence, Tuple

import torch
from torch import nn, Tensor
import torch.nn.functional as F

from .layers import ConvLSTMCell, ConvStack, StreamState, check_stream, init_parameters


class AttentionNet(nn.Module):
    """Human-gaze predictor on backbone features of the low-resolution frame.

    Three conv layers, a ConvLSTM and a 1x1 readout give one logit per grid cell;
    a softmax over the whole grid turns them into an attention map.
    """

    def __init__(self,
                 head_specs: Sequence,
                 hidden_channels: int = 8,
                 grid: Sequence[int] = (9, 16),
                 dropout: float = 0.2,
                 recurrent_kernel: int = 3,
                 seed: int = 0):
        super().__init__()
        self.grid = tuple(grid)
        self.head = ConvStack(head_specs, norm=True, dropout=dropout)
        self.recurrent = ConvLSTMCell(head_specs[-1].out_channels, hidden_channels, self.grid, recurrent_kernel)
        self.readout = nn.Conv2d(hidden_channels, 1, 1)
        init_parameters(self, seed)

    @classmethod
    def from_config(cls, config, seed: Optional[int] = None) -> 'AttentionNet':
        return cls(config.attention_head,
                   hidden_channels=config.attention_hidden_channels,
                   grid=config.grid,
                   dropout=config.dropout,
                   recurrent_kernel=config.recurrent_kernel,
                   seed=config.seed if seed is None else seed)

    def init_state(self, clip_id: Optional[str] = None, batch: int = 1) -> StreamState:
        return StreamState(clip_id, (self.recurrent.init_state(batch),))

    def _log_normalize(self, logits: Tensor) -> Tensor:
        flat = F.log_softmax(logits.flatten(1), dim=1)
        return flat.view(-1, *self.grid)

    def step(self, features: Tensor, state: StreamState,
             clip_id: Optional[str] = None) -> Tuple[Tensor, StreamState]:
        """One frame: (N, C, h, w) backbone features -> (N, 9, 16) attention map."""
        check_stream(state, clip_id)
        h, cell_state = self.recurrent(self.head(features), state.states[0])
        return self._log_normalize(self.readout(h)).exp(), StreamState(clip_id, (cell_state,))

    def forward(self, features: Tensor) -> Tensor:
        """A clip of (T, C, h, w) backbone features -> (T, 9, 16) log attention maps."""
        x = self.head(features)
        state = self.recurrent.init_state()
        logits = []
        for t in range(x.shape[0]):
            h, state = self.recurrent(x[t:t + 1], state)
            logits.append(self.readout(h))
        return self._log_normalize(torch.cat(logits))


def attention_kl(log_pred: Tensor, target: Tensor) -> Tensor:
    """Mean over frames of KL(target || prediction)."""
    return F.kl_div(log_pred.flatten(1), target.flatten(1), reduction='batchmean')
