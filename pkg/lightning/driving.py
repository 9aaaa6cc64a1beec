from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import pytorch_lightning as pl
import torch
import torch.nn.functional as F
from torch import nn

from models.attention import AttentionNet
from models.checkpoint import load_weights, read_weights
from models.config import ModelConfig
from models.driving import DrivingModel
from models.layers import make_adam
from preprocessor.fovea import fovea_generator
from .eval_utils import aggregate_metrics


def load_attention(path: Optional[str], config: ModelConfig) -> AttentionNet:
    """Builds the gaze model for `config` and loads exported weights into it.

    The weights must come from an attention run on the same frozen backbone.
    """
    if path is None or not Path(path).exists():
        raise FileNotFoundError(f'Fovea policy {config.fovea.policy!r} needs a trained attention '
                                f'model; no weights at {path}')
    _, metadata = read_weights(path)
    trained = ModelConfig.from_dict(metadata['model_config'])
    for key in ('backbone', 'backbone_seed', 'peripheral_size', 'attention_head', 'attention_hidden_channels'):
        if getattr(trained, key) != getattr(config, key):
            raise ValueError(f'Attention weights at {path} were trained with a different {key}')
    attention = AttentionNet.from_config(trained).double()
    load_weights(attention, path)
    return attention


LM_ONLY_ARGS = ('lr', 'betas', 'eps', 'attention_checkpoint')


def driving_config(planner: str = 'combined', **kwargs) -> ModelConfig:
    """ModelConfig for `DrivingLM` init args; optimiser and checkpoint args are ignored."""
    kwargs = {k: v for k, v in kwargs.items() if k not in LM_ONLY_ARGS}
    return ModelConfig.build(variant=planner, **kwargs)


def horizon_loss(predictions: torch.Tensor, speed: torch.Tensor, horizon: int) -> torch.Tensor:
    """MSE between the prediction at t and the speed at t + horizon."""
    return F.mse_loss(predictions[:-horizon], speed[horizon:])


class DrivingLM(pl.LightningModule):
    def __init__(self,
                 planner: str = 'combined',
                 policy: str = 'top-k',
                 scale: int = 4,
                 num_foveae: int = 2,
                 temperature: float = 1.0,
                 peripheral_size: Optional[Tuple[int, int]] = None,
                 hidden_channels: int = 8,
                 fc_widths: Tuple[int, ...] = (64, 32, 16, 1),
                 horizon: int = 10,
                 dropout: float = 0.2,
                 lr: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8,
                 seed: int = 0,
                 backbone_seed: int = 1234,
                 attention_checkpoint: Optional[str] = None) -> None:
        super().__init__()
        self.save_hyperparameters()

        self.config = driving_config(
            planner, policy=policy, scale=scale, num_foveae=num_foveae, temperature=temperature,
            peripheral_size=peripheral_size, hidden_channels=hidden_channels, fc_widths=fc_widths,
            horizon=horizon, dropout=dropout, seed=seed, backbone_seed=backbone_seed)
        attention = None
        if self.config.fovea.uses_attention:
            attention = load_attention(attention_checkpoint, self.config)
        self.model = DrivingModel(self.config, attention)
        self._val_losses = []
        self._test_outputs = []

    def forward(self, frames, clip_id=None, generator=None):
        return self.model.forward_clip(frames, clip_id, generator)

    def _predict(self, batch, epoch_key):
        generator = fovea_generator(self.config.fovea.seed, batch['clip_id'], batch['start'], epoch_key)
        return self(batch['frames'], batch['clip_id'], generator).predictions

    def training_step(self, batch, batch_idx):
        pred = self._predict(batch, self.current_epoch)
        loss = horizon_loss(pred, batch['speed'], self.config.horizon)
        self.log('train_loss', loss, on_step=False, on_epoch=True, prog_bar=True, batch_size=1)
        return loss

    def validation_step(self, batch, batch_idx):
        pred = self._predict(batch, 'eval')
        loss = horizon_loss(pred, batch['speed'], self.config.horizon)
        self._val_losses.append(loss.item())
        return loss

    def on_validation_epoch_end(self) -> None:
        if self._val_losses:
            self.log('val_loss', sum(self._val_losses) / len(self._val_losses), prog_bar=True)
        self._val_losses.clear()

    def test_step(self, batch, batch_idx):
        h = self.config.horizon
        pred = self._predict(batch, 'eval')
        self._test_outputs.append((pred[:-h].cpu().numpy(), batch['speed'][h:].cpu().numpy()))

    def on_test_epoch_end(self) -> None:
        if self._test_outputs:
            metrics = aggregate_metrics(self._test_outputs)
            self.log_dict({f'test_{k}': float(v) for k, v in metrics.items()})
        self._test_outputs.clear()

    def configure_optimizers(self):
        params = [p for m in self.model.trainable_modules() for p in m.parameters()]
        return make_adam(params, self.hparams.lr, self.hparams.betas, self.hparams.eps)

    def export_module(self) -> nn.Module:
        return self.model

    def export_metadata(self) -> Dict[str, Any]:
        return {'kind': 'driving', 'model_config': self.config.to_dict(),
                'hparams': dict(self.hparams)}
