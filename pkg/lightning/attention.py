import math
from typing import Any, Dict, Tuple

import pytorch_lightning as pl
import torch
from torch import nn

from models.attention import AttentionNet, attention_kl
from models.backbone import frozen_backbone
from models.config import ModelConfig
from models.layers import make_adam
from preprocessor.frames import preprocess_peripheral


class AttentionLM(pl.LightningModule):
    """Trains the gaze predictor on low-resolution frames; the backbone stays frozen."""

    def __init__(self,
                 scale: int = 4,
                 hidden_channels: int = 8,
                 dropout: float = 0.2,
                 lr: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8,
                 seed: int = 0,
                 backbone_seed: int = 1234) -> None:
        super().__init__()
        self.save_hyperparameters()

        self.config = ModelConfig.build(scale=scale, attention_hidden_channels=hidden_channels,
                                        dropout=dropout, seed=seed, backbone_seed=backbone_seed)
        self.backbone = frozen_backbone(self.config.backbone, backbone_seed)
        self.model = AttentionNet.from_config(self.config)
        self.double()
        self._val_losses = []
        self._test_losses = []

    def forward(self, frames):
        x = preprocess_peripheral(frames, self.config.preproc, torch.float64)
        return self.model(self.backbone(x))

    def _step(self, batch) -> Tuple[torch.Tensor, torch.Tensor]:
        if 'gaze' not in batch:
            raise ValueError('Attention training needs gaze maps; the dataset has none')
        log_pred = self(batch['frames'])
        gaze = batch['gaze']
        loss = attention_kl(log_pred, gaze)
        uniform = torch.full_like(log_pred, -math.log(log_pred[0].numel()))
        return loss, attention_kl(uniform, gaze)

    def training_step(self, batch, batch_idx):
        loss, _ = self._step(batch)
        self.log('train_loss', loss, on_step=False, on_epoch=True, prog_bar=True, batch_size=1)
        return loss

    def validation_step(self, batch, batch_idx):
        loss, _ = self._step(batch)
        self._val_losses.append(loss.item())
        return loss

    def on_validation_epoch_end(self) -> None:
        if self._val_losses:
            self.log('val_loss', sum(self._val_losses) / len(self._val_losses), prog_bar=True)
        self._val_losses.clear()

    def test_step(self, batch, batch_idx):
        loss, uniform = self._step(batch)
        self._test_losses.append((loss.item(), uniform.item()))
        return loss

    def on_test_epoch_end(self) -> None:
        n = len(self._test_losses)
        if n:
            self.log_dict({
                'test_kl': sum(l for l, _ in self._test_losses) / n,
                'test_kl_uniform': sum(u for _, u in self._test_losses) / n,
            })
        self._test_losses.clear()

    def configure_optimizers(self):
        return make_adam(self.model.parameters(), self.hparams.lr, self.hparams.betas, self.hparams.eps)

    def export_module(self) -> nn.Module:
        return self.model

    def export_metadata(self) -> Dict[str, Any]:
        return {'kind': 'attention', 'model_config': self.config.to_dict(), 'hparams': dict(self.hparams)}
