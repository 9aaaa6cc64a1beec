from typing import List, Optional

import torch
from pytorch_lightning.cli import LightningCLI, lazy_instance
from pytorch_lightning.callbacks import ModelCheckpoint, ModelSummary
from pytorch_lightning.loggers import CSVLogger

from lightning import AttentionLM, DrivingLM
from lightning.callbacks import WeightsExport


def cli_main(args: Optional[List[str]] = None):
    torch.set_default_dtype(torch.float64)
    return LightningCLI(
        seed_everything_default=0,
        trainer_defaults={
            'accelerator': 'cpu',
            'devices': 1,
            'precision': '64-true',
            'deterministic': True,
            'log_every_n_steps': 1,
            'logger': lazy_instance(CSVLogger, save_dir='logs'),
            'callbacks': [
                ModelCheckpoint(
                    save_top_k=1,
                    save_last=True,
                    monitor='val_loss',
                    filename='{epoch}-{step}',
                ),
                ModelSummary(max_depth=3),
                WeightsExport(),
            ]
        },
        args=args,
    )


if __name__ == "__main__":
    cli_main()
