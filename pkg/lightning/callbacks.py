from pathlib import Path
from typing import Optional

import pytorch_lightning as pl
import torch
from pytorch_lightning.utilities import rank_zero_info

from models.checkpoint import save_weights


class WeightsExport(pl.Callback):
    """Writes `<dirpath>/<name>.weights.json` when fitting ends.

    `dirpath` defaults to the trainer root directory and `name` to the kind of
    model being exported (`attention` or `driving`).

    With `use_best`, the weights of the trainer's best checkpoint (lowest
    monitored metric) are restored into the module before exporting; without a
    saved best checkpoint the last epoch's weights are exported. The metadata
    records which one under `source`.

    Modules opt in through `export_module()` and `export_metadata()`; the dataset
    fingerprint of the datamodule, if any, is added to the metadata.
    """

    def __init__(self, dirpath: Optional[str] = None, name: Optional[str] = None, use_best: bool = True):
        super().__init__()
        self.dirpath = dirpath
        self.name = name
        self.use_best = use_best

    def path(self, trainer: pl.Trainer, name: str) -> Path:
        root = Path(self.dirpath or trainer.default_root_dir)
        return root / f'{name}.weights.json'

    def best_checkpoint(self, trainer: pl.Trainer) -> Optional[str]:
        callback = trainer.checkpoint_callback
        path = getattr(callback, 'best_model_path', '') if callback is not None else ''
        return path if path and Path(path).exists() else None

    def on_fit_end(self, trainer: pl.Trainer, pl_module: pl.LightningModule) -> None:
        if not hasattr(pl_module, 'export_module') or not trainer.is_global_zero:
            return
        metadata = dict(pl_module.export_metadata())
        best = self.best_checkpoint(trainer) if self.use_best else None
        if best is not None:
            checkpoint = torch.load(best, map_location='cpu', weights_only=False)
            pl_module.load_state_dict(checkpoint['state_dict'])
            metadata['source'] = {'checkpoint': Path(best).name, 'epoch': checkpoint.get('epoch')}
        else:
            metadata['source'] = {'checkpoint': None, 'epoch': trainer.current_epoch}
        datamodule = getattr(trainer, 'datamodule', None)
        if datamodule is not None and hasattr(datamodule, 'fingerprint'):
            metadata['dataset'] = datamodule.fingerprint
        name = self.name or metadata.get('kind', 'model')
        path = save_weights(pl_module.export_module(), self.path(trainer, name), metadata)
        rank_zero_info(f'Exported weights to {path}')
