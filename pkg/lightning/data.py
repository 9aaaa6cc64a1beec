from typing import List, Optional, Sequence, Tuple

import numpy as np
import pytorch_lightning as pl
from pytorch_lightning.utilities import rank_zero_info, rank_zero_warn
from torch.utils.data import DataLoader

from data.common import SegmentDataset
from data.io import dataset_hash, read_dataset
from data.world import VideoClip


def split_clips(clips: Sequence[VideoClip],
                ratios: Sequence[float] = (0.8, 0.1, 0.1),
                seed: int = 0) -> Tuple[List[VideoClip], List[VideoClip], List[VideoClip]]:
    """Deterministic train / val / test split by whole clips."""
    if len(ratios) != 3 or min(ratios) < 0 or not np.isclose(sum(ratios), 1.0):
        raise ValueError(f'Split ratios must be three non-negative numbers summing to 1, got {ratios}')
    order = np.random.default_rng(seed).permutation(len(clips))
    n_train = int(round(ratios[0] * len(clips)))
    n_val = int(round(ratios[1] * len(clips)))
    train = [clips[k] for k in sorted(order[:n_train])]
    val = [clips[k] for k in sorted(order[n_train:n_train + n_val])]
    test = [clips[k] for k in sorted(order[n_train + n_val:])]
    return train, val, test


class DrivingData(pl.LightningDataModule):
    def __init__(self,
                 data_dir: str,
                 segment_seconds: float = 30.0,
                 eval_segment_seconds: Optional[float] = None,
                 split: Tuple[float, float, float] = (0.8, 0.1, 0.1),
                 split_seed: int = 0,
                 horizon: int = 10,
                 require_gaze: bool = False,
                 num_workers: int = 0):
        super().__init__()
        self.save_hyperparameters()

    @property
    def fingerprint(self) -> str:
        return dataset_hash(self.hparams.data_dir)

    def _segments(self, clips, seconds, name) -> SegmentDataset:
        dataset = SegmentDataset(clips, seconds, self.hparams.horizon)
        if dataset.dropped:
            rank_zero_warn(f'{name}: dropped {dataset.dropped} segments with no prediction target')
        rank_zero_info(f'{name}: {len(clips)} clips, {len(dataset)} segments')
        return dataset

    def setup(self, stage=None):
        clips = read_dataset(self.hparams.data_dir, require_gaze=self.hparams.require_gaze)
        train, val, test = split_clips(clips, self.hparams.split, self.hparams.split_seed)
        self.train_clips, self.val_clips, self.test_clips = train, val, test
        eval_seconds = self.hparams.eval_segment_seconds or self.hparams.segment_seconds

        if stage in ('fit', None):
            self.train_dataset = self._segments(train, self.hparams.segment_seconds, 'train')
        if stage in ('fit', 'validate', None):
            self.val_dataset = self._segments(val, eval_seconds, 'val')
        if stage in ('test', None):
            self.test_dataset = self._segments(test, eval_seconds, 'test')

    def _loader(self, dataset, shuffle=False):
        # one segment per step; segments differ in length
        return DataLoader(dataset, batch_size=None, shuffle=shuffle,
                          num_workers=self.hparams.num_workers)

    def train_dataloader(self):
        return self._loader(self.train_dataset, shuffle=True)

    def val_dataloader(self):
        return self._loader(self.val_dataset)

    def test_dataloader(self):
        return self._loader(self.test_dataset)
