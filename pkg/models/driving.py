from pathlib import Path
from typing import List, NamedTuple, Optional, Tuple, Union

import torch
from torch import nn, Tensor

from preprocessor.fovea import FoveaPlacement, fovea_generator, place_foveae, select_fovea_cells
from preprocessor.frames import crop_patches, preprocess_peripheral
from .attention import AttentionNet
from .backbone import Backbone
from .checkpoint import load_weights, read_weights
from .config import ModelConfig
from .encoders import FovealEncoder, PeripheralEncoder
from .layers import Frozen, init_parameters
from .planner import CombinedPlanner, DualPlanner, concat_features, insert_fovea_features


class ClipOutput(NamedTuple):
    predictions: Tensor
    placements: Optional[List[FoveaPlacement]] = None
    attention: Optional[Tensor] = None


class DrivingModel(nn.Module):
    """Multi-resolution speed predictor.

    The backbone and, for attention-guided policies, the gaze model are frozen; the
    peripheral encoder, foveal encoder and planner are trained.
    """

    def __init__(self, config: ModelConfig, attention: Optional[AttentionNet] = None):
        super().__init__()
        config.validate()
        self.config = config
        self.backbone = Frozen(Backbone(config.backbone, config.backbone_seed))
        self.peripheral = PeripheralEncoder(config.peripheral_head, config.peripheral_feature_size,
                                            config.grid, config.dropout)
        init_parameters(self.peripheral, config.seed)

        self.attention = None
        if config.fovea.uses_attention:
            if attention is None:
                raise ValueError(f'Fovea policy {config.fovea.policy!r} needs a trained attention model')
            self.attention = Frozen(attention)

        self.foveal = None
        if config.has_fovea:
            self.foveal = FovealEncoder(config.foveal_head, config.fovea_feature_size, config.dropout)
            init_parameters(self.foveal, config.seed + 1)

        if config.variant == 'dual':
            self.planner = DualPlanner(config.feature_channels, config.fovea.num_foveae,
                                       config.hidden_channels, config.grid, config.dual_patch_size,
                                       config.fc_widths, config.dropout, config.recurrent_kernel)
        else:
            self.planner = CombinedPlanner(config.planner_input_channels(), config.hidden_channels,
                                           config.grid, config.fc_widths, config.dropout,
                                           config.recurrent_kernel)
        init_parameters(self.planner, config.seed + 2)
        self.double()

    @classmethod
    def from_weights(cls, path: Union[str, Path]) -> Tuple['DrivingModel', dict]:
        _, metadata = read_weights(path)
        config = ModelConfig.from_dict(metadata['model_config'])
        attention = AttentionNet.from_config(config) if config.fovea.uses_attention else None
        model = cls(config, attention)
        load_weights(model, path)
        return model, metadata

    @property
    def dtype(self) -> torch.dtype:
        return self.planner.head.layers[0].weight.dtype

    def trainable_modules(self) -> List[nn.Module]:
        return [m for m in (self.peripheral, self.foveal, self.planner) if m is not None]

    def attention_maps(self, features: Tensor) -> Tensor:
        """(T, C, h, w) backbone features -> (T, 9, 16) attention maps from the frozen gaze model."""
        return self.attention(features).exp()

    def select_placements(self, maps: Optional[Tensor], num_frames: int,
                          generator: Optional[torch.Generator]) -> List[FoveaPlacement]:
        cfg = self.config
        placements = []
        for t in range(num_frames):
            cells = select_fovea_cells(None if maps is None else maps[t], cfg.fovea,
                                       cfg.frame_size, cfg.grid, generator)
            placements.append(place_foveae(cells, cfg.frame_size, cfg.fovea.patch_size, cfg.grid))
        return placements

    def forward_clip(self, frames: Tensor, clip_id: Optional[str] = None,
                     generator: Optional[torch.Generator] = None) -> ClipOutput:
        """(T, 3, H, W) uint8 frames -> T predictions of the speed `horizon` frames later.

        Recurrent states start from zero for every call.
        """
        cfg = self.config
        T = frames.shape[0]
        if T < cfg.horizon + 1:
            raise ValueError(f'Clip {clip_id!r} has {T} frames; need at least {cfg.horizon + 1} '
                             f'for a {cfg.horizon}-frame horizon')
        if tuple(frames.shape[-2:]) != tuple(cfg.frame_size):
            raise ValueError(f'Frames are {tuple(frames.shape[-2:])}, model expects {tuple(cfg.frame_size)}')

        features = self.backbone(preprocess_peripheral(frames, cfg.preproc, self.dtype))
        peripheral = self.peripheral(features)
        if not cfg.has_fovea:
            return ClipOutput(self.planner(peripheral))

        maps = self.attention_maps(features) if self.attention is not None else None
        if generator is None:
            generator = fovea_generator(cfg.fovea.seed, clip_id)
        placements = self.select_placements(maps, T, generator)

        n = cfg.fovea.num_foveae
        patches = crop_patches(frames, [p.rects for p in placements], cfg.preproc, self.dtype)
        foveal = self.foveal(self.backbone(patches.flatten(0, 1))).unflatten(0, (T, n))
        if cfg.variant == 'dual':
            predictions = self.planner(peripheral, foveal, [p.cells for p in placements])
        else:
            grid = insert_fovea_features(foveal, [p.corners for p in placements], cfg.grid)
            predictions = self.planner(concat_features(peripheral, grid))
        return ClipOutput(predictions, placements, maps)

    def forward(self, frames: Tensor, clip_id: Optional[str] = None,
                generator: Optional[torch.Generator] = None) -> Tensor:
        return self.forward_clip(frames, clip_id, generator).predictions
