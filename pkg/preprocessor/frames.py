from dataclasses import dataclass
from typing import Sequence, Tuple

import torch
from torch import Tensor

from models.layers import ShapeError, resample_grid

IMAGENET_MEAN = (123.68, 116.79, 103.939)


@dataclass
class PreprocConfig:
    peripheral_size: Tuple[int, int] = (72, 128)
    patch_size: int = 240
    patch_input_size: int = 185
    mean: Tuple[float, float, float] = IMAGENET_MEAN

    def __post_init__(self):
        self.peripheral_size = tuple(self.peripheral_size)
        if min(self.peripheral_size) < 1 or self.patch_size < 1 or self.patch_input_size < 1:
            raise ValueError('Resolutions must be positive')
        if len(self.mean) != 3:
            raise ValueError('Need one mean offset per RGB channel')


def to_model_input(frames: Tensor, dtype=torch.float64) -> Tensor:
    """uint8 (..., 3, H, W) -> float tensor of the same layout."""
    if frames.dim() < 3 or frames.shape[-3] != 3:
        raise ShapeError(f'expected RGB frames (..., 3, H, W), got {tuple(frames.shape)}')
    return frames.to(dtype)


def subtract_mean(x: Tensor, mean: Sequence[float]) -> Tensor:
    return x - torch.tensor(mean, dtype=x.dtype, device=x.device).view(3, 1, 1)


def preprocess_peripheral(frames: Tensor, config: PreprocConfig, dtype=torch.float64) -> Tensor:
    """Full-resolution frames -> mean-subtracted low-resolution input.

    Clips are resampled in chunks so only a few full-resolution frames are ever held as floats.
    """
    if frames.dim() == 4:
        x = torch.cat([resample_grid(to_model_input(chunk, dtype), config.peripheral_size)
                       for chunk in frames.split(32)])
    else:
        x = resample_grid(to_model_input(frames, dtype), config.peripheral_size)
    return subtract_mean(x, config.mean)


def crop_and_resize_patch(frame: Tensor, rect: Sequence[int], config: PreprocConfig,
                          dtype=torch.float64) -> Tensor:
    """Crops rect = (top, left, bottom, right) from a (3, H, W) frame and resizes it."""
    top, left, bottom, right = rect
    h, w = frame.shape[-2:]
    if not (0 <= top < bottom <= h and 0 <= left < right <= w):
        raise ValueError(f'Rectangle {tuple(rect)} is not inside a {h}x{w} frame')
    patch = to_model_input(frame[..., top:bottom, left:right], dtype)
    patch = resample_grid(patch, (config.patch_input_size, config.patch_input_size))
    return subtract_mean(patch, config.mean)


def crop_patches(frames: Tensor, rects: Sequence[Sequence[Sequence[int]]], config: PreprocConfig,
                 dtype=torch.float64) -> Tensor:
    """(T, 3, H, W) frames and T lists of n rectangles -> (T, n, 3, s, s) patches."""
    if len(rects) != frames.shape[0]:
        raise ShapeError(f'{len(rects)} rectangle lists for {frames.shape[0]} frames')
    return torch.stack([
        torch.stack([crop_and_resize_patch(frame, rect, config, dtype) for rect in frame_rects])
        for frame, frame_rects in zip(frames, rects)
    ])
