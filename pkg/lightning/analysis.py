from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from data.common import segment_clips, segment_item
from data.world import VideoClip
from models.config import ModelConfig
from models.driving import DrivingModel
from preprocessor.fovea import (FoveaSelectionConfig, fovea_generator, fovea_likelihood, fovea_overlap,
                                place_foveae, select_fovea_cells)
from preprocessor.frames import preprocess_peripheral
from .eval_utils import SUBGROUP_SPEED_LIMIT, EvalReport, evaluate

DIAGNOSTIC_SETTINGS = (('top-k', 1.0), ('sampled', 0.5), ('sampled', 1.0), ('sampled', 2.0))


@dataclass
class PermutationTestResult:
    statistic: Optional[float]
    num_permutations: int
    p_value: Optional[float]
    seed: int
    note: str = ''


def sign_flip_test(contributions: Sequence[float], num_permutations: int = 10000,
                   seed: int = 0) -> PermutationTestResult:
    """Two-sided test of sum(contributions) against random per-unit sign flips.

    Each unit (a video) contributes its share of the statistic; exchanging the two
    models inside a unit flips the sign of that share.
    """
    c = np.asarray(contributions, dtype=np.float64)
    observed = float(c.sum())
    rng = np.random.default_rng(seed)
    signs = rng.integers(0, 2, size=(num_permutations, c.size), dtype=np.int8) * 2 - 1
    permuted = np.abs(signs @ c)
    threshold = abs(observed) * (1 - 1e-12)
    p = (1 + np.count_nonzero(permuted >= threshold)) / (1 + num_permutations)
    return PermutationTestResult(observed, num_permutations, float(p), seed)


@dataclass
class SubgroupAnalysis:
    baseline: str
    model: str
    frames: Dict[str, int] = field(default_factory=dict)
    mae: Dict[str, Dict[str, Optional[float]]] = field(default_factory=dict)
    gains: Dict[str, Optional[float]] = field(default_factory=dict)
    tests: Dict[str, PermutationTestResult] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for name, test in self.tests.items():
            rows.append({'comparison': name, 'baseline': self.baseline, 'model': self.model,
                         'frames': self.frames.get(name), 'gain': self.gains.get(name),
                         **{k: v for k, v in asdict(test).items()}})
        return pd.DataFrame(rows)


def _video_contributions(keys, base_err, model_err, videos, mask):
    """Per-video share of MAE(baseline) - MAE(model) over the frames in `mask`."""
    n = int(mask.sum())
    contributions = np.zeros(len(videos))
    if n == 0:
        return contributions, n
    diff = (np.abs(base_err) - np.abs(model_err)) * mask / n
    for k, v in enumerate(videos):
        contributions[k] = diff[keys == v].sum()
    return contributions, n


def subgroup_analysis(baseline: EvalReport, model: EvalReport,
                      num_permutations: int = 10000, seed: int = 0,
                      speed_limit: float = SUBGROUP_SPEED_LIMIT) -> SubgroupAnalysis:
    """Gain of `model` over `baseline` on pedestrian-tagged and other frames.

    gain = MAE(baseline) - MAE(model); model labels are permuted per whole video.
    """
    frames_a = [(r.clip_id, r.frame) for r in baseline.records]
    frames_b = [(r.clip_id, r.frame) for r in model.records]
    if frames_a != frames_b:
        raise ValueError('The two reports were not evaluated on identical frames')
    target = np.array([r.target for r in baseline.records])
    pedestrian = np.array([r.pedestrian for r in baseline.records], dtype=bool)
    keys = np.array([r.clip_id for r in baseline.records])
    videos = sorted(set(keys.tolist()))
    base_err, model_err = baseline.errors(), model.errors()

    kept = target <= speed_limit
    masks = {'pedestrian': kept & pedestrian, 'other': kept & ~pedestrian}
    result = SubgroupAnalysis(baseline.name, model.name)
    shares = {}
    for name, mask in masks.items():
        share, n = _video_contributions(keys, base_err, model_err, videos, mask)
        result.frames[name] = n
        if n == 0:
            result.mae[name] = {'baseline': None, 'model': None}
            result.gains[name] = None
            result.tests[name] = PermutationTestResult(None, num_permutations, None, seed,
                                                       note=f'no {name} frames')
            continue
        shares[name] = share
        result.mae[name] = {'baseline': float(np.abs(base_err[mask]).mean()),
                            'model': float(np.abs(model_err[mask]).mean())}
        result.gains[name] = result.mae[name]['baseline'] - result.mae[name]['model']
        result.tests[name] = sign_flip_test(share, num_permutations, seed)

    result.frames['difference'] = result.frames['pedestrian'] + result.frames['other']
    if len(shares) == 2:
        result.gains['difference'] = result.gains['pedestrian'] - result.gains['other']
        result.tests['difference'] = sign_flip_test(shares['pedestrian'] - shares['other'],
                                                    num_permutations, seed)
    else:
        result.gains['difference'] = None
        result.tests['difference'] = PermutationTestResult(None, num_permutations, None, seed,
                                                           note='a subgroup is empty')
    return result


def compare_segment_lengths(models: Mapping[str, DrivingModel], clips: Sequence[VideoClip],
                            lengths: Sequence[float] = (2, 10, 20, 30)) -> pd.DataFrame:
    """One row per (model, segment length) with the evaluation metrics."""
    rows = []
    for name, model in models.items():
        for seconds in lengths:
            report = evaluate(model, clips, seconds, name=name)
            rows.append({'model': name, 'segment_seconds': float(seconds), 'mae': report.mae,
                         'rmse': report.rmse, 'corr': report.corr, 'frames': len(report.records)})
    return pd.DataFrame(rows)


@torch.no_grad()
def clip_attention_maps(backbone, attention, config: ModelConfig, clips: Sequence[VideoClip],
                        segment_seconds: float = 30.0) -> List[Tuple[VideoClip, int, torch.Tensor]]:
    """(clip, segment start, (T, 9, 16) maps) for every segment, state reset per segment."""
    out = []
    for segment in tqdm(segment_clips(clips, segment_seconds), desc='attention maps', leave=False):
        clip = clips[segment.clip_index]
        frames = segment_item(clip, segment.start, segment.stop)['frames']
        x = preprocess_peripheral(frames, config.preproc, torch.float64)
        out.append((clip, segment.start, attention(backbone(x)).exp()))
    return out


def fovea_diagnostics(backbone, attention, config: ModelConfig, clips: Sequence[VideoClip],
                      settings: Sequence[Tuple[str, float]] = DIAGNOSTIC_SETTINGS,
                      seed: int = 0, segment_seconds: float = 30.0,
                      placements_log: Optional[List[Dict]] = None) -> pd.DataFrame:
    """Mean likelihood and adjacent-frame overlap of each placement policy on predicted maps."""
    maps = clip_attention_maps(backbone, attention, config, clips, segment_seconds)
    rows = []
    for policy, temperature in settings:
        fovea = FoveaSelectionConfig(policy, config.fovea.num_foveae, temperature, config.fovea.patch_size, seed)
        likelihoods, overlaps = [], []
        for clip, start, q in maps:
            generator = fovea_generator(seed, clip.clip_id, start, policy, temperature)
            previous = None
            for t in range(q.shape[0]):
                cells = select_fovea_cells(q[t], fovea, config.frame_size, config.grid, generator)
                placement = place_foveae(cells, config.frame_size, fovea.patch_size, config.grid)
                likelihoods.append(fovea_likelihood(q[t], cells))
                if previous is not None:
                    overlaps.append(fovea_overlap(previous.rects, placement.rects))
                previous = placement
                if placements_log is not None:
                    placements_log.append({'policy': policy, 'temperature': temperature,
                                           'clip_id': clip.clip_id, 'frame': start + t,
                                           'likelihood': likelihoods[-1], **placement.to_record()})
        rows.append({'policy': policy, 'temperature': temperature,
                     'likelihood': float(np.mean(likelihoods)), 'overlap': float(np.mean(overlaps)),
                     'frames': len(likelihoods)})
    return pd.DataFrame(rows)
