import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from tqdm import tqdm

from data.common import segment_clips, segment_item
from data.world import VideoClip
from models.driving import DrivingModel
from preprocessor.fovea import fovea_generator, fovea_likelihood, fovea_overlap

# km/h (10 m/s); faster frames are left out of the subgroup analysis
SUBGROUP_SPEED_LIMIT = 36.0


def calculate_metrics(pred: np.ndarray, target: np.ndarray) -> Dict[str, Any]:
    """MAE, RMSE and Pearson correlation in km/h; negative predictions count as 0."""
    pred = np.clip(np.asarray(pred, dtype=np.float64), 0.0, None)
    target = np.asarray(target, dtype=np.float64)
    if pred.size == 0:
        raise ValueError('No frames with a prediction target')
    if pred.shape != target.shape:
        raise ValueError(f'Prediction shape {pred.shape} does not match target shape {target.shape}')
    error = pred - target
    degenerate = bool(pred.std() == 0 or target.std() == 0)
    corr = 0.0 if degenerate else float(np.corrcoef(pred, target)[0, 1])
    return {
        'mae': float(np.abs(error).mean()),
        'rmse': float(np.sqrt((error ** 2).mean())),
        'corr': corr,
        'corr_degenerate': degenerate,
    }


def aggregate_metrics(outputs: Sequence[Tuple[np.ndarray, np.ndarray]]) -> Dict[str, Any]:
    """Metrics over the concatenation of per-segment (prediction, target) pairs."""
    pred = np.concatenate([p for p, _ in outputs])
    target = np.concatenate([t for _, t in outputs])
    return calculate_metrics(pred, target)


@dataclass
class FrameRecord:
    clip_id: str
    frame: int
    pred: float
    target: float
    pedestrian: bool


@dataclass
class EvalReport:
    name: str
    segment_seconds: float
    mae: float
    rmse: float
    corr: float
    corr_degenerate: bool
    flops: Optional[int] = None
    records: List[FrameRecord] = field(default_factory=list)
    per_video: Dict[str, Dict[str, float]] = field(default_factory=dict)
    subgroups: Dict[str, Dict[str, float]] = field(default_factory=dict)
    fovea: Dict[str, Optional[float]] = field(default_factory=dict)

    def errors(self) -> np.ndarray:
        return np.array([max(r.pred, 0.0) - r.target for r in self.records])

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'EvalReport':
        values = json.loads(Path(path).read_text())
        values['records'] = [FrameRecord(**r) for r in values['records']]
        return cls(**values)


def subgroup_errors(records: Sequence[FrameRecord], speed_limit: float = SUBGROUP_SPEED_LIMIT
                    ) -> Dict[str, List[FrameRecord]]:
    kept = [r for r in records if r.target <= speed_limit]
    return {'pedestrian': [r for r in kept if r.pedestrian],
            'other': [r for r in kept if not r.pedestrian]}


def _summaries(records: Sequence[FrameRecord]) -> Tuple[Dict, Dict]:
    per_video: Dict[str, List[FrameRecord]] = {}
    for r in records:
        per_video.setdefault(r.clip_id, []).append(r)
    videos = {k: {'mae': float(np.mean([abs(max(r.pred, 0.0) - r.target) for r in v])), 'frames': len(v)}
              for k, v in per_video.items()}
    groups = {}
    for name, group in subgroup_errors(records).items():
        groups[name] = {'frames': len(group),
                        'mae': float(np.mean([abs(max(r.pred, 0.0) - r.target) for r in group]))
                        if group else None}
    return videos, groups


@torch.no_grad()
def evaluate(model: DrivingModel,
             clips: Sequence[VideoClip],
             segment_seconds: float = 30.0,
             name: str = 'model',
             placements_log: Optional[List[Dict]] = None,
             flops: Optional[int] = None) -> EvalReport:
    """Runs the model segment by segment and scores every frame that has a target."""
    model.eval()
    h = model.config.horizon
    records: List[FrameRecord] = []
    likelihoods, overlaps = [], []
    for segment in tqdm(segment_clips(clips, segment_seconds), desc=f'evaluating {name}', leave=False):
        if segment.length <= h:
            continue
        clip = clips[segment.clip_index]
        item = segment_item(clip, segment.start, segment.stop)
        generator = fovea_generator(model.config.fovea.seed, clip.clip_id, segment.start, 'eval')
        out = model.forward_clip(item['frames'], clip.clip_id, generator)
        pred = out.predictions.cpu().numpy()
        speed = item['speed'].numpy()
        pedestrian = item['pedestrian'].numpy()
        for t in range(segment.length - h):
            records.append(FrameRecord(clip.clip_id, segment.start + t, float(pred[t]),
                                       float(speed[t + h]), bool(pedestrian[t + h])))
        if out.placements is not None:
            for t, placement in enumerate(out.placements):
                row = {'clip_id': clip.clip_id, 'frame': segment.start + t, **placement.to_record()}
                if out.attention is not None:
                    row['likelihood'] = fovea_likelihood(out.attention[t], placement.cells)
                    likelihoods.append(row['likelihood'])
                if t + 1 < len(out.placements):
                    overlaps.append(fovea_overlap(placement.rects, out.placements[t + 1].rects))
                if placements_log is not None:
                    placements_log.append(row)

    if not records:
        raise ValueError('No frames with a prediction target in the evaluation set')
    metrics = calculate_metrics([r.pred for r in records], [r.target for r in records])
    per_video, subgroups = _summaries(records)
    return EvalReport(name=name, segment_seconds=segment_seconds, flops=flops, records=records,
                      per_video=per_video, subgroups=subgroups,
                      fovea={'likelihood': float(np.mean(likelihoods)) if likelihoods else None,
                             'overlap': float(np.mean(overlaps)) if overlaps else None},
                      **metrics)
