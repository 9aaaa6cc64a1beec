import torch
from torch.utils.data import Dataset
import numpy as np
from typing import Any, Dict, List, NamedTuple, Sequence, Tuple

from .world import VideoClip


class Segment(NamedTuple):
    clip_index: int
    clip_id: str
    start: int
    stop: int

    @property
    def length(self) -> int:
        return self.stop - self.start


def segment_clips(clips: Sequence[VideoClip], max_seconds: float) -> List[Segment]:
    """Greedy split of every clip into `max_seconds` pieces plus the remainder."""
    segments = []
    for k, clip in enumerate(clips):
        max_frames = int(round(max_seconds * clip.frame_rate))
        if max_frames < 1:
            raise ValueError(f'Segment length {max_seconds} s holds no frame at {clip.frame_rate} Hz')
        for start in range(0, clip.num_frames, max_frames):
            segments.append(Segment(k, clip.clip_id, start, min(start + max_frames, clip.num_frames)))
    return segments


def segment_item(clip: VideoClip, start: int, stop: int) -> Dict[str, Any]:
    frames = np.ascontiguousarray(clip.frames[start:stop])
    item = {
        'frames': torch.from_numpy(frames).permute(0, 3, 1, 2),
        'speed': torch.from_numpy(np.asarray(clip.speed[start:stop], dtype=np.float64)),
        'pedestrian': torch.from_numpy(clip.pedestrian_mask()[start:stop]),
        'clip_id': clip.clip_id,
        'start': start,
    }
    if clip.gaze is not None:
        item['gaze'] = torch.from_numpy(np.asarray(clip.gaze[start:stop], dtype=np.float64))
    return item


class SegmentDataset(Dataset):
    """One item per segment: frames (T, 3, H, W) uint8, speed, gaze, pedestrian mask, ids.

    Segments too short to hold a single prediction target are dropped.
    """

    def __init__(self,
                 clips: List[VideoClip],
                 segment_seconds: float = 30.0,
                 horizon: int = 10):
        super().__init__()
        self.clips = clips
        self.horizon = horizon

        boundaries = [0]
        self.segments: List[List[Segment]] = []
        dropped = 0
        for k, clip in enumerate(clips):
            segments = [s._replace(clip_index=k) for s in segment_clips([clip], segment_seconds)]
            kept = [s for s in segments if s.length > horizon]
            dropped += len(segments) - len(kept)
            self.segments.append(kept)
            boundaries.append(boundaries[-1] + len(kept))
        self.boundaries = np.array(boundaries)
        self.dropped = dropped

    def __len__(self) -> int:
        return int(self.boundaries[-1])

    def _get_clip_idx_and_segment_idx(self, index: int) -> Tuple[int, int]:
        bin_pos = np.digitize(index, self.boundaries[1:], right=False)
        segment_index = index - self.boundaries[bin_pos]
        return int(bin_pos), int(segment_index)

    def __getitem__(self, index: int) -> Dict[str, Any]:
        clip_idx, segment_idx = self._get_clip_idx_and_segment_idx(index)
        segment = self.segments[clip_idx][segment_idx]
        return segment_item(self.clips[clip_idx], segment.start, segment.stop)
