"""Dataset directory layout::

    manifest.json          format version, frame rate, frame size, grid, clip list
    <clip>.frames.npy      (T, H, W, 3) uint8
    <clip>.jsonl           one row per frame: frame, speed (km/h), gaze (144 floats), tags, agents
"""
import hashlib
import json
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from .world import GRID, AgentState, VideoClip, WorldConfig

FORMAT_VERSION = 1
MANIFEST = 'manifest.json'


class DatasetError(Exception):
    pass


class MissingManifestError(DatasetError):
    pass


class VersionMismatchError(DatasetError):
    pass


class CorruptIndexError(DatasetError):
    pass


class MissingClipFileError(DatasetError):
    pass


class CorruptFrameError(DatasetError):
    def __init__(self, clip_id: str, frame_index: int, detail: str = ''):
        self.clip_id = clip_id
        self.frame_index = frame_index
        super().__init__(f'clip {clip_id!r}: frame {frame_index} is corrupt' + (f' ({detail})' if detail else ''))


def write_dataset(clips: Iterable[VideoClip], directory: Union[str, Path],
                  world: Optional[WorldConfig] = None) -> Path:
    """Writes clips one at a time, so a generator never holds more than one clip in memory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    frame_size = frame_rate = None
    has_gaze = True
    entries = []
    for clip in tqdm(clips, desc='writing clips'):
        if frame_size is None:
            frame_size, frame_rate = list(clip.frames.shape[1:3]), clip.frame_rate
        elif list(clip.frames.shape[1:3]) != frame_size or clip.frame_rate != frame_rate:
            raise ValueError(f'Clip {clip.clip_id} differs in frame size or frame rate')
        has_gaze = has_gaze and clip.gaze is not None
        frames_name, rows_name = f'{clip.clip_id}.frames.npy', f'{clip.clip_id}.jsonl'
        np.save(directory / frames_name, np.ascontiguousarray(clip.frames, dtype=np.uint8))
        with open(directory / rows_name, 'w') as f:
            for t in range(clip.num_frames):
                row = {'frame': t,
                       'speed': float(clip.speed[t]),
                       'gaze': clip.gaze[t].reshape(-1).tolist() if clip.gaze is not None else None,
                       'tags': list(clip.tags[t]),
                       'agents': [a.to_dict() for a in clip.agents[t]] if clip.agents else []}
                f.write(json.dumps(row, sort_keys=True) + '\n')
        entries.append({'clip_id': clip.clip_id, 'num_frames': clip.num_frames,
                        'frames': frames_name, 'rows': rows_name})
    if not entries:
        raise ValueError('Refusing to write an empty dataset')
    manifest = {'format_version': FORMAT_VERSION,
                'frame_rate': frame_rate,
                'frame_size': frame_size,
                'grid': list(GRID),
                'has_gaze': has_gaze,
                'world': world.to_dict() if world is not None else None,
                'clips': entries}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def read_manifest(directory: Union[str, Path]) -> Dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise MissingManifestError(f'No {MANIFEST} in {directory}')
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise CorruptIndexError(f'{path}: {e}') from None
    if not isinstance(manifest, dict):
        raise CorruptIndexError(f'{path}: expected a JSON object')
    if manifest.get('format_version') != FORMAT_VERSION:
        raise VersionMismatchError(f'{path}: format version {manifest.get("format_version")}, '
                                   f'this reader understands {FORMAT_VERSION}')
    for key in ('frame_rate', 'frame_size', 'has_gaze', 'clips'):
        if key not in manifest:
            raise CorruptIndexError(f'{path}: missing key {key!r}')
    return manifest


def dataset_hash(directory: Union[str, Path]) -> str:
    return hashlib.sha256((Path(directory) / MANIFEST).read_bytes()).hexdigest()


def _open_frames(path: Path, clip_id: str, num_frames: int, frame_size: Sequence[int]) -> np.ndarray:
    with open(path, 'rb') as f:
        try:
            version = np.lib.format.read_magic(f)
            if version == (1, 0):
                shape, fortran, dtype = np.lib.format.read_array_header_1_0(f)
            else:
                shape, fortran, dtype = np.lib.format.read_array_header_2_0(f)
        except ValueError as e:
            raise CorruptFrameError(clip_id, 0, f'unreadable header: {e}') from None
        offset = f.tell()
    expected = (num_frames, *frame_size, 3)
    if tuple(shape) != expected or dtype != np.uint8 or fortran:
        raise CorruptFrameError(clip_id, 0, f'header says {shape} {dtype}, manifest says {expected} uint8')
    frame_bytes = int(np.prod(expected[1:]))
    available = path.stat().st_size - offset
    if available < num_frames * frame_bytes:
        raise CorruptFrameError(clip_id, available // frame_bytes, 'file is truncated')
    return np.load(path, mmap_mode='r')


def _read_rows(path: Path, clip_id: str, num_frames: int, has_gaze: bool):
    speed, gaze, tags, agents = [], [], [], []
    with open(path) as f:
        for line_no, line in enumerate(f):
            try:
                row = json.loads(line)
                if row['frame'] != line_no:
                    raise ValueError(f'row {line_no} is labelled frame {row["frame"]}')
                speed.append(float(row['speed']))
                if has_gaze:
                    gaze.append(np.asarray(row['gaze'], dtype=np.float64).reshape(GRID))
                tags.append(list(row['tags']))
                agents.append([AgentState.from_dict(a) for a in row['agents']])
            except (ValueError, KeyError, TypeError) as e:
                raise CorruptIndexError(f'clip {clip_id!r}: bad row {line_no} ({e})') from None
    if len(speed) != num_frames:
        raise CorruptIndexError(f'clip {clip_id!r}: {len(speed)} rows for {num_frames} frames')
    return np.asarray(speed), (np.stack(gaze) if has_gaze else None), tags, agents


def read_dataset(directory: Union[str, Path], require_gaze: bool = False) -> List[VideoClip]:
    """Reads every clip; frames are memory-mapped, not loaded."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    has_gaze = bool(manifest['has_gaze'])
    if require_gaze and not has_gaze:
        raise DatasetError(f'{directory} carries no gaze maps')
    clips = []
    for entry in manifest['clips']:
        try:
            clip_id, num_frames = entry['clip_id'], int(entry['num_frames'])
            frames_path, rows_path = directory / entry['frames'], directory / entry['rows']
        except (KeyError, TypeError, ValueError) as e:
            raise CorruptIndexError(f'bad clip entry {entry!r} ({e})') from None
        for path in (frames_path, rows_path):
            if not path.exists():
                raise MissingClipFileError(f'clip {clip_id!r}: {path.name} is missing')
        frames = _open_frames(frames_path, clip_id, num_frames, manifest['frame_size'])
        speed, gaze, tags, agents = _read_rows(rows_path, clip_id, num_frames, has_gaze)
        clips.append(VideoClip(clip_id=clip_id, frames=frames, speed=speed, gaze=gaze, tags=tags,
                               agents=agents, frame_rate=int(manifest['frame_rate'])))
    return clips
