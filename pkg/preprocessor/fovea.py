"""Fovea placement on the 9x16 attention grid.

Cells are (row, col) pairs, rectangles are (top, left, bottom, right) in frame pixels
with exclusive bottom/right, corners are the (row, col) where a fovea's feature patch
is inserted into the grid.
"""
import hashlib
from dataclasses import dataclass
from itertools import product
from typing import Dict, List, Optional, Sequence, Tuple

import torch
from torch import Tensor

POLICIES = ('none', 'random', 'central', 'top-k', 'sampled')

Cell = Tuple[int, int]
Rect = Tuple[int, int, int, int]


@dataclass
class FoveaSelectionConfig:
    policy: str = 'top-k'
    num_foveae: int = 2
    temperature: float = 1.0
    patch_size: int = 240
    seed: int = 0

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f'Unknown fovea policy: {self.policy}')
        if self.num_foveae < 1:
            raise ValueError(f'Need at least one fovea, got {self.num_foveae}')
        if not self.temperature > 0:
            raise ValueError(f'Temperature must be positive, got {self.temperature}')
        if self.patch_size < 1:
            raise ValueError(f'Patch size must be positive, got {self.patch_size}')

    @property
    def uses_attention(self) -> bool:
        return self.policy in ('top-k', 'sampled')


@dataclass
class FoveaPlacement:
    cells: List[Cell]
    rects: List[Rect]
    corners: List[Cell]

    def distinct_cells(self) -> List[Cell]:
        return list(dict.fromkeys(self.cells))

    def to_record(self) -> Dict:
        return {'cells': [list(c) for c in self.cells],
                'rectangles': [list(r) for r in self.rects],
                'corners': [list(c) for c in self.corners]}


def fovea_generator(seed: int, *keys) -> torch.Generator:
    """Independent random stream per (seed, clip, segment, ...) key."""
    digest = hashlib.sha256(':'.join(str(k) for k in (seed, *keys)).encode()).digest()
    return torch.Generator().manual_seed(int.from_bytes(digest[:8], 'little') & (2 ** 63 - 1))


def _check_map(q: Tensor) -> Tensor:
    q = q.reshape(-1)
    if not torch.isfinite(q).all() or (q < 0).any():
        raise ValueError('Attention map must be finite and non-negative')
    if not (q > 0).any():
        raise ValueError('Attention map has no mass; not a distribution')
    return q


def sampling_distribution(q: Tensor, temperature: float) -> Tensor:
    """softmax(log q / T); cells with q = 0 keep probability 0."""
    if not temperature > 0:
        raise ValueError(f'Temperature must be positive, got {temperature}')
    q = _check_map(q)
    support = q > 0
    logits = torch.full_like(q, float('-inf'))
    logits[support] = torch.log(q[support]) / temperature
    return torch.softmax(logits, dim=0)


def _to_cell(index: int, grid: Sequence[int]) -> Cell:
    return divmod(int(index), grid[1])


def sample_fovea_cells(q: Tensor, num_foveae: int, temperature: float,
                       generator: Optional[torch.Generator] = None) -> List[Cell]:
    """Independent draws with replacement from the tempered map."""
    grid = q.shape[-2:]
    p = sampling_distribution(q, temperature)
    draws = torch.multinomial(p, num_foveae, replacement=True, generator=generator)
    return [_to_cell(k, grid) for k in draws.tolist()]


def topk_fovea_cells(q: Tensor, num_foveae: int) -> List[Cell]:
    """Highest cells first; ties go to the earlier cell in row-major order."""
    grid = q.shape[-2:]
    order = torch.sort(_check_map(q), descending=True, stable=True).indices
    return [_to_cell(k, grid) for k in order[:num_foveae].tolist()]


def random_fovea_cells(num_foveae: int, grid: Sequence[int] = (9, 16),
                       generator: Optional[torch.Generator] = None) -> List[Cell]:
    draws = torch.randint(grid[0] * grid[1], (num_foveae,), generator=generator)
    return [_to_cell(k, grid) for k in draws.tolist()]


def central_fovea_cells(num_foveae: int, patch_size: int, frame_size: Sequence[int],
                        grid: Sequence[int] = (9, 16)) -> List[Cell]:
    """Side-by-side patches tiling the central patch x (n * patch) region."""
    height, width = frame_size
    pitch_h, pitch_w = height / grid[0], width / grid[1]
    row = int((height / 2) // pitch_h)
    cols = [int((width / 2 + (k - (num_foveae - 1) / 2) * patch_size) // pitch_w)
            for k in range(num_foveae)]
    return [(row, min(max(col, 0), grid[1] - 1)) for col in cols]


def cell_to_geometry(cell: Cell, frame_size: Sequence[int], patch_size: int,
                     grid: Sequence[int] = (9, 16)) -> Tuple[Rect, Cell]:
    i, j = cell
    if not (0 <= i < grid[0] and 0 <= j < grid[1]):
        raise ValueError(f'Cell {cell} is outside the {grid[0]}x{grid[1]} grid')
    height, width = frame_size
    pitch_h, pitch_w = height / grid[0], width / grid[1]
    top = int(round((i + 0.5) * pitch_h - patch_size / 2))
    left = int(round((j + 0.5) * pitch_w - patch_size / 2))
    top = min(max(top, 0), height - patch_size)
    left = min(max(left, 0), width - patch_size)
    span = round(patch_size / pitch_h)
    corner = (min(max(i - span // 2, 0), grid[0] - span),
              min(max(j - span // 2, 0), grid[1] - span))
    return (top, left, top + patch_size, left + patch_size), corner


def place_foveae(cells: Sequence[Cell], frame_size: Sequence[int], patch_size: int,
                 grid: Sequence[int] = (9, 16)) -> FoveaPlacement:
    geometry = [cell_to_geometry(c, frame_size, patch_size, grid) for c in cells]
    return FoveaPlacement(cells=[tuple(c) for c in cells],
                          rects=[g[0] for g in geometry],
                          corners=[g[1] for g in geometry])


def select_fovea_cells(q: Optional[Tensor], config, frame_size: Sequence[int],
                       grid: Sequence[int] = (9, 16),
                       generator: Optional[torch.Generator] = None) -> List[Cell]:
    """Dispatches on config.policy; `q` is only read by the attention-guided policies."""
    if config.policy == 'none':
        return []
    if config.policy == 'random':
        return random_fovea_cells(config.num_foveae, grid, generator)
    if config.policy == 'central':
        return central_fovea_cells(config.num_foveae, config.patch_size, frame_size, grid)
    if q is None:
        raise ValueError(f'Fovea policy {config.policy!r} needs an attention map')
    if config.policy == 'top-k':
        return topk_fovea_cells(q, config.num_foveae)
    return sample_fovea_cells(q, config.num_foveae, config.temperature, generator)


def fovea_likelihood(q: Tensor, cells: Sequence[Cell]) -> float:
    """Attention mass of the distinct selected cells."""
    return float(sum(q[i, j] for i, j in dict.fromkeys(tuple(c) for c in cells)))


def union_area(rects: Sequence[Rect]) -> int:
    """Exact pixel area of a union of rectangles, via coordinate compression."""
    rects = [r for r in rects if r[2] > r[0] and r[3] > r[1]]
    if not rects:
        return 0
    ys = sorted({r[0] for r in rects} | {r[2] for r in rects})
    xs = sorted({r[1] for r in rects} | {r[3] for r in rects})
    area = 0
    for (y0, y1), (x0, x1) in product(zip(ys, ys[1:]), zip(xs, xs[1:])):
        if any(r[0] <= y0 and y1 <= r[2] and r[1] <= x0 and x1 <= r[3] for r in rects):
            area += (y1 - y0) * (x1 - x0)
    return area


def fovea_overlap(rects_t: Sequence[Rect], rects_next: Sequence[Rect]) -> float:
    """|U_t ∩ U_t+1| / |U_t| for the patch unions of adjacent frames."""
    base = union_area(rects_t)
    if base == 0:
        return 0.0
    pieces = [(max(a[0], b[0]), max(a[1], b[1]), min(a[2], b[2]), min(a[3], b[3]))
              for a in rects_t for b in rects_next]
    return union_area(pieces) / base
