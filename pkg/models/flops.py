"""Per-frame operation counts.

One multiply-accumulate counts as 2 FLOPs. Batch norm, ReLU and softmax are
not counted. Bilinear upsampling costs 8 FLOPs per output value; shrinking
is antialiased and counted per filter tap.
"""
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

from .config import ModelConfig
from .layers import ShapeError

RESAMPLE_OPS = 8
# sigmoid x3 + tanh x2 + 2 products + 1 sum + 1 product for the cell update
GATE_OPS = 9

# published figures for the full-scale two-fovea model and its matched periphery
REPORTED_COMBINED_FLOPS = 3.4e9
REPORTED_UNIRESOLUTION_SIZE = (209, 371)


@dataclass
class LayerFlops:
    name: str
    kind: str
    flops: int
    output_shape: Tuple[int, ...]


def conv_flops(spec, output_size: Sequence[int]) -> int:
    if spec.in_channels is None or spec.out_channels is None:
        raise ValueError('conv layer has unspecified channels')
    kh, kw = spec.kernel
    return 2 * kh * kw * spec.in_channels * spec.out_channels * output_size[0] * output_size[1]


def fc_flops(in_features: int, out_features: int) -> int:
    return 2 * in_features * out_features


def convlstm_flops(in_channels: int, hidden_channels: int, kernel: int, size: Sequence[int]) -> int:
    cells = size[0] * size[1]
    gates = 2 * kernel * kernel * (in_channels + hidden_channels) * 4 * hidden_channels * cells
    return gates + GATE_OPS * hidden_channels * cells


def resample_taps(in_size: int, out_size: int) -> int:
    """Window length of the antialiased bilinear filter along one axis."""
    return 2 * math.ceil(max(in_size / out_size, 1.0)) + 1


def resample_flops(channels: int, in_size: Sequence[int], out_size: Sequence[int]) -> int:
    """Plain bilinear when both axes grow; when either shrinks, a separable
    antialiased filter: a row pass over every input row, then a column pass.
    """
    (hi, wi), (ho, wo) = in_size, out_size
    if ho >= hi and wo >= wi:
        return RESAMPLE_OPS * channels * ho * wo
    rows = 2 * resample_taps(wi, wo) * hi * wo
    cols = 2 * resample_taps(hi, ho) * ho * wo
    return channels * (rows + cols)


def _chain(records: List[LayerFlops], prefix: str, specs, trace):
    for k, spec in enumerate(specs):
        out = trace[k + 1]
        records.append(LayerFlops(f'{prefix}.{k}', spec.kind, conv_flops(spec, out[1:]), out))


def layer_flops(config: ModelConfig) -> List[LayerFlops]:
    """Per-layer records for one frame, both foveae included."""
    traces = config.audit()
    nb = len(config.backbone)
    records: List[LayerFlops] = []

    periphery = tuple(config.peripheral_size)
    if periphery != tuple(config.frame_size):
        records.append(LayerFlops('preprocess.peripheral', 'downsample',
                                  resample_flops(3, config.frame_size, periphery), (3, *periphery)))
    trace = traces['peripheral']
    _chain(records, 'backbone.peripheral', config.backbone, trace[:nb + 1])
    _chain(records, 'peripheral_head', config.peripheral_head, trace[nb:])
    c, h, w = trace[-1]
    if (h, w) != tuple(config.grid):
        kind = 'upsample' if h * w < config.grid[0] * config.grid[1] else 'downsample'
        records.append(LayerFlops('peripheral.resample', kind,
                                  resample_flops(c, (h, w), config.grid), (c, *config.grid)))

    if config.fovea.uses_attention:
        trace = traces['attention']
        _chain(records, 'attention_head', config.attention_head, trace[nb:])
        hid = config.attention_hidden_channels
        records.append(LayerFlops('attention.recurrent', 'recurrent-conv-cell',
                                  convlstm_flops(trace[-1][0], hid, config.recurrent_kernel, config.grid),
                                  (hid, *config.grid)))
        records.append(LayerFlops('attention.readout', 'conv2d',
                                  2 * hid * config.grid[0] * config.grid[1], (1, *config.grid)))

    if config.has_fovea:
        s = config.patch_input_size
        p = config.fovea.patch_size
        trace = traces['foveal']
        for f in range(config.fovea.num_foveae):
            records.append(LayerFlops(f'fovea{f}.resize', 'downsample',
                                      resample_flops(3, (p, p), (s, s)), (3, s, s)))
            _chain(records, f'fovea{f}.backbone', config.backbone, trace[:nb + 1])
            _chain(records, f'fovea{f}.head', config.foveal_head, trace[nb:])

    hid = config.hidden_channels
    cells = config.grid[0] * config.grid[1]
    if config.variant == 'dual':
        p = config.dual_patch_size
        records.append(LayerFlops('planner.peripheral', 'recurrent-conv-cell',
                                  convlstm_flops(config.feature_channels, hid, config.recurrent_kernel,
                                                 config.grid), (hid, *config.grid)))
        records.append(LayerFlops('planner.foveal', 'recurrent-conv-cell',
                                  convlstm_flops(config.feature_channels * config.fovea.num_foveae, hid,
                                                 config.recurrent_kernel, (p, p)), (hid, p, p)))
        flat = hid * (cells + p * p)
    else:
        records.append(LayerFlops('planner.recurrent', 'recurrent-conv-cell',
                                  convlstm_flops(config.planner_input_channels(), hid,
                                                 config.recurrent_kernel, config.grid),
                                  (hid, *config.grid)))
        flat = hid * cells
    for k, width in enumerate(config.fc_widths):
        records.append(LayerFlops(f'planner.fc.{k}', 'fully-connected', fc_flops(flat, width), (width,)))
        flat = width
    return records


def compute_flops(config: ModelConfig) -> int:
    return sum(r.flops for r in layer_flops(config))


def build_uniresolution_baseline(reference: ModelConfig,
                                 target: Optional[int] = None,
                                 tolerance: float = 0.02,
                                 aspect_tolerance: float = 0.03) -> ModelConfig:
    """Periphery-only config whose FLOPs land in [(1 - tolerance) * target, target],
    `target` defaulting to the reference's own FLOPs.

    Among the sizes in that band the one closest to the grid's aspect ratio wins,
    ties going to the larger FLOPs; `aspect_tolerance` only bounds the search.
    """
    target = compute_flops(reference) if target is None else int(target)
    aspect = reference.grid[1] / reference.grid[0]
    floor = (1 - tolerance) * target
    best, best_key, largest = None, None, None
    for h in range(1, reference.frame_size[0] + 1):
        lo = max(1, math.ceil(h * aspect * (1 - aspect_tolerance)))
        hi = min(reference.frame_size[1], math.floor(h * aspect * (1 + aspect_tolerance)))
        smallest = None
        for w in range(lo, hi + 1):
            try:
                config = reference.uniresolution((h, w))
            except ShapeError:
                continue
            flops = compute_flops(config)
            smallest = flops if smallest is None else min(smallest, flops)
            if flops <= target:
                largest = flops if largest is None else max(largest, flops)
            if floor <= flops <= target:
                key = (abs(w / h - aspect), -flops)
                if best_key is None or key < best_key:
                    best, best_key = config, key
        # filter taps make the cost slightly non-monotone in h
        if smallest is not None and smallest > 1.5 * target:
            break
    if best is None:
        raise ValueError(f'No periphery-only resolution reaches {target} FLOPs within {tolerance:.0%} '
                         f'(largest below target: {largest})')
    return best
