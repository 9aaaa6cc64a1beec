from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

from preprocessor.fovea import FoveaSelectionConfig
from preprocessor.frames import IMAGENET_MEAN, PreprocConfig
from .layers import ShapeError

LAYER_KINDS = ('conv2d', 'fully-connected', 'batch-norm', 'dropout',
               'recurrent-conv-cell', 'upsample', 'downsample')
VARIANTS = ('combined', 'dual', 'periphery-only')

GRID = (9, 16)
FULL_FRAME = (720, 1280)
FULL_PERIPHERY = (72, 128)
FULL_PATCH = 240
FULL_PATCH_INPUT = 185


@dataclass
class LayerSpec:
    kind: str = 'conv2d'
    kernel: Tuple[int, int] = (1, 1)
    stride: Tuple[int, int] = (1, 1)
    in_channels: int = 1
    out_channels: int = 1
    dropout: float = 0.0
    trainable: bool = True

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f'Unknown layer kind: {self.kind}')
        self.kernel = tuple(int(k) for k in self.kernel)
        self.stride = tuple(int(s) for s in self.stride)
        if len(self.kernel) != 2 or min(self.kernel) < 1:
            raise ValueError(f'Kernel must be two positive ints, got {self.kernel}')
        if len(self.stride) != 2 or min(self.stride) < 1:
            raise ValueError(f'Stride must be two positive ints, got {self.stride}')
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError(f'Dropout rate must lie in [0, 1], got {self.dropout}')

    def output_size(self, size: Sequence[int]) -> Tuple[int, int]:
        """Valid (no-padding) convolution arithmetic."""
        return tuple((s - k) // st + 1 for s, k, st in zip(size, self.kernel, self.stride))


def conv(in_channels, out_channels, kernel, stride=1, trainable=True) -> LayerSpec:
    kernel = (kernel, kernel) if isinstance(kernel, int) else kernel
    stride = (stride, stride) if isinstance(stride, int) else stride
    return LayerSpec('conv2d', kernel, stride, in_channels, out_channels, trainable=trainable)


def trace_chain(specs: Sequence[LayerSpec], channels: int, size: Sequence[int]) -> List[Tuple[int, int, int]]:
    """Returns the (C, H, W) shape after every layer, starting with the input.

    Raises ShapeError with the trace so far when a layer does not fit.
    """
    trace = [(channels, *size)]
    for i, spec in enumerate(specs):
        c, h, w = trace[-1]
        if c != spec.in_channels or h < spec.kernel[0] or w < spec.kernel[1]:
            raise ShapeError(
                f'layer {i} ({spec.kind} k={spec.kernel} s={spec.stride} '
                f'{spec.in_channels}->{spec.out_channels}) cannot take input {trace[-1]}; '
                f'trace: {format_trace(trace)}')
        trace.append((spec.out_channels, *spec.output_size((h, w))))
    return trace


def format_trace(trace) -> str:
    return ' -> '.join('x'.join(str(v) for v in shape) for shape in trace)


def _layer_presets(scale: int, channels: int) -> Dict[str, List[LayerSpec]]:
    if scale == 1:
        # AlexNet-like stand-in: 72x128 -> 16x30 -> 14x28, 185x185 -> 44 -> 42
        backbone = [conv(3, 64, 11, 4, trainable=False), conv(64, 128, 3, trainable=False)]
    elif scale == 4:
        # 18x32 -> 16x30 -> 14x28, 46x46 -> 44 -> 42
        backbone = [conv(3, 8, 3, trainable=False), conv(8, 16, 3, trainable=False)]
    else:
        raise ValueError(f'No layer preset for scale {scale}; use 1 or 4 or pass explicit layers')
    c = backbone[-1].out_channels
    return {
        'backbone': backbone,
        'peripheral_head': [conv(c, 16, 3, 2), conv(16, 16, 3), conv(16, channels, (2, 5))],
        'foveal_head': [conv(c, 16, 3, 3), conv(16, 16, 3, 2), conv(16, channels, 4)],
        'dual_foveal_head': [conv(c, 16, 3, 3), conv(16, 16, 1), conv(16, channels, 1)],
        'attention_head': [conv(c, 16, 3), conv(16, 16, 3), conv(16, 8, (2, 9))],
    }


@dataclass
class ModelConfig:
    variant: str = 'combined'
    scale: int = 4
    frame_size: Tuple[int, int] = (180, 320)
    grid: Tuple[int, int] = GRID
    peripheral_size: Tuple[int, int] = (18, 32)
    patch_input_size: int = 46
    mean: Tuple[float, float, float] = IMAGENET_MEAN
    feature_channels: int = 8
    backbone: List[LayerSpec] = field(default_factory=list)
    peripheral_head: List[LayerSpec] = field(default_factory=list)
    foveal_head: List[LayerSpec] = field(default_factory=list)
    attention_head: List[LayerSpec] = field(default_factory=list)
    peripheral_feature_size: Tuple[int, int] = (3, 7)
    dual_patch_size: int = 14
    hidden_channels: int = 8
    attention_hidden_channels: int = 8
    recurrent_kernel: int = 3
    fc_widths: Tuple[int, ...] = (64, 32, 16, 1)
    horizon: int = 10
    dropout: float = 0.2
    fovea: FoveaSelectionConfig = field(default_factory=FoveaSelectionConfig)
    seed: int = 0
    backbone_seed: int = 1234

    @classmethod
    def build(cls,
              variant: str = 'combined',
              policy: str = 'top-k',
              scale: int = 4,
              num_foveae: int = 2,
              temperature: float = 1.0,
              peripheral_size: Optional[Sequence[int]] = None,
              hidden_channels: int = 8,
              attention_hidden_channels: int = 8,
              fc_widths: Sequence[int] = (64, 32, 16, 1),
              horizon: int = 10,
              dropout: float = 0.2,
              seed: int = 0,
              backbone_seed: int = 1234,
              feature_channels: int = 8) -> 'ModelConfig':
        """Builds the documented shape set at full scale (1) or toy scale (4)."""
        layers = _layer_presets(scale, feature_channels)
        frame_size = (FULL_FRAME[0] // scale, FULL_FRAME[1] // scale)
        default_periphery = (FULL_PERIPHERY[0] // scale, FULL_PERIPHERY[1] // scale)
        fovea = FoveaSelectionConfig(policy=policy, num_foveae=num_foveae, temperature=temperature,
                                     patch_size=FULL_PATCH // scale, seed=seed)
        config = cls(
            variant=variant,
            scale=scale,
            frame_size=frame_size,
            peripheral_size=tuple(peripheral_size) if peripheral_size is not None else default_periphery,
            patch_input_size=FULL_PATCH_INPUT // scale,
            feature_channels=feature_channels,
            backbone=layers['backbone'],
            peripheral_head=layers['peripheral_head'],
            foveal_head=layers['dual_foveal_head' if variant == 'dual' else 'foveal_head'],
            attention_head=layers['attention_head'],
            hidden_channels=hidden_channels,
            attention_hidden_channels=attention_hidden_channels,
            fc_widths=tuple(fc_widths),
            horizon=horizon,
            dropout=dropout,
            fovea=fovea,
            seed=seed,
            backbone_seed=backbone_seed,
        )
        if peripheral_size is not None:
            config.peripheral_feature_size = config.trace('peripheral')[-1][1:]
        config.validate()
        return config

    @property
    def has_fovea(self) -> bool:
        return self.variant != 'periphery-only'

    @property
    def preproc(self) -> PreprocConfig:
        return PreprocConfig(peripheral_size=tuple(self.peripheral_size),
                             patch_size=self.fovea.patch_size,
                             patch_input_size=self.patch_input_size,
                             mean=tuple(self.mean))

    @property
    def fovea_feature_size(self) -> int:
        if self.variant == 'dual':
            return self.dual_patch_size
        return self.patch_span

    @property
    def patch_span(self) -> int:
        """Number of grid cells covered by one fovea patch along each axis."""
        return round(self.fovea.patch_size * self.grid[0] / self.frame_size[0])

    def trace(self, path: str) -> List[Tuple[int, int, int]]:
        """Layer-by-layer (C, H, W) shapes of the 'peripheral', 'foveal' or 'attention' path."""
        if path == 'foveal':
            size = (self.patch_input_size, self.patch_input_size)
        else:
            size = tuple(self.peripheral_size)
        backbone = trace_chain(self.backbone, 3, size)
        head = {'peripheral': self.peripheral_head,
                'foveal': self.foveal_head,
                'attention': self.attention_head}[path]
        c, h, w = backbone[-1]
        return backbone + trace_chain(head, c, (h, w))[1:]

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f'Unknown planner variant: {self.variant}')
        if (self.variant == 'periphery-only') != (self.fovea.policy == 'none'):
            raise ValueError(
                f'Planner variant {self.variant!r} does not accept fovea policy {self.fovea.policy!r}; '
                'the periphery-only variant is exactly the one without foveae')
        if self.horizon < 1:
            raise ValueError(f'Prediction horizon must be >= 1, got {self.horizon}')
        if not self.fc_widths or self.fc_widths[-1] != 1:
            raise ValueError(f'FC widths must end in a single output, got {self.fc_widths}')
        gh, gw = self.grid
        if self.frame_size[0] % gh or self.frame_size[1] % gw or \
                self.frame_size[0] // gh != self.frame_size[1] // gw:
            raise ValueError(f'Frame {self.frame_size} does not split into square {gh}x{gw} cells')
        if self.fovea.patch_size > min(self.frame_size):
            raise ValueError('Fovea patch is larger than the frame')
        self.audit()

    def audit(self) -> Dict[str, List[Tuple[int, int, int]]]:
        """Checks every stated shape of the pipeline and returns the traces."""
        traces = {'peripheral': self.trace('peripheral')}
        c, h, w = traces['peripheral'][-1]
        if c != self.feature_channels or (h, w) != tuple(self.peripheral_feature_size):
            raise ShapeError(f'peripheral encoder yields {(c, h, w)}, expected '
                             f'{(self.feature_channels, *self.peripheral_feature_size)}; '
                             f'trace: {format_trace(traces["peripheral"])}')
        if self.has_fovea:
            traces['foveal'] = self.trace('foveal')
            c, h, w = traces['foveal'][-1]
            s = self.fovea_feature_size
            if (c, h, w) != (self.feature_channels, s, s):
                raise ShapeError(f'foveal encoder yields {(c, h, w)}, expected '
                                 f'{(self.feature_channels, s, s)}; '
                                 f'trace: {format_trace(traces["foveal"])}')
        if self.fovea.uses_attention:
            traces['attention'] = self.trace('attention')
            if traces['attention'][-1][1:] != tuple(self.grid):
                raise ShapeError(f'attention head yields {traces["attention"][-1]}, expected grid '
                                 f'{self.grid}; trace: {format_trace(traces["attention"])}')
        return traces

    def planner_input_channels(self) -> int:
        return 2 * self.feature_channels if self.variant == 'combined' else self.feature_channels

    def uniresolution(self, peripheral_size: Sequence[int]) -> 'ModelConfig':
        """Periphery-only copy of this config at another input resolution."""
        config = replace(self,
                         variant='periphery-only',
                         peripheral_size=tuple(peripheral_size),
                         fovea=replace(self.fovea, policy='none'))
        config.peripheral_feature_size = config.trace('peripheral')[-1][1:]
        config.validate()
        return config

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> 'ModelConfig':
        values = dict(values)
        for key in ('backbone', 'peripheral_head', 'foveal_head', 'attention_head'):
            values[key] = [LayerSpec(**spec) for spec in values[key]]
        values['fovea'] = FoveaSelectionConfig(**values['fovea'])
        for key in ('frame_size', 'grid', 'peripheral_size', 'mean', 'peripheral_feature_size', 'fc_widths'):
            values[key] = tuple(values[key])
        config = cls(**values)
        config.validate()
        return config
