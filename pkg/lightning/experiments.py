"""Policy comparison over several training seeds.

`run_experiment` renders (or reuses) a dataset, fits the gaze model once, fits
every driving model once per seed and writes the tables the comparisons are
read from::

    mae.csv        one row per (model, seed), test split
    fovea.csv      likelihood and overlap per placement setting, trained gaze model
    subgroup.csv   pedestrian gain of `gaze_model` over `baseline`, (seed, video) units
    segments.csv   MAE against segment length, matched periphery vs `matched_model`
"""
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import pandas as pd
import pytorch_lightning as pl
import yaml
from pytorch_lightning.callbacks import ModelCheckpoint
from pytorch_lightning.loggers import CSVLogger
from pytorch_lightning.utilities import rank_zero_info

from data.io import MANIFEST, read_dataset, write_dataset
from data.world import WorldConfig, iter_clips
from models.backbone import frozen_backbone
from models.driving import DrivingModel
from models.flops import build_uniresolution_baseline, compute_flops
from .analysis import compare_segment_lengths, fovea_diagnostics, subgroup_analysis
from .attention import AttentionLM
from .callbacks import WeightsExport
from .data import DrivingData, split_clips
from .driving import DrivingLM, driving_config, load_attention
from .eval_utils import EvalReport, calculate_metrics, evaluate

UNIRESOLUTION = 'uni-res'


@dataclass
class ExperimentConfig:
    world: Dict[str, Any] = field(default_factory=dict)
    seeds: Tuple[int, ...] = (0, 1, 2)
    split: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    attention: Dict[str, Any] = field(default_factory=dict)
    attention_epochs: int = 20
    driving: Dict[str, Any] = field(default_factory=dict)
    driving_epochs: int = 12
    segment_seconds: float = 30.0
    models: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    baseline: str = 'no-fovea'
    gaze_model: str = 'sampled'
    matched_model: Optional[str] = 'top-2'
    segment_lengths: Tuple[float, ...] = (2.0, 10.0, 20.0, 30.0)
    temperatures: Tuple[float, ...] = (0.5, 1.0, 2.0)
    permutations: int = 10000

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.split = tuple(float(r) for r in self.split)
        self.segment_lengths = tuple(float(s) for s in self.segment_lengths)
        self.temperatures = tuple(float(t) for t in self.temperatures)
        if not self.seeds:
            raise ValueError('At least one seed is needed')
        if UNIRESOLUTION in self.models:
            raise ValueError(f'{UNIRESOLUTION!r} is reserved for the FLOPs-matched baseline')
        for role in ('baseline', 'gaze_model', 'matched_model'):
            name = getattr(self, role)
            if name is not None and name not in self.models:
                raise ValueError(f'{role} {name!r} is not one of the models {sorted(self.models)}')

    @classmethod
    def from_yaml(cls, path: Union[str, Path]) -> 'ExperimentConfig':
        with open(path) as f:
            values = yaml.safe_load(f) or {}
        values = values.get('experiment', values)
        unknown = set(values) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f'Unknown experiment settings: {sorted(unknown)}')
        return cls(**values)

    def model_args(self) -> Dict[str, Dict[str, Any]]:
        """DrivingLM init args per model, the FLOPs-matched periphery included."""
        args = {name: {**self.driving, **overrides} for name, overrides in self.models.items()}
        if self.matched_model is not None:
            reference = driving_config(**args[self.matched_model])
            baseline = build_uniresolution_baseline(reference)
            args[UNIRESOLUTION] = {**self.driving, 'planner': 'periphery-only', 'policy': 'none',
                                   'peripheral_size': list(baseline.peripheral_size)}
        return args


@dataclass
class ExperimentResult:
    mae: pd.DataFrame
    fovea: pd.DataFrame
    subgroup: pd.DataFrame
    segments: pd.DataFrame

    def summary(self) -> pd.DataFrame:
        """Mean and across-seed standard deviation per model."""
        return self.mae.groupby('model', sort=False)[['mae', 'rmse', 'corr']].agg(['mean', 'std'])

    def save(self, out: Union[str, Path]) -> Path:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        for name in ('mae', 'fovea', 'subgroup', 'segments'):
            getattr(self, name).to_csv(out / f'{name}.csv', index=False)
        return out

    @classmethod
    def load(cls, out: Union[str, Path]) -> 'ExperimentResult':
        out = Path(out)
        return cls(*(pd.read_csv(out / f'{name}.csv') for name in ('mae', 'fovea', 'subgroup', 'segments')))


def make_trainer(root: Union[str, Path], epochs: int) -> pl.Trainer:
    root = Path(root)
    return pl.Trainer(
        accelerator='cpu',
        devices=1,
        precision='64-true',
        deterministic=True,
        max_epochs=epochs,
        default_root_dir=str(root),
        logger=CSVLogger(str(root), name='logs'),
        callbacks=[
            ModelCheckpoint(dirpath=str(root / 'checkpoints'), monitor='val_loss', save_top_k=1,
                            filename='{epoch}-{step}'),
            WeightsExport(),
        ],
        enable_progress_bar=False,
        enable_model_summary=False,
        num_sanity_val_steps=0,
    )


def train_attention(data_dir: Union[str, Path], root: Union[str, Path], init_args: Mapping[str, Any],
                    seed: int, epochs: int, split=(0.8, 0.1, 0.1), segment_seconds: float = 30.0) -> Path:
    pl.seed_everything(seed, workers=True)
    lm = AttentionLM(**{**init_args, 'seed': seed})
    data = DrivingData(str(data_dir), segment_seconds=segment_seconds, split=tuple(split), require_gaze=True)
    make_trainer(root, epochs).fit(lm, datamodule=data)
    return Path(root) / 'attention.weights.json'


def train_driving(data_dir: Union[str, Path], root: Union[str, Path], init_args: Mapping[str, Any],
                  seed: int, epochs: int, split=(0.8, 0.1, 0.1), segment_seconds: float = 30.0) -> Path:
    """Fits one driving model; the same arguments give bit-identical weights."""
    pl.seed_everything(seed, workers=True)
    lm = DrivingLM(**{**init_args, 'seed': seed})
    data = DrivingData(str(data_dir), segment_seconds=segment_seconds, split=tuple(split))
    make_trainer(root, epochs).fit(lm, datamodule=data)
    return Path(root) / 'driving.weights.json'


def generate_dataset(config: ExperimentConfig, out: Path) -> Path:
    data_dir = out / 'data'
    if (data_dir / MANIFEST).exists():
        rank_zero_info(f'Reusing dataset in {data_dir}')
        return data_dir
    world = WorldConfig(**config.world)
    return write_dataset(iter_clips(world), data_dir, world)


def pool_reports(reports: Mapping[int, EvalReport], name: str) -> EvalReport:
    """One report over every seed; each (seed, video) pair counts as its own video."""
    records = [replace(r, clip_id=f's{seed}/{r.clip_id}')
               for seed, report in sorted(reports.items()) for r in report.records]
    first = next(iter(reports.values()))
    metrics = calculate_metrics([r.pred for r in records], [r.target for r in records])
    return EvalReport(name, first.segment_seconds, flops=first.flops, records=records, **metrics)


def run_experiment(config: ExperimentConfig, out: Union[str, Path]) -> ExperimentResult:
    out = Path(out)
    data_dir = generate_dataset(config, out)
    _, _, test_clips = split_clips(read_dataset(data_dir), config.split)
    if not test_clips:
        raise ValueError(f'The test split of {data_dir} is empty')

    attention_path = train_attention(data_dir, out / 'attention', config.attention, config.seeds[0],
                                     config.attention_epochs, config.split, config.segment_seconds)

    weights: Dict[str, Dict[int, Path]] = {}
    reports: Dict[str, Dict[int, EvalReport]] = {}
    rows = []
    for name, init_args in config.model_args().items():
        init_args = {**init_args, 'attention_checkpoint': str(attention_path)}
        for seed in config.seeds:
            root = out / 'models' / name / f'seed{seed}'
            path = train_driving(data_dir, root, init_args, seed, config.driving_epochs, config.split,
                                 config.segment_seconds)
            model, _ = DrivingModel.from_weights(path)
            flops = compute_flops(model.config)
            report = evaluate(model, test_clips, config.segment_seconds, name=f'{name}/seed{seed}', flops=flops)
            report.save(root / 'report.json')
            weights.setdefault(name, {})[seed] = path
            reports.setdefault(name, {})[seed] = report
            rows.append({'model': name, 'seed': seed, 'mae': report.mae, 'rmse': report.rmse,
                         'corr': report.corr, 'flops': flops, 'frames': len(report.records)})
            rank_zero_info(f'{name} seed {seed}: MAE {report.mae:.3f}')

    reference = driving_config(**{**config.driving, 'policy': 'top-k'})
    backbone = frozen_backbone(reference.backbone, reference.backbone_seed).double()
    attention = load_attention(str(attention_path), reference).eval()
    settings = [('top-k', 1.0)] + [('sampled', t) for t in config.temperatures]
    fovea = fovea_diagnostics(backbone, attention, reference, test_clips, settings, config.seeds[0],
                              config.segment_seconds)

    subgroup = subgroup_analysis(pool_reports(reports[config.baseline], config.baseline),
                                 pool_reports(reports[config.gaze_model], config.gaze_model),
                                 config.permutations, config.seeds[0]).to_frame()

    curves = []
    if config.matched_model is not None:
        for seed in config.seeds:
            models = {name: DrivingModel.from_weights(weights[name][seed])[0]
                      for name in (UNIRESOLUTION, config.matched_model)}
            curve = compare_segment_lengths(models, test_clips, config.segment_lengths)
            curve.insert(1, 'seed', seed)
            curves.append(curve)
    segments = pd.concat(curves, ignore_index=True) if curves else pd.DataFrame()

    result = ExperimentResult(pd.DataFrame(rows), fovea, subgroup, segments)
    result.save(out / 'results')
    return result
