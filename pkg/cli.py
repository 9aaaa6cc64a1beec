import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd
import yaml

from data.io import read_dataset, write_dataset
from data.world import WorldConfig, iter_clips
from lightning.analysis import DIAGNOSTIC_SETTINGS, compare_segment_lengths, fovea_diagnostics, subgroup_analysis
from lightning.data import split_clips
from lightning.driving import driving_config
from lightning.eval_utils import evaluate
from models.attention import AttentionNet
from models.backbone import frozen_backbone
from models.checkpoint import load_weights, read_weights
from models.config import ModelConfig
from models.driving import DrivingModel
from models.flops import (REPORTED_COMBINED_FLOPS, REPORTED_UNIRESOLUTION_SIZE, build_uniresolution_baseline,
                          compute_flops, layer_flops)


def load_yaml(path: str) -> Dict:
    with open(path) as f:
        return yaml.safe_load(f) or {}


def write_jsonl(rows: List[Dict], path: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        for row in rows:
            f.write(json.dumps(row) + '\n')


def world_config(path: Optional[str], seed: Optional[int]) -> WorldConfig:
    values = load_yaml(path) if path else {}
    values = values.get('world', values)
    known = {f.name for f in fields(WorldConfig)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f'Unknown world settings: {sorted(unknown)}')
    if seed is not None:
        values['seed'] = seed
    return WorldConfig(**values)


def generate_data(args):
    config = world_config(args.config, args.seed)
    path = write_dataset(iter_clips(config), args.out, config)
    print(f'Wrote {config.num_clips} clips to {path}')


def _fit(args, require_gaze: bool, model_args: Optional[Dict] = None):
    from main import cli_main

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = load_yaml(args.config)
    data_class = base.get('data', {}).get('class_path', 'lightning.data.DrivingData')
    overlay = {
        'trainer': {
            'default_root_dir': str(out),
            'logger': {'class_path': 'pytorch_lightning.loggers.CSVLogger',
                       'init_args': {'save_dir': str(out), 'name': 'logs'}},
        },
        'data': {'class_path': data_class,
                 'init_args': {'data_dir': args.data, 'require_gaze': require_gaze}},
    }
    if model_args:
        overlay['model'] = {'class_path': base['model']['class_path'], 'init_args': model_args}
    overlay_path = out / 'overrides.yaml'
    with open(overlay_path, 'w') as f:
        yaml.safe_dump(overlay, f)
    cli_main(['fit', '--config', args.config, '--config', str(overlay_path)])


def train_attention(args):
    _fit(args, require_gaze=True)


def train(args):
    model_args = {'attention_checkpoint': args.attention} if args.attention else None
    _fit(args, require_gaze=False, model_args=model_args)


def evaluation_clips(args):
    clips = read_dataset(args.data)
    if args.split == 'all':
        return clips
    train_clips, val_clips, test_clips = split_clips(clips, args.ratios, args.split_seed)
    return {'train': train_clips, 'val': val_clips, 'test': test_clips}[args.split]


def checkpoint_name(path: str) -> str:
    name = Path(path).name
    return name[:-len('.weights.json')] if name.endswith('.weights.json') else Path(path).stem


def run_evaluation(path: str, clips, segment_seconds: float, placements_log=None):
    model, _ = DrivingModel.from_weights(path)
    name = checkpoint_name(path)
    if Path(path).parent.name:
        name = f'{Path(path).parent.name}/{name}'
    return evaluate(model, clips, segment_seconds, name=name, placements_log=placements_log,
                    flops=compute_flops(model.config))


def evaluate_command(args):
    clips = evaluation_clips(args)
    log = [] if args.placements else None
    report = run_evaluation(args.checkpoint, clips, args.segment_len, log)
    report.save(args.out)
    if log is not None:
        write_jsonl(log, args.placements)
    print(f'{report.name}: MAE {report.mae:.3f}  RMSE {report.rmse:.3f}  corr {report.corr:.3f}  '
          f'({len(report.records)} frames) -> {args.out}')


def attention_from_checkpoint(path: str):
    """(backbone, attention, ModelConfig) from an attention or driving export."""
    _, metadata = read_weights(path)
    if metadata.get('kind') == 'driving':
        model, _ = DrivingModel.from_weights(path)
        if model.attention is None:
            raise ValueError(f'{path} has no attention model (policy {model.config.fovea.policy!r})')
        return model.backbone, model.attention, model.config
    config = ModelConfig.from_dict(metadata['model_config'])
    attention = AttentionNet.from_config(config).double()
    load_weights(attention, path)
    attention.eval()
    return frozen_backbone(config.backbone, config.backbone_seed).double(), attention, config


def compare(args):
    clips = evaluation_clips(args)
    if args.analysis == 'subgroup':
        if len(args.checkpoints) != 2:
            raise ValueError('Subgroup analysis compares exactly two checkpoints: baseline then model')
        baseline, model = (run_evaluation(p, clips, args.segment_len) for p in args.checkpoints)
        result = subgroup_analysis(baseline, model, args.permutations, args.seed)
        table = result.to_frame()
    elif args.analysis == 'segment-curve':
        models = {checkpoint_name(p): DrivingModel.from_weights(p)[0] for p in args.checkpoints}
        table = compare_segment_lengths(models, clips, args.lengths)
    else:
        backbone, attention, config = attention_from_checkpoint(args.checkpoints[0])
        settings = [('top-k', 1.0)] + [('sampled', t) for t in args.temperatures] \
            if args.temperatures else DIAGNOSTIC_SETTINGS
        log = [] if args.placements else None
        table = fovea_diagnostics(backbone, attention, config, clips, settings, args.seed,
                                  args.segment_len, log)
        if log is not None:
            write_jsonl(log, args.placements)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(args.out, index=False)
    print(table.to_string(index=False))


def model_config_from_file(path: str) -> ModelConfig:
    if path.endswith('.weights.json'):
        _, metadata = read_weights(path)
        return ModelConfig.from_dict(metadata['model_config'])
    model = load_yaml(path).get('model', {})
    if not model.get('class_path', '').endswith('DrivingLM'):
        raise ValueError(f'{path} does not configure a lightning.DrivingLM model')
    return driving_config(**model.get('init_args', {}))


def flops(args):
    config = model_config_from_file(args.config)
    table = pd.DataFrame([vars(r) for r in layer_flops(config)])
    print(table.to_string(index=False))
    total = compute_flops(config)
    print(f'total: {total}')
    if args.match:
        baseline = build_uniresolution_baseline(config)
        matched = compute_flops(baseline)
        print(f'uni-resolution periphery {baseline.peripheral_size}: {matched} '
              f'({matched / total - 1:+.2%})')
        if config.scale == 1:
            print(f'reported at full scale: {REPORTED_COMBINED_FLOPS:.3g} FLOPs, periphery '
                  f'{REPORTED_UNIRESOLUTION_SIZE}; here {total:.3g} FLOPs, periphery {baseline.peripheral_size}')
        document = load_yaml(args.config) if args.config.endswith(('.yaml', '.yml')) else {
            'model': {'class_path': 'lightning.DrivingLM', 'init_args': {'scale': config.scale}}}
        init_args = document['model'].setdefault('init_args', {})
        init_args.update(planner='periphery-only', policy='none',
                         peripheral_size=list(baseline.peripheral_size), attention_checkpoint=None)
        Path(args.match).parent.mkdir(parents=True, exist_ok=True)
        with open(args.match, 'w') as f:
            yaml.safe_dump(document, f, sort_keys=False)


def experiment(args):
    import torch

    from lightning.experiments import ExperimentConfig, run_experiment

    torch.set_default_dtype(torch.float64)
    result = run_experiment(ExperimentConfig.from_yaml(args.config), args.out)
    print(result.summary().to_string())
    print(result.subgroup.to_string(index=False))


def add_split_args(parser):
    parser.add_argument('--data', type=str, required=True, help='dataset directory')
    parser.add_argument('--segment-len', type=float, default=30.0, help='segment length in seconds')
    parser.add_argument('--split', choices=('train', 'val', 'test', 'all'), default='test')
    parser.add_argument('--ratios', type=float, nargs=3, default=(0.8, 0.1, 0.1))
    parser.add_argument('--split-seed', type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Foveated driving speed prediction')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('generate-data', help='render a synthetic driving dataset')
    p.add_argument('--config', type=str, default=None, help='world YAML')
    p.add_argument('--out', type=str, required=True)
    p.add_argument('--seed', type=int, default=None)
    p.set_defaults(func=generate_data)

    for name, func in (('train-attention', train_attention), ('train', train)):
        p = sub.add_parser(name, help='fit a model with a LightningCLI config')
        p.add_argument('--config', type=str, required=True)
        p.add_argument('--data', type=str, required=True)
        p.add_argument('--out', type=str, required=True)
        if name == 'train':
            p.add_argument('--attention', type=str, default=None, help='attention weights export')
        p.set_defaults(func=func)

    p = sub.add_parser('evaluate', help='score a driving checkpoint')
    p.add_argument('--checkpoint', type=str, required=True)
    add_split_args(p)
    p.add_argument('--placements', type=str, default=None, help='fovea placement JSONL')
    p.add_argument('--out', type=str, required=True, help='report JSON')
    p.set_defaults(func=evaluate_command)

    p = sub.add_parser('compare', help='analyses over several checkpoints')
    p.add_argument('--checkpoints', type=str, nargs='+', required=True)
    p.add_argument('--analysis', choices=('subgroup', 'segment-curve', 'fovea-diagnostics'), required=True)
    add_split_args(p)
    p.add_argument('--lengths', type=float, nargs='+', default=(2, 10, 20, 30))
    p.add_argument('--temperatures', type=float, nargs='+', default=None)
    p.add_argument('--permutations', type=int, default=10000)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--placements', type=str, default=None)
    p.add_argument('--out', type=str, required=True, help='CSV')
    p.set_defaults(func=compare)

    p = sub.add_parser('experiment', help='train and compare every placement policy over several seeds')
    p.add_argument('--config', type=str, required=True, help='experiment YAML')
    p.add_argument('--out', type=str, required=True)
    p.set_defaults(func=experiment)

    p = sub.add_parser('flops', help='per-frame operation count')
    p.add_argument('--config', type=str, required=True, help='DrivingLM YAML or weights export')
    p.add_argument('--match', type=str, default=None, help='write a FLOPs-matched uni-resolution YAML')
    p.set_defaults(func=flops)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as e:
        print(f'{args.command}: {type(e).__name__}: {e}', file=sys.stderr)
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
