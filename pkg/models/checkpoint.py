"""Weights container: a JSON document mapping parameter names to little-endian arrays.

Layout::

    {"format": "foveal-driving.weights", "format_version": 1,
     "metadata": {...},
     "tensors": {name: {"shape": [...], "dtype": "<f8", "data": base64}}}

Keys are sorted and no timestamps are written, so identical weights give identical files.
"""
import base64
import hashlib
import json
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple, Union

import numpy as np
import torch
from torch import nn

FORMAT = 'foveal-driving.weights'
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _encode(t: torch.Tensor) -> Dict[str, Any]:
    arr = t.detach().cpu().numpy()
    dtype = '<f8' if np.issubdtype(arr.dtype, np.floating) else '<i8'
    arr = np.require(arr.astype(dtype), requirements='C')
    return {'shape': list(arr.shape), 'dtype': dtype,
            'data': base64.b64encode(arr.tobytes()).decode('ascii')}


def _decode(name: str, entry: Mapping[str, Any]) -> torch.Tensor:
    try:
        dtype = np.dtype(entry['dtype'])
        if entry['dtype'] not in ('<f8', '<i8'):
            raise CheckpointError(f'{name}: unsupported dtype {entry["dtype"]}')
        raw = base64.b64decode(entry['data'], validate=True)
        shape = tuple(entry['shape'])
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f'{name}: malformed tensor entry ({e})') from None
    if len(raw) != dtype.itemsize * int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError(f'{name}: {len(raw)} bytes do not fill shape {shape}')
    return torch.from_numpy(np.frombuffer(raw, dtype=dtype).reshape(shape).copy())


def weights_document(state: Mapping[str, torch.Tensor], metadata: Mapping[str, Any] = None) -> str:
    doc = {
        'format': FORMAT,
        'format_version': FORMAT_VERSION,
        'metadata': dict(metadata or {}),
        'tensors': {name: _encode(t) for name, t in state.items()},
    }
    return json.dumps(doc, sort_keys=True)


def save_weights(module: Union[nn.Module, Mapping[str, torch.Tensor]],
                 path: Union[str, Path],
                 metadata: Mapping[str, Any] = None) -> Path:
    state = module.state_dict() if isinstance(module, nn.Module) else module
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(weights_document(state, metadata))
    return path


def read_weights(path: Union[str, Path]) -> Tuple['OrderedDict[str, torch.Tensor]', Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f'No weights file at {path}')
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f'{path}: not a JSON document ({e})') from None
    if not isinstance(doc, dict) or doc.get('format') != FORMAT:
        raise CheckpointError(f'{path}: not a {FORMAT} file')
    if doc.get('format_version') != FORMAT_VERSION:
        raise CheckpointError(f'{path}: format version {doc.get("format_version")} '
                              f'is not supported (expected {FORMAT_VERSION})')
    state = OrderedDict((name, _decode(name, entry)) for name, entry in sorted(doc['tensors'].items()))
    return state, doc.get('metadata', {})


def load_weights(module: nn.Module, path: Union[str, Path]) -> Dict[str, Any]:
    """Loads weights into `module` (cast to its dtype) and returns the metadata."""
    state, metadata = read_weights(path)
    own = module.state_dict()
    missing = sorted(set(own) - set(state))
    unexpected = sorted(set(state) - set(own))
    if missing or unexpected:
        raise CheckpointError(f'{path}: missing tensors {missing}, unexpected tensors {unexpected}')
    for name, t in state.items():
        if tuple(t.shape) != tuple(own[name].shape):
            raise CheckpointError(f'{path}: {name} has shape {tuple(t.shape)}, '
                                  f'module expects {tuple(own[name].shape)}')
        state[name] = t.to(own[name].dtype)
    module.load_state_dict(state)
    return metadata


def state_hash(module: Union[nn.Module, Mapping[str, torch.Tensor]]) -> str:
    """SHA-256 over names and raw bytes of every tensor."""
    state = module.state_dict() if isinstance(module, nn.Module) else module
    digest = hashlib.sha256()
    for name in sorted(state):
        digest.update(name.encode())
        digest.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
