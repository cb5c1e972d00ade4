"""
ParamSet checkpoints.

Layout: an 8-byte little-endian unsigned header length, a UTF-8 JSON header,
then every parameter as 64-bit little-endian floats in header order. The
header maps each name to its offset (in values) and shape and carries the
model config.
"""
import json
import struct
from pathlib import Path

import numpy as np

from tensor_core.exceptions import ConfigError
from tensor_core.params import ParamSet

from .config import ModelConfig

FORMAT = 'normlab-params/1'


def save_params(params, path, metadata=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = {}
    offset = 0
    for param in params:
        entries[param.name] = {'offset': offset, 'shape': list(param.shape)}
        offset += param.data.size
    header = {
        'format': FORMAT,
        'config': params.config.to_dict() if params.config is not None else None,
        'params': entries,
        'metadata': metadata or {},
    }
    header_bytes = json.dumps(header).encode('utf-8')
    with path.open('wb') as fh:
        fh.write(struct.pack('<Q', len(header_bytes)))
        fh.write(header_bytes)
        fh.write(params.flat_values().astype('<f8').tobytes())
    return path


def load_params(path):
    """
    Read a checkpoint written by ``save_params``.

    Raises:
        FileNotFoundError: If the file does not exist.
        ConfigError: If the file is not a NormLab checkpoint.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ConfigError(f"{path}: truncated checkpoint")
    (header_len,) = struct.unpack('<Q', raw[:8])
    try:
        header = json.loads(raw[8:8 + header_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: unreadable checkpoint header ({exc})") from None
    if header.get('format') != FORMAT:
        raise ConfigError(f"{path}: not a {FORMAT} checkpoint")

    values = np.frombuffer(raw[8 + header_len:], dtype='<f8').astype(np.float64)
    config = ModelConfig.from_dict(header['config']) if header.get('config') else None
    params = ParamSet(config=config)
    for name, entry in header['params'].items():
        size = int(np.prod(entry['shape'], dtype=np.int64))
        start = entry['offset']
        if start + size > values.size:
            raise ConfigError(f"{path}: parameter {name!r} runs past the end of the file")
        params.add(name, values[start:start + size].reshape(entry['shape']))
    return params


def read_metadata(path):
    raw = Path(path).read_bytes()
    (header_len,) = struct.unpack('<Q', raw[:8])
    return json.loads(raw[8:8 + header_len].decode('utf-8')).get('metadata', {})
