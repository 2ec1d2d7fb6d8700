"""
MCKP checkpoint container.

Layout (little-endian)::

    b'MCKP' | u32 version | u32 header length | header JSON (kind + EncoderConfig)
    | u32 tensor count | per tensor: u32 name length, name, u32 rank,
      rank x u64 dims, f32 data
"""
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np
import torch
from torch import nn

from medsearch.constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from medsearch.exceptions import CheckpointFormatError, get_error_context

from .network import EncoderConfig, build_model


logger = logging.getLogger(__name__)


def checkpoint_bytes(model: nn.Module, kind: str) -> bytes:
    header = json.dumps({'kind': kind, 'config': model.config.to_dict()}, sort_keys=True).encode('utf-8')
    parts = [CHECKPOINT_MAGIC, struct.pack('<II', CHECKPOINT_VERSION, len(header)), header]
    tensors = list(model.state_dict().items())
    parts.append(struct.pack('<I', len(tensors)))
    for name, tensor in tensors:
        encoded = name.encode('utf-8')
        data = tensor.detach().cpu().to(torch.float32).numpy()
        parts.append(struct.pack('<I', len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack('<I', data.ndim))
        parts.append(struct.pack(f'<{data.ndim}Q', *data.shape))
        parts.append(np.ascontiguousarray(data, dtype='<f4').tobytes())
    return b''.join(parts)


def save_checkpoint(model: nn.Module, kind: str, path: Any) -> Path:
    """Write ``model`` as an MCKP file; values are stored as f32."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + '.tmp')
    tmp.write_bytes(checkpoint_bytes(model, kind))
    tmp.replace(path)
    logger.info(f"Saved {kind} checkpoint to {path}")
    return path


class _Reader:
    def __init__(self, data: bytes, path: Any):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise CheckpointFormatError(
                message=f"Checkpoint {self.path} truncated while reading {what}",
                context=get_error_context(path=self.path, offset=self.offset, needed=size)
            )
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path: Any, dtype: torch.dtype = torch.float32) -> Tuple[str, nn.Module]:
    """
    Read an MCKP file back into a model.

    Returns:
        ``(kind, model)`` where kind is 'retriever' or 'reranker'
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointFormatError(
            message=f"Checkpoint not found: {path}",
            context=get_error_context(path=path)
        )
    reader = _Reader(path.read_bytes(), path)
    if reader.take(4, 'magic') != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(message=f"{path} is not an MCKP checkpoint", context=get_error_context(path=path))
    version, = reader.unpack('<I', 'version')
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            message=f"Unsupported checkpoint version {version}",
            context=get_error_context(path=path, version=version)
        )
    header_len, = reader.unpack('<I', 'header length')
    try:
        header = json.loads(reader.take(header_len, 'header').decode('utf-8'))
        kind = header['kind']
        config = EncoderConfig.from_dict(header['config'])
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointFormatError(
            message=f"Invalid checkpoint header in {path}",
            context=get_error_context(path=path),
            cause=e
        )

    model = build_model(kind, config)
    expected = model.state_dict()
    count, = reader.unpack('<I', 'tensor count')
    if count != len(expected):
        raise CheckpointFormatError(
            message=f"Checkpoint has {count} tensors, model expects {len(expected)}",
            context=get_error_context(path=path, count=count, expected=len(expected))
        )
    loaded: Dict[str, torch.Tensor] = {}
    for _ in range(count):
        name_len, = reader.unpack('<I', 'name length')
        name = reader.take(name_len, 'name').decode('utf-8')
        rank, = reader.unpack('<I', f'rank of {name}')
        dims = reader.unpack(f'<{rank}Q', f'dims of {name}')
        if name not in expected or tuple(expected[name].shape) != tuple(dims):
            raise CheckpointFormatError(
                message=f"Tensor {name} with shape {list(dims)} does not fit the model",
                context=get_error_context(path=path, tensor=name, dims=list(dims))
            )
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        values = np.frombuffer(reader.take(4 * size, f'data of {name}'), dtype='<f4').reshape(dims)
        loaded[name] = torch.from_numpy(values.astype(np.float32))
    if reader.offset != len(reader.data):
        raise CheckpointFormatError(
            message=f"Trailing bytes after the last tensor in {path}",
            context=get_error_context(path=path, offset=reader.offset)
        )
    model.load_state_dict(loaded)
    model = model.to(dtype)
    logger.info(f"Loaded {kind} checkpoint from {path}")
    return kind, model


def load_kind(path: Any, kind: str, dtype: torch.dtype = torch.float32) -> nn.Module:
    """Load a checkpoint and require it to be of ``kind``."""
    found, model = load_checkpoint(path, dtype)
    if found != kind:
        raise CheckpointFormatError(
            message=f"{path} holds a {found} checkpoint, expected {kind}",
            context=get_error_context(path=path, kind=found, expected=kind)
        )
    return model
