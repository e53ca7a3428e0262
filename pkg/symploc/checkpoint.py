"""
Named-tensor checkpoint files.

Layout (little-endian):
    b"SYMPLOC1"
    uint32 tensor count
    per tensor: uint32 name length, UTF-8 name, uint32 ndim, ndim x uint32 dims,
                prod(dims) x float64 payload (row-major)
"""

import logging
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict

import numpy as np

from .exceptions import CheckpointFormatError
from .params import ModelParams

logger = logging.getLogger('symploc')

MAGIC = b"SYMPLOC1"


def save_checkpoint(params: ModelParams, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = params.state_dict()
    chunks = [MAGIC, struct.pack('<I', len(state))]
    for name, value in state.items():
        encoded = name.encode('utf-8')
        chunks.append(struct.pack('<I', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack('<I', value.ndim))
        chunks.append(struct.pack(f'<{value.ndim}I', *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype='<f8').tobytes())
    path.write_bytes(b''.join(chunks))
    logger.info(f"Saved {len(state)} tensors to {path}")
    return path


def _take(blob: bytes, offset: int, size: int, path) -> bytes:
    if offset + size > len(blob):
        raise CheckpointFormatError(f"{path}: truncated checkpoint")
    return blob[offset:offset + size]


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    """
    Raises:
        CheckpointFormatError: On a bad magic header, truncation or trailing bytes
    """
    path = Path(path)
    blob = path.read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointFormatError(f"{path}: not a checkpoint file")
    offset = len(MAGIC)
    (count,) = struct.unpack('<I', _take(blob, offset, 4, path))
    offset += 4

    state = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack('<I', _take(blob, offset, 4, path))
        offset += 4
        name = _take(blob, offset, name_len, path).decode('utf-8')
        offset += name_len
        (ndim,) = struct.unpack('<I', _take(blob, offset, 4, path))
        offset += 4
        shape = struct.unpack(f'<{ndim}I', _take(blob, offset, 4 * ndim, path))
        offset += 4 * ndim
        n_bytes = 8 * int(np.prod(shape, dtype=np.int64))
        payload = np.frombuffer(_take(blob, offset, n_bytes, path), dtype='<f8')
        offset += n_bytes
        state[name] = payload.reshape(shape).astype(np.float64)

    if offset != len(blob):
        raise CheckpointFormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return state


def restore_checkpoint(params: ModelParams, path) -> None:
    params.load_state_dict(load_checkpoint(path))
    logger.info(f"Restored {len(params)} tensors from {path}")
