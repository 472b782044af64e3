"""
Checkpoint Component

Binary model checkpoints with atomic writes.

Layout (little-endian):
    b'HMAE' | u32 version | u64 body length | u32 CRC-32 of body | body

body:
    u32 + UTF-8 JSON  ViTConfig
    u64               training step counter
    u32 + UTF-8 JSON  run state (seed, random stream scheme, optimizer hyperparameters)
    tensor table      model parameters
    tensor table      optimizer moments ('m.<name>', 'v.<name>'), may be empty

tensor table: u32 count, then per tensor u32 name length, UTF-8 name, u8 dtype
code (0 = f32, 1 = f64), u8 rank, rank x u32 dims, raw little-endian payload.
"""

import io
import json
import os
import struct
import zlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from components.errors import CheckpointError
from components.optim import AdamW
from components.vit_mae import MaeModel, ViTConfig

logger = logging.getLogger(__name__)

MAGIC = b'HMAE'
VERSION = 1
_PREAMBLE = struct.Struct('<4sIQI')
DTYPES = {0: np.dtype('<f4'), 1: np.dtype('<f8')}
DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
RNG_SCHEME = 'pcg64-seedsequence(seed, purpose, counters)'


@dataclass
class Checkpoint:
    config: ViTConfig
    tensors: Dict[str, np.ndarray]
    step: int = 0
    state: Dict[str, Any] = field(default_factory=dict)
    moments: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return int(self.state.get('seed', 0))


def _json_block(data: Dict[str, Any]) -> bytes:
    raw = json.dumps(data, sort_keys=True, separators=(',', ':')).encode('utf-8')
    return struct.pack('<I', len(raw)) + raw


def _tensor_table(tensors: Dict[str, np.ndarray]) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack('<I', len(tensors)))
    for name, array in tensors.items():
        array = np.asarray(array)
        if array.dtype not in DTYPE_CODES:
            raise CheckpointError(f"tensor {name} has unsupported dtype {array.dtype}")
        key = name.encode('utf-8')
        out.write(struct.pack('<I', len(key)))
        out.write(key)
        out.write(struct.pack('<BB', DTYPE_CODES[array.dtype], array.ndim))
        out.write(struct.pack(f'<{array.ndim}I', *array.shape))
        out.write(np.ascontiguousarray(array, dtype=DTYPES[DTYPE_CODES[array.dtype]]).tobytes())
    return out.getvalue()


class _Reader:
    """Bounds-checked cursor over the checkpoint body."""

    def __init__(self, data: bytes, source: Path):
        self.data = data
        self.offset = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointError(f"{self.source}: truncated body")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def json_block(self) -> Dict[str, Any]:
        (length,) = self.unpack('<I')
        return json.loads(self.take(length).decode('utf-8'))

    def tensor_table(self) -> Dict[str, np.ndarray]:
        (count,) = self.unpack('<I')
        tensors = {}
        for _ in range(count):
            (length,) = self.unpack('<I')
            name = self.take(length).decode('utf-8')
            code, rank = self.unpack('<BB')
            if code not in DTYPES:
                raise CheckpointError(f"{self.source}: tensor {name} has unknown dtype code {code}")
            shape = self.unpack(f'<{rank}I') if rank else ()
            dtype = DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            tensors[name] = np.frombuffer(self.take(size), dtype=dtype).reshape(shape).astype(dtype.newbyteorder('='))
        return tensors


def save_checkpoint(path: Union[str, Path], model: MaeModel, step: int = 0, seed: int = 0,
                    optimizer: Optional[AdamW] = None) -> Path:
    """
    Serialize a model (and optionally its optimizer) atomically.

    The file is written to a sibling temp file, fsynced, then renamed over `path`,
    so readers see either the old or the new checkpoint.

    Args:
        path: Target file
        model: Model to save
        step: Completed training steps
        seed: Run seed (random streams are derived from it and the step)
        optimizer: AdamW whose moments and step counter are saved for resuming

    Returns:
        The written path
    """
    path = Path(path)
    state: Dict[str, Any] = {'seed': int(seed), 'rng': RNG_SCHEME}
    moments: Dict[str, np.ndarray] = {}
    if optimizer is not None:
        s = optimizer.state
        state['optimizer'] = {'lr': s.lr, 'beta1': s.beta1, 'beta2': s.beta2, 'eps': s.eps,
                              'weight_decay': s.weight_decay, 't': s.t}
        for name in optimizer.params:
            if name in s.m:
                moments[f"m.{name}"] = s.m[name]
                moments[f"v.{name}"] = s.v[name]

    tensors = {name: p.data for name, p in model.named_parameters().items()}
    body = b''.join([
        _json_block(model.config.to_dict()),
        struct.pack('<Q', int(step)),
        _json_block(state),
        _tensor_table(tensors),
        _tensor_table(moments),
    ])
    preamble = _PREAMBLE.pack(MAGIC, VERSION, len(body), zlib.crc32(body) & 0xFFFFFFFF)

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + '.tmp')
    try:
        with open(tmp, 'wb') as f:
            f.write(preamble)
            f.write(body)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    logger.info(f"Checkpoint written to {path} (step {step}, {len(tensors)} tensors)")
    return path


def read_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Parse and validate a checkpoint file.

    Raises:
        CheckpointError: On a bad magic, version, length or checksum
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(data) < _PREAMBLE.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, length, crc = _PREAMBLE.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    body = data[_PREAMBLE.size:]
    if len(body) != length:
        raise CheckpointError(f"{path}: body is {len(body)} bytes, header says {length}")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch")

    reader = _Reader(body, path)
    config = ViTConfig.from_dict(reader.json_block())
    (step,) = reader.unpack('<Q')
    state = reader.json_block()
    tensors = reader.tensor_table()
    moments = reader.tensor_table()
    return Checkpoint(config, tensors, step, state, moments)


def _config_diff(expected: ViTConfig, stored: ViTConfig) -> Dict[str, Tuple[Any, Any]]:
    a, b = expected.to_dict(), stored.to_dict()
    return {k: (a[k], b[k]) for k in a if a[k] != b[k]}


def load_checkpoint(path: Union[str, Path], config: Optional[ViTConfig] = None) -> Tuple[MaeModel, Checkpoint]:
    """
    Rebuild a model from a checkpoint.

    Args:
        path: Checkpoint file
        config: Expected model config; any difference from the stored one is an error

    Returns:
        (model, checkpoint)

    Raises:
        CheckpointError: On a config mismatch or a missing/extra/misshaped tensor
    """
    ckpt = read_checkpoint(path)
    if config is not None:
        diff = _config_diff(config, ckpt.config)
        if diff:
            detail = ', '.join(f"{k}: expected {e}, stored {s}" for k, (e, s) in sorted(diff.items()))
            raise CheckpointError(f"{path}: model config mismatch ({detail})")
    model = MaeModel(ckpt.config, seed=ckpt.seed)
    params = model.named_parameters()
    missing = sorted(set(params) - set(ckpt.tensors))
    extra = sorted(set(ckpt.tensors) - set(params))
    if missing or extra:
        raise CheckpointError(f"{path}: tensor names differ (missing {missing}, unexpected {extra})")
    for name, p in params.items():
        stored = ckpt.tensors[name]
        if stored.shape != p.shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {stored.shape}, model expects {p.shape}")
        p.data = stored.copy()
    return model, ckpt


def restore_optimizer(optimizer: AdamW, ckpt: Checkpoint):
    """Load saved moments and step counter into an optimizer bound to the restored model."""
    saved = ckpt.state.get('optimizer')
    if saved is None:
        logger.warning("checkpoint has no optimizer state; moments start from zero")
        return
    optimizer.state.t = int(saved['t'])
    for name in optimizer.params:
        if f"m.{name}" in ckpt.moments:
            optimizer.state.m[name] = ckpt.moments[f"m.{name}"].astype(np.float64)
            optimizer.state.v[name] = ckpt.moments[f"v.{name}"].astype(np.float64)
