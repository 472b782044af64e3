"""
Embedding Store Component

Binary `HMEB` embedding files and CSV export for inspection.

Layout (little-endian): magic b'HMEB', u32 version, u32 count, u32 dim, then per
record: u32 id length, UTF-8 id, i32 label (-1 = none), u8 split code, dim f32s.
"""

import csv
import os
import struct
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from components.errors import DimensionError, EmbeddingStoreError
from components.probe import EmbeddingRecord, LabelMapping

logger = logging.getLogger(__name__)

MAGIC = b'HMEB'
VERSION = 1
SPLIT_CODES = {None: 0, 'train': 1, 'val': 2, 'test': 3}
SPLIT_NAMES = {code: name for name, code in SPLIT_CODES.items()}
_HEADER = struct.Struct('<4sIII')
_RECORD = struct.Struct('<iB')


def write_embeddings(path: Union[str, Path], records: Sequence[EmbeddingRecord], dim: Optional[int] = None) -> Path:
    """
    Write records atomically (temp file, fsync, rename).

    Args:
        path: Target file
        records: Embeddings, all of the same dimension
        dim: Vector dimension; required only when records is empty

    Returns:
        The written path
    """
    path = Path(path)
    if dim is None:
        if not records:
            raise EmbeddingStoreError("dim is required to write an empty embedding store")
        dim = records[0].vector.shape[0]
    chunks = [_HEADER.pack(MAGIC, VERSION, len(records), dim)]
    for record in records:
        if record.vector.shape != (dim,):
            raise DimensionError(f"{record.region_id}: vector shape {record.vector.shape} != ({dim},)")
        if record.split not in SPLIT_CODES:
            raise EmbeddingStoreError(f"{record.region_id}: unknown split {record.split!r}")
        key = record.region_id.encode('utf-8')
        chunks.append(struct.pack('<I', len(key)))
        chunks.append(key)
        chunks.append(_RECORD.pack(-1 if record.label is None else int(record.label), SPLIT_CODES[record.split]))
        chunks.append(record.vector.astype('<f4').tobytes())

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + '.tmp')
    with open(tmp, 'wb') as f:
        f.write(b''.join(chunks))
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)
    logger.info(f"Wrote {len(records)} embeddings (dim {dim}) to {path}")
    return path


def read_embeddings(path: Union[str, Path]) -> List[EmbeddingRecord]:
    """
    Read an embedding store.

    Raises:
        EmbeddingStoreError: On a bad magic, unknown version, truncation or trailing bytes
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise EmbeddingStoreError(f"cannot read embeddings {path}: {e}") from e
    if len(data) < _HEADER.size:
        raise EmbeddingStoreError(f"{path}: truncated header")
    magic, version, count, dim = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise EmbeddingStoreError(f"{path}: not an embedding store (magic {magic!r})")
    if version != VERSION:
        raise EmbeddingStoreError(f"{path}: unsupported version {version}")

    offset = _HEADER.size
    records = []
    try:
        for _ in range(count):
            (length,) = struct.unpack_from('<I', data, offset)
            offset += 4
            if offset + length > len(data):
                raise EmbeddingStoreError(f"{path}: truncated record id")
            region_id = data[offset:offset + length].decode('utf-8')
            offset += length
            label, split = _RECORD.unpack_from(data, offset)
            offset += _RECORD.size
            end = offset + 4 * dim
            if end > len(data):
                raise EmbeddingStoreError(f"{path}: truncated vector for {region_id}")
            vector = np.frombuffer(data[offset:end], dtype='<f4').astype(np.float32)
            offset = end
            if split not in SPLIT_NAMES:
                raise EmbeddingStoreError(f"{path}: unknown split code {split} for {region_id}")
            records.append(EmbeddingRecord(region_id, vector, None if label < 0 else label, SPLIT_NAMES[split]))
    except struct.error as e:
        raise EmbeddingStoreError(f"{path}: truncated record ({e})") from e
    if offset != len(data):
        raise EmbeddingStoreError(f"{path}: {len(data) - offset} trailing bytes")
    return records


def export_embeddings_csv(path: Union[str, Path], records: Sequence[EmbeddingRecord],
                          mapping: Optional[LabelMapping] = None) -> Path:
    """Write `id,label,split,e0..e{dim-1}`; labels are class names when a mapping is given."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dim = records[0].vector.shape[0] if records else 0
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['id', 'label', 'split'] + [f"e{i}" for i in range(dim)])
        for r in records:
            label = '' if r.label is None else (mapping.classes[r.label] if mapping else r.label)
            writer.writerow([r.region_id, label, r.split or ''] + [repr(float(v)) for v in r.vector])
    return path
