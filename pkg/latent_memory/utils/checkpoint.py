"""
Tensor container format.

Layout: one JSON header line, then raw little-endian float32 arrays in
header order. Each header tensor entry records name, shape and the byte
offset of its data relative to the end of the header line.
"""
import json
import logging
from pathlib import Path

import numpy as np

from utils.errors import SnapshotMismatchError, ValidationError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
_FLOAT = np.dtype('<f4')


def save_tensors(path, tensors, kind, meta=None):
    """Write a name -> array mapping (insertion order kept) with metadata"""
    path = Path(path)
    try:
        entries = []
        blobs = []
        offset = 0
        for name, arr in tensors.items():
            data = np.ascontiguousarray(np.asarray(arr), dtype=_FLOAT)
            entries.append({'name': name, 'shape': list(data.shape), 'offset': offset})
            blobs.append(data.tobytes())
            offset += data.nbytes
        header = {
            'format_version': FORMAT_VERSION,
            'kind': kind,
            'meta': meta or {},
            'tensors': entries,
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'wb') as f:
            f.write(json.dumps(header, sort_keys=True).encode('utf-8'))
            f.write(b'\n')
            for blob in blobs:
                f.write(blob)
        logger.info(f"Wrote {kind} checkpoint with {len(entries)} tensors to {path}")
    except Exception as e:
        logger.error(f"Error writing checkpoint {path}: {e}")
        raise


def load_tensors(path, kind=None):
    """Read a container; returns (dict name -> float32 array, meta)"""
    path = Path(path)
    with open(path, 'rb') as f:
        line = f.readline()
        payload = f.read()
    try:
        header = json.loads(line.decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValidationError(f"{path} is not a tensor container: {e}") from e

    version = header.get('format_version')
    if version != FORMAT_VERSION:
        raise SnapshotMismatchError(
            f"{path} has format version {version}, expected {FORMAT_VERSION}"
        )
    if kind is not None and header.get('kind') != kind:
        raise SnapshotMismatchError(f"{path} holds a {header.get('kind')!r} container, expected {kind!r}")

    tensors = {}
    for entry in header['tensors']:
        shape = tuple(entry['shape'])
        count = int(np.prod(shape, dtype=np.int64))
        start = entry['offset']
        end = start + count * _FLOAT.itemsize
        if end > len(payload):
            raise ValidationError(f"{path} is truncated at tensor {entry['name']}")
        arr = np.frombuffer(payload[start:end], dtype=_FLOAT).reshape(shape)
        tensors[entry['name']] = arr.astype(np.float32)
    return tensors, header.get('meta', {})
