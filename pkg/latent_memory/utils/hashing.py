"""
Digest helpers for weights, token sequences and files
"""
import hashlib
from pathlib import Path

import numpy as np


def digest_arrays(arrays):
    """sha256 over (name, shape, dtype, bytes) of a name -> array mapping, in name order"""
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode('utf-8'))
        h.update(str(arr.shape).encode('utf-8'))
        h.update(str(arr.dtype).encode('utf-8'))
        h.update(arr.tobytes())
    return h.hexdigest()


def digest_tokens(token_ids):
    arr = np.asarray(token_ids, dtype=np.int64)
    return hashlib.sha256(arr.tobytes()).hexdigest()


def digest_file(path):
    h = hashlib.sha256()
    with open(Path(path), 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            h.update(chunk)
    return h.hexdigest()
