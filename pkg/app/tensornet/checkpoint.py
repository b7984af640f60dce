import json
import os
import struct
from collections import OrderedDict

import numpy as np

from app.errors import TensorError

MAGIC = b'TNCK0001'
LENGTH_PREFIX = struct.Struct('<I')
PAYLOAD_DTYPE = np.dtype('<f8')


def save_checkpoint(path, arrays, meta=None):
    """Write named float64 arrays after a JSON manifest, in the given order."""
    entries = [{'name': name, 'shape': list(np.shape(value))} for name, value in arrays.items()]
    manifest = json.dumps({'tensors': entries, 'meta': meta or {}}, sort_keys=True).encode('utf-8')
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'wb') as handle:
        handle.write(MAGIC)
        handle.write(LENGTH_PREFIX.pack(len(manifest)))
        handle.write(manifest)
        for value in arrays.values():
            handle.write(np.ascontiguousarray(value, dtype=PAYLOAD_DTYPE).tobytes())


def load_checkpoint(path):
    """Return (OrderedDict of arrays, meta dict)."""
    try:
        with open(path, 'rb') as handle:
            raw = handle.read()
    except OSError as e:
        raise TensorError(f"cannot read checkpoint {path}: {e.strerror}") from e
    if raw[:len(MAGIC)] != MAGIC or len(raw) < len(MAGIC) + LENGTH_PREFIX.size:
        raise TensorError(f"{path} is not a checkpoint")
    offset = len(MAGIC)
    (length,) = LENGTH_PREFIX.unpack_from(raw, offset)
    offset += LENGTH_PREFIX.size
    try:
        manifest = json.loads(raw[offset:offset + length].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise TensorError(f"malformed checkpoint manifest in {path}: {str(e)}") from e
    offset += length

    arrays = OrderedDict()
    for entry in manifest.get('tensors', []):
        shape = tuple(int(v) for v in entry['shape'])
        nbytes = int(np.prod(shape, dtype=np.int64)) * PAYLOAD_DTYPE.itemsize
        if offset + nbytes > len(raw):
            raise TensorError(f"truncated payload for {entry['name']} in {path}")
        arrays[entry['name']] = np.frombuffer(raw, dtype=PAYLOAD_DTYPE, count=nbytes // 8,
                                              offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(raw):
        raise TensorError(f"trailing bytes in checkpoint {path}")
    return arrays, manifest.get('meta', {})
