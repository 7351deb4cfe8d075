"""Binary tensor/model files and the small CSV/JSON side files.

LRT1 tensor file::

    b"LRT1" | u64 I0 | u64 I1 | u64 I2 | I0*I1*I2 x f64   (little endian,
                                                          row major, NaN = missing)

LRK1 model file::

    b"LRK1" | u64 R | u64 I0 | u64 I1 | u64 I2 | R x f64 weights | A0 | A1 | A2
                                                          (factors row major)
"""

from __future__ import annotations

import csv
import json
import math
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .tensor import KruskalModel, MaskedTensor

TENSOR_MAGIC = b"LRT1"
MODEL_MAGIC = b"LRK1"
_F64 = np.dtype("<f8")


def tensor_to_bytes(tensor):
    head = TENSOR_MAGIC + struct.pack("<3Q", *tensor.dims)
    return head + np.ascontiguousarray(tensor.values, dtype=_F64).tobytes()


def tensor_from_bytes(data):
    if data[:4] != TENSOR_MAGIC:
        raise ValidationError("not an LRT1 tensor file (bad magic)")
    dims = struct.unpack_from("<3Q", data, 4)
    n = dims[0] * dims[1] * dims[2]
    body = data[28:]
    if len(body) != 8 * n:
        raise ValidationError(f"LRT1 payload has {len(body)} bytes, expected {8 * n}")
    values = np.frombuffer(body, dtype=_F64).reshape(dims).astype(np.float64)
    return MaskedTensor.from_array(values)


def write_tensor(path, tensor):
    Path(path).write_bytes(tensor_to_bytes(tensor))


def read_tensor(path):
    return tensor_from_bytes(Path(path).read_bytes())


def write_model(path, model):
    parts = [MODEL_MAGIC, struct.pack("<4Q", model.rank, *model.dims)]
    parts.append(np.ascontiguousarray(model.weights, dtype=_F64).tobytes())
    for a in model.factors:
        parts.append(np.ascontiguousarray(a, dtype=_F64).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_model(path):
    data = Path(path).read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise ValidationError(f"{path}: not an LRK1 model file (bad magic)")
    rank, *dims = struct.unpack_from("<4Q", data, 4)
    expected = 36 + 8 * rank * (1 + sum(dims))
    if len(data) != expected:
        raise ValidationError(f"{path}: LRK1 file has {len(data)} bytes, expected {expected}")
    flat = np.frombuffer(data, dtype=_F64, offset=36)
    weights, offset = flat[:rank], rank
    factors = []
    for d in dims:
        factors.append(flat[offset:offset + d * rank].reshape(d, rank))
        offset += d * rank
    return KruskalModel(weights, tuple(factors))


def write_json(path, obj):
    """Deterministic JSON: sorted keys, NaN written as null."""
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        obj = float(obj)
        return obj if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def read_key_value(path):
    """Flat ``key=value`` file; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_rows(path, header, rows, preamble=None):
    with open(path, "w", newline="") as fh:
        if preamble:
            fh.write(preamble.rstrip("\n") + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                             for v in row])
