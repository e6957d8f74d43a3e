"""
checkpoint.py

Binary checkpoint codec for model parameters.

Layout (little-endian):
    header  "<4sIIII"  magic b"GSCK", version, N, H, layer count L
    layers  for each layer: weights (fan_in x fan_out) then bias (fan_out),
            float64, row-major; sizes are 2 -> H -> ... -> H -> N*N
    g0      N float64 values
"""

import logging
import os
import struct
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

import autodiff as ad
from autodiff import Tensor
from errors import StorageError
from model import ModelParams

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GSCK"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


def layer_sizes(n_units: int, hidden: int, n_layers: int) -> List[Tuple[int, int]]:
    """(fan_in, fan_out) for each MLP layer."""
    sizes = [2] + [hidden] * (n_layers - 1) + [n_units * n_units]
    return list(zip(sizes[:-1], sizes[1:]))


def encode_checkpoint(params: ModelParams) -> bytes:
    header = _HEADER.pack(
        CHECKPOINT_MAGIC, CHECKPOINT_VERSION, params.n_units, params.hidden, len(params.layers)
    )
    chunks = [header]
    for w, b in params.layers:
        chunks.append(np.ascontiguousarray(w.value, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(b.value, dtype="<f8").tobytes())
    chunks.append(np.ascontiguousarray(params.g0.value, dtype="<f8").tobytes())
    return b"".join(chunks)


def decode_checkpoint(data: bytes, dtype=np.float64, train_g0: bool = False) -> ModelParams:
    """
    Parse checkpoint bytes.

    Raises:
        StorageError: wrong magic, unsupported version or truncated payload
    """
    if len(data) < _HEADER.size:
        raise StorageError("checkpoint truncated: header incomplete")
    magic, version, n_units, hidden, n_layers = _HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise StorageError(f"not a checkpoint file (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise StorageError(f"unsupported checkpoint version {version}")

    shapes = layer_sizes(n_units, hidden, n_layers)
    expected = _HEADER.size + 8 * (sum(i * o + o for i, o in shapes) + n_units)
    if len(data) != expected:
        raise StorageError(f"checkpoint size {len(data)} bytes, expected {expected}")

    offset = _HEADER.size

    def read(count: int) -> np.ndarray:
        nonlocal offset
        values = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        return values.astype(dtype)

    layers = []
    for i, (fan_in, fan_out) in enumerate(shapes):
        w = read(fan_in * fan_out).reshape(fan_in, fan_out)
        b = read(fan_out)
        layers.append((ad.parameter(w, f"w{i}"), ad.parameter(b, f"b{i}")))
    g0 = Tensor(read(n_units), requires_grad=train_g0, name="g0")
    return ModelParams(layers, g0)


def write_checkpoint(path: Union[str, Path], params: ModelParams) -> Path:
    """Write atomically (temp file then rename) and return the path."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(encode_checkpoint(params))
        os.replace(tmp, path)
    except OSError as e:
        raise StorageError(f"cannot write checkpoint {path}: {e}") from e
    logger.debug("Wrote checkpoint %s", path)
    return path


def read_checkpoint(path: Union[str, Path], dtype=np.float64, train_g0: bool = False) -> ModelParams:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise StorageError(f"cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(data, dtype=dtype, train_g0=train_g0)
