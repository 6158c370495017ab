"""Checkpoint files.

Layout::

    SOFTPRUNE-CHECKPOINT <version> <header_bytes>\\n
    <header: UTF-8 JSON, exactly header_bytes long>
    <parameter blobs: little-endian float64, C order>

The JSON header holds ``input_shape``, ``layers`` (one object per LayerSpec,
default-valued fields omitted) and ``params``: a list of
``[layer, key, shape]`` entries in declaration order (layer order, weight
before bias). Blobs follow that list back to back with no padding.
"""

import json

import numpy as np

from .errors import ParseError
from .graph import LayerSpec, ModelGraph

MAGIC = "SOFTPRUNE-CHECKPOINT"
VERSION = 1


def save_checkpoint(path, model, extra=None):
    entries = [[layer, key, list(arr.shape)] for layer, key, arr in model.named_arrays()]
    header = {
        "format": VERSION,
        "input_shape": list(model.input_shape),
        "layers": [l.to_dict() for l in model.layers],
        "params": entries,
    }
    if extra:
        header["extra"] = extra
    text = json.dumps(header, indent=1).encode()
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC} {VERSION} {len(text)}\n".encode())
        fh.write(text)
        for _, _, arr in model.named_arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path, with_extra=False):
    with open(path, "rb") as fh:
        first = fh.readline()
        parts = first.decode(errors="replace").split()
        if len(parts) != 3 or parts[0] != MAGIC:
            raise ParseError(f"{path}: not a checkpoint (bad first line at byte 0)")
        if int(parts[1]) != VERSION:
            raise ParseError(f"{path}: unsupported checkpoint version {parts[1]}")
        n = int(parts[2])
        text = fh.read(n)
        if len(text) != n:
            raise ParseError(f"{path}: header truncated at byte {len(first) + len(text)}, expected {n} bytes")
        try:
            header = json.loads(text)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: malformed header at byte {len(first) + e.pos}: {e.msg}") from None
        params = {}
        offset = len(first) + n
        for layer, key, shape in header["params"]:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise ParseError(
                    f"{path}: blob {layer}.{key} truncated at byte {offset + len(buf)}, expected {8 * count} bytes")
            offset += len(buf)
            params.setdefault(layer, {})[key] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
        if fh.read(1):
            raise ParseError(f"{path}: trailing bytes after byte {offset}")
    layers = [LayerSpec.from_dict(d) for d in header["layers"]]
    model = ModelGraph(layers, header["input_shape"], params)
    return (model, header.get("extra", {})) if with_extra else model
