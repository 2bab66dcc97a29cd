"""Single-file checkpoints: one JSON header line, then raw little-endian float64 blocks."""
import json

import numpy as np


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, header, blocks):
    payload = b"".join(np.ascontiguousarray(b, dtype="<f8").tobytes() for b in blocks)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(payload)


def read_checkpoint(path, schema, shapes_from_header):
    """Return ``(header, blocks)``; block shapes come from ``shapes_from_header(header)``."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        data = np.frombuffer(fh.read(), dtype="<f8")
    if header.get("schema") != schema:
        raise CheckpointError(f"{path}: expected schema {schema!r}, found {header.get('schema')!r}")
    shapes = shapes_from_header(header)
    need = sum(int(np.prod(s)) for s in shapes)
    if data.size != need:
        raise CheckpointError(f"{path}: expected {need} floats, found {data.size}")
    blocks, pos = [], 0
    for shape in shapes:
        n = int(np.prod(shape))
        blocks.append(data[pos:pos + n].reshape(shape).astype(np.float64))
        pos += n
    return header, blocks
