"""Flat binary checkpoint files.

Layout: one magic/version line, then per parameter a text header line
``name<TAB>comma-joined-shape`` followed by the raw little-endian
float64 buffer and a single ``\\n`` separator.  Values always travel as
64-bit regardless of the in-memory training precision, so a save/load
round trip is bit-exact for float64 models.
"""

from collections import OrderedDict

import numpy as np

MAGIC = b"TIENET-CKPT-V1\n"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(params, path):
    """Write an ordered {name: array} mapping to path."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, value in params.items():
            arr = np.ascontiguousarray(np.asarray(value), dtype="<f8")
            dims = ",".join(str(d) for d in arr.shape)
            fh.write(f"{name}\t{dims}\n".encode("utf-8"))
            fh.write(arr.tobytes())
            fh.write(b"\n")


def load_checkpoint(path):
    """Read a checkpoint back as an ordered {name: float64 array} mapping."""
    out = OrderedDict()
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
        while True:
            header = fh.readline()
            if not header:
                break
            try:
                name, dims = header.decode("utf-8").rstrip("\n").split("\t")
            except ValueError:
                raise CheckpointError(f"{path}: malformed entry header {header!r}")
            shape = tuple(int(d) for d in dims.split(",")) if dims else ()
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise CheckpointError(f"{path}: truncated data for entry {name!r}")
            if fh.read(1) != b"\n":
                raise CheckpointError(f"{path}: missing separator after {name!r}")
            out[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return out
