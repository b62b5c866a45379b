"""Binary parameter checkpoints.

Layout: magic ``PFHN``, version u32, tensor count u32, then per tensor
(sorted by name): name length u16, name bytes (utf-8), rank u8, dims u32
each, payload as little-endian float32.  Parameters are down-cast to 32-bit
on save and up-cast on load, so a save/load/save cycle is bit-identical.

A JSON sidecar at ``<path>.json`` carries the run configuration.
"""

import json
import struct

import numpy as np

from .autodiff import Tensor
from .errors import DataError

MAGIC = b"PFHN"
VERSION = 1


def save_checkpoint(path, named, config=None):
    """``named`` maps name -> Tensor or ndarray; order on disk is by name."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(named)))
        for name in sorted(named):
            arr = named[name]
            data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
            data = np.ascontiguousarray(data, dtype=np.float32)
            nb = name.encode("utf-8")
            if len(nb) > 0xFFFF:
                raise DataError(f"tensor name too long: {name[:40]}...")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(data.astype("<f4").tobytes())
    if config is not None:
        with open(str(path) + ".json", "w", encoding="utf-8") as fh:
            json.dump(config, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path):
    """Returns (dict name -> float64 ndarray, config dict or None)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != MAGIC:
            raise DataError(f"{path}: not a checkpoint (expected magic "
                            f"{MAGIC!r})")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims")) \
                if rank else ()
            size = int(np.prod(dims)) if dims else 1
            payload = _read_exact(fh, 4 * size, f"payload of {name}")
            arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
            out[name] = arr.astype(np.float64)
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after last tensor")
    config = None
    try:
        with open(str(path) + ".json", encoding="utf-8") as fh:
            config = json.load(fh)
    except FileNotFoundError:
        pass
    return out, config
