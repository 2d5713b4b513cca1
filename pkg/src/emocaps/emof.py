"""EMOF tensor files.

Layout (all little-endian)::

    b"EMOF" | version u16 | rank u8 | rank x extent u32 | float32 payload, row-major
"""
import os
import struct
import tempfile

import numpy as np

from .errors import FormatError, MissingFileError

MAGIC = b"EMOF"
VERSION = 1


def encode(array):
    arr = np.asarray(array)
    if arr.ndim > 255 or any(n >= 2 ** 32 for n in arr.shape):
        raise FormatError(f"EMOF cannot hold shape {arr.shape}")
    header = MAGIC + struct.pack("<HB", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode(buf, source="<bytes>"):
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise FormatError(f"{source}: not an EMOF file (bad magic)")
    version, rank = struct.unpack_from("<HB", buf, 4)
    if version != VERSION:
        raise FormatError(f"{source}: unsupported EMOF version {version}")
    off = 7 + 4 * rank
    if len(buf) < off:
        raise FormatError(f"{source}: truncated EMOF header")
    shape = struct.unpack_from(f"<{rank}I", buf, 7)
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) - off != 4 * count:
        raise FormatError(f"{source}: payload holds {(len(buf) - off) // 4} values, "
                          f"shape {shape} needs {count}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)


def atomic_write_bytes(path, data):
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def save(path, array):
    atomic_write_bytes(path, encode(array))


def load(path):
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except FileNotFoundError:
        raise MissingFileError(f"missing tensor file {path}")
    return decode(buf, source=os.fspath(path))
