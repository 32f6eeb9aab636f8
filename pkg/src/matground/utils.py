"""Small shared helpers: seeded random streams and binary record I/O."""

import struct
import zlib

import numpy as np

from .errors import FormatError


def rng_for(seed, name):
    """Independent generator for the named sub-stream of ``seed``."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def write_magic(fh, magic):
    fh.write(magic.encode("ascii"))


def read_magic(fh, magic):
    got = fh.read(len(magic))
    if got != magic.encode("ascii"):
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")


def write_struct(fh, fmt, *values):
    fh.write(struct.pack("<" + fmt, *values))


def read_struct(fh, fmt):
    size = struct.calcsize("<" + fmt)
    buf = fh.read(size)
    if len(buf) != size:
        raise FormatError("unexpected end of file")
    return struct.unpack("<" + fmt, buf)


def write_array(fh, arr, dtype):
    fh.write(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())


def read_array(fh, count, dtype, shape=None):
    dt = np.dtype(dtype).newbyteorder("<")
    buf = fh.read(count * dt.itemsize)
    if len(buf) != count * dt.itemsize:
        raise FormatError("unexpected end of file")
    out = np.frombuffer(buf, dtype=dt).astype(np.dtype(dtype).newbyteorder("="))
    return out.reshape(shape) if shape is not None else out
