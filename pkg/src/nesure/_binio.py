"""Little-endian binary helpers for the checkpoint and dataset containers."""

import struct
import zlib

import numpy as np

from .errors import ChecksumError, FormatError

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def pack_u32(value):
    return _U32.pack(value)


def pack_block(name, array):
    """Serialize one named f64 block: name length, name, rank, dims, payload."""
    arr = np.ascontiguousarray(array, dtype="<f8")
    raw_name = name.encode("utf-8")
    parts = [_U32.pack(len(raw_name)), raw_name, _U32.pack(arr.ndim)]
    parts.extend(_U64.pack(d) for d in arr.shape)
    parts.append(arr.tobytes())
    return b"".join(parts)


def with_crc(body):
    return body + _U32.pack(zlib.crc32(body) & 0xFFFFFFFF)


def verify_crc(blob):
    """Return the body of ``blob`` after checking its trailing CRC32."""
    if len(blob) < 4:
        raise FormatError("file truncated: no CRC trailer")
    body, trailer = blob[:-4], blob[-4:]
    expected = _U32.unpack(trailer)[0]
    actual = zlib.crc32(body) & 0xFFFFFFFF
    if expected != actual:
        raise ChecksumError(f"CRC mismatch (stored {expected:#010x}, computed {actual:#010x})")
    return body


class Reader:
    """Bounds-checked cursor over a bytes buffer."""

    def __init__(self, buf, offset=0):
        self.buf = buf
        self.pos = offset

    def take(self, n):
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError("file truncated while reading payload")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return _U32.unpack(self.take(4))[0]

    def u64(self):
        return _U64.unpack(self.take(8))[0]

    def block(self):
        name = self.take(self.u32()).decode("utf-8")
        rank = self.u32()
        shape = tuple(self.u64() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape)
        return name, data.astype(np.float64)

    def at_end(self):
        return self.pos == len(self.buf)
