"""16-bit binary PGM/PPM writer and reader.

Values are mapped linearly from ``value_range`` onto ``0..65535`` and clipped.
The range is stored in a header comment so the reader can undo the map
(up to quantization).
"""

import numpy as np

from .errors import ContractError, FormatError

MAXVAL = 65535


def write_pnm(path, image, value_range=(0.0, 1.0)):
    """Write a ``(1,H,W)`` image as PGM or a ``(3,H,W)`` image as PPM."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ContractError(f"expected (1,H,W) or (3,H,W), got {img.shape}")
    lo, hi = (float(v) for v in value_range)
    if not hi > lo:
        raise ContractError("value range must satisfy hi > lo")
    q = np.rint(np.clip((img - lo) / (hi - lo), 0.0, 1.0) * MAXVAL).astype(">u2")
    magic = b"P5" if img.shape[0] == 1 else b"P6"
    _, h, w = img.shape
    header = magic + f"\n# range {lo!r} {hi!r}\n{w} {h}\n{MAXVAL}\n".encode()
    with open(path, "wb") as fh:
        fh.write(header + np.ascontiguousarray(q.transpose(1, 2, 0)).tobytes())


def read_pnm(path):
    """Inverse of :func:`write_pnm`; returns ``(image, value_range)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens, pos, lo, hi = [], 0, 0.0, 1.0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            end = blob.index(b"\n", pos)
            parts = blob[pos + 1:end].split()
            if len(parts) == 3 and parts[0] == b"range":
                lo, hi = float(parts[1]), float(parts[2])
            pos = end + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != MAXVAL:
        raise FormatError(f"{path}: unsupported PNM variant")
    c = 1 if magic == b"P5" else 3
    payload = blob[pos:pos + 2 * w * h * c]
    if len(payload) != 2 * w * h * c:
        raise FormatError(f"{path}: truncated pixel data")
    raw = np.frombuffer(payload, dtype=">u2")
    img = raw.reshape(h, w, c).transpose(2, 0, 1).astype(np.float64) / MAXVAL
    return lo + img * (hi - lo), (lo, hi)
