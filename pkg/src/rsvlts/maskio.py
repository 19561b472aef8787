"""Binary mask I/O in the Netpbm P4 (bitmap) and P5 (graymap) formats."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from rsvlts.geom import BinaryMask


class MaskFormatError(ValueError):
    pass


def _header(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens = []
    pos = 0
    while len(tokens) < count:
        if pos >= len(data):
            raise MaskFormatError("truncated header")
        c = data[pos : pos + 1]
        if c == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
                pos += 1
            tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def decode_pnm(data: bytes) -> BinaryMask:
    magic = data[:2]
    if magic == b"P4":
        (_, w, h), pos = _header(data, 3)
        width, height = int(w), int(h)
        row_bytes = (width + 7) // 8
        raw = np.frombuffer(data, dtype=np.uint8, count=row_bytes * height, offset=pos)
        bits = np.unpackbits(raw.reshape(height, row_bytes), axis=1)[:, :width]
        return BinaryMask(width, height, bits.astype(bool))
    if magic == b"P5":
        (_, w, h, mx), pos = _header(data, 4)
        width, height, maxval = int(w), int(h), int(mx)
        dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
        raw = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
        return BinaryMask(width, height, raw.reshape(height, width) > 127)
    raise MaskFormatError(f"unsupported magic {magic!r}; expected P4 or P5")


def encode_pbm(mask: BinaryMask) -> bytes:
    """P4 bytes; rows padded to a byte boundary with zero bits."""
    packed = np.packbits(mask.bits.astype(np.uint8), axis=1)
    return f"P4\n{mask.width} {mask.height}\n".encode("ascii") + packed.tobytes()


def encode_pgm(mask: BinaryMask) -> bytes:
    gray = np.where(mask.bits, 255, 0).astype(np.uint8)
    return f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii") + gray.tobytes()


def read_mask(path) -> BinaryMask:
    return decode_pnm(Path(path).read_bytes())


def write_mask(mask: BinaryMask, path) -> None:
    path = Path(path)
    data = encode_pgm(mask) if path.suffix.lower() == ".pgm" else encode_pbm(mask)
    path.write_bytes(data)
