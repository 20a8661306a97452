"""Binary PPM/PGM images and raw depth maps.

Images are float arrays [C, H, W] in [0, 1]; P6 holds three channels and
P5 one.  Samples are 8-bit for maxval 255 and big-endian 16-bit for 65535.
"""

from __future__ import annotations

import numpy as np

from . import serialize

MAXVALS = (255, 65535)


class ImageFormatError(ValueError):
    pass


def _header_tokens(blob: bytes, count: int) -> tuple:
    """Read ``count`` whitespace-separated header tokens; returns (tokens, data offset)."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(blob) and (blob[pos:pos + 1].isspace() or blob[pos:pos + 1] == b"#"):
            if blob[pos:pos + 1] == b"#":
                end = blob.find(b"\n", pos)
                pos = len(blob) if end < 0 else end + 1
            else:
                pos += 1
        if pos >= len(blob):
            raise ImageFormatError(f"truncated header at byte {pos}")
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append((blob[start:pos], start))
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise ImageFormatError(f"expected one whitespace byte after header at byte {pos}")
    return tokens, pos + 1


def decode_pnm(blob: bytes) -> np.ndarray:
    if blob[:2] not in (b"P5", b"P6"):
        raise ImageFormatError(f"bad magic {blob[:2]!r} at byte 0, expected P5 or P6")
    tokens, offset = _header_tokens(blob, 4)
    channels = 3 if tokens[0][0] == b"P6" else 1
    values = []
    for tok, at in tokens[1:]:
        if not tok.isdigit():
            raise ImageFormatError(f"expected an integer at byte {at}, got {tok[:16]!r}")
        values.append(int(tok))
    w, h, maxval = values
    if w <= 0 or h <= 0:
        raise ImageFormatError(f"non-positive image size {w}x{h} at byte {tokens[1][1]}")
    if maxval not in MAXVALS:
        raise ImageFormatError(f"unsupported maxval {maxval} at byte {tokens[3][1]}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * channels * dtype.itemsize
    payload = blob[offset:]
    if len(payload) != need:
        raise ImageFormatError(f"pixel data at byte {offset} has {len(payload)} bytes, "
                               f"expected {need}")
    raw = np.frombuffer(payload, dtype=dtype).reshape(h, w, channels)
    return (raw.astype(np.float64) / maxval).transpose(2, 0, 1).astype(np.float32)


def encode_pnm(img: np.ndarray, maxval: int = 255) -> bytes:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ValueError(f"image must be [1 or 3, H, W], got {img.shape}")
    if maxval not in MAXVALS:
        raise ValueError(f"maxval must be one of {MAXVALS}")
    c, h, w = img.shape
    q = np.round(np.clip(img, 0.0, 1.0) * maxval).transpose(1, 2, 0)
    data = q.astype(">u2" if maxval > 255 else "u1").tobytes()
    return f"{'P6' if c == 3 else 'P5'}\n{w} {h}\n{maxval}\n".encode("ascii") + data


def read_image(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pnm(fh.read())


def write_image(path: str, img: np.ndarray, maxval: int = 255) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pnm(img, maxval))


def write_depth_pgm(path: str, depth: np.ndarray, max_depth: float = 80.0) -> None:
    """16-bit PGM with sample = round(depth / max_depth * 65535)."""
    depth = np.asarray(depth, dtype=np.float64)
    write_image(path, (depth / max_depth).reshape((1,) + depth.shape[-2:]), 65535)


def read_depth_pgm(path: str, max_depth: float = 80.0) -> np.ndarray:
    """Inverse of :func:`write_depth_pgm`: depth = sample / 65535 * max_depth."""
    return (read_image(path).astype(np.float64) * max_depth).astype(np.float32)


def write_depth(path: str, depth: np.ndarray) -> None:
    serialize.save_tensor(path, depth)


def read_depth(path: str) -> np.ndarray:
    return serialize.load_tensor(path)
