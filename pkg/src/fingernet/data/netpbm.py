"""Minimal reader/writer for portable graymap/pixmap files (P2, P3, P5, P6).

Only 8-bit images (maxval <= 255) are supported. Pixmaps are converted to
grayscale on read with luminance weights 0.299/0.587/0.114.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import DataError

LUMA = np.array([0.299, 0.587, 0.114])


def _tokens(buf: bytes, count: int, pos: int) -> tuple[list[int], int]:
    out: list[int] = []
    n = len(buf)
    while len(out) < count:
        while pos < n and (buf[pos : pos + 1].isspace() or buf[pos : pos + 1] == b"#"):
            if buf[pos : pos + 1] == b"#":
                while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DataError("unexpected end of header")
        out.append(int(buf[start:pos]))
    return out, pos


def decode(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    """Decode a netpbm byte string into a uint8 (H, W) or (H, W, 3) array."""
    magic = buf[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise DataError(f"{source}: not a P2/P3/P5/P6 file")
    try:
        (width, height, maxval), pos = _tokens(buf, 3, 2)
    except ValueError as exc:
        raise DataError(f"{source}: malformed header") from exc
    if width < 1 or height < 1:
        raise DataError(f"{source}: degenerate image {width}x{height}")
    if not 1 <= maxval <= 255:
        raise DataError(f"{source}: only 8-bit images are supported (maxval={maxval})")
    planes = 3 if magic in (b"P3", b"P6") else 1
    count = width * height * planes
    if magic in (b"P5", b"P6"):
        raw = buf[pos + 1 : pos + 1 + count]
        if len(raw) != count:
            raise DataError(f"{source}: truncated pixel data")
        values = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    else:
        try:
            values = np.array(buf[pos:].split()[:count], dtype=np.int64)
        except ValueError as exc:
            raise DataError(f"{source}: malformed pixel data") from exc
        if values.size != count:
            raise DataError(f"{source}: truncated pixel data")
    if values.max(initial=0) > maxval:
        raise DataError(f"{source}: pixel value above maxval")
    if maxval != 255:
        values = np.rint(values * (255.0 / maxval)).astype(np.int64)
    shape = (height, width, 3) if planes == 3 else (height, width)
    return values.astype(np.uint8).reshape(shape)


def read_image(path: str | Path) -> np.ndarray:
    """Read a graymap/pixmap as a uint8 grayscale (H, W) array."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    img = decode(buf, str(path))
    if img.ndim == 3:
        img = np.clip(np.rint(img.astype(np.float64) @ LUMA), 0, 255).astype(np.uint8)
    return img


def encode(image: np.ndarray, plain: bool = False) -> bytes:
    img = np.asarray(image)
    if img.ndim != 2 or img.size == 0:
        raise DataError(f"expected a non-empty 2-d image, got shape {img.shape}")
    if img.min() < 0 or img.max() > 255:
        raise DataError(f"pixel values must lie in [0, 255], got [{img.min()}, {img.max()}]")
    img = img.astype(np.uint8)
    h, w = img.shape
    if plain:
        rows = "\n".join(" ".join(str(int(v)) for v in row) for row in img)
        return f"P2\n{w} {h}\n255\n{rows}\n".encode("ascii")
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def write_pgm(path: str | Path, image: np.ndarray, plain: bool = False) -> None:
    Path(path).write_bytes(encode(image, plain=plain))
