"""Binary PPM (P6) / PGM (P5) reading and writing, 8-bit only."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from casnet.errors import DataFormatError


def _tokens(data: bytes, count: int, path) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    out, i, n = [], 0, len(data)
    while len(out) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
            j += 1
        if j == i:
            raise DataFormatError(f"{path}: truncated header")
        out.append(data[i:j])
        i = j
    # exactly one whitespace byte separates maxval from the raster
    return out, i + 1


def read_pnm(path) -> np.ndarray:
    """Return an (H, W, C) uint8 array; C is 3 for P6 and 1 for P5."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DataFormatError(f"{path}: cannot read image ({exc.strerror})") from exc
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise DataFormatError(f"{path}: not a binary PGM/PPM (magic {magic!r})")
    (_, w, h, maxval), start = _tokens(data, 4, path)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise DataFormatError(f"{path}: non-numeric header field") from None
    if not (0 < maxval <= 255):
        raise DataFormatError(f"{path}: only 8-bit images supported (maxval {maxval})")
    c = 3 if magic == b"P6" else 1
    need = w * h * c
    raster = data[start:start + need]
    if len(raster) != need:
        raise DataFormatError(f"{path}: expected {need} raster bytes, found {len(raster)}")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, c)
    if maxval != 255:
        img = np.round(img.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return img


def write_pnm(path, img: np.ndarray) -> Path:
    """Write (H, W, 3) as P6 or (H, W) / (H, W, 1) as P5; values must be uint8."""
    path = Path(path)
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError(f"write_pnm needs uint8 pixels, got {img.dtype}")
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    if c == 3:
        magic = b"P6"
    elif c == 1:
        magic = b"P5"
    else:
        raise ValueError(f"write_pnm needs 1 or 3 channels, got {c}")
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img).tobytes())
    return path


def to_uint8(x: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to 0..255 with round-half-to-even."""
    return np.clip(np.rint(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)
