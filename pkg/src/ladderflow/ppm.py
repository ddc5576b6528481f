"""Binary P6 portable-pixmap I/O.

Chosen for dependency-free, bit-exact golden files. Images travel as
float arrays; the value range convention is [-1, 1] for model space and
[0, 1] for storage space.
"""

from __future__ import annotations

import numpy as np


class PpmError(ValueError):
    pass


def to_bytes01(img01: np.ndarray) -> np.ndarray:
    """[0,1] float -> uint8 with round-half-away-from-zero."""
    scaled = np.clip(img01, 0.0, 1.0) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


def model_to_01(img: np.ndarray) -> np.ndarray:
    return (np.clip(img, -1.0, 1.0) + 1.0) / 2.0


def write_ppm(path, img01: np.ndarray) -> None:
    if img01.ndim != 3 or img01.shape[2] != 3:
        raise PpmError(f"expected HxWx3 image, got shape {img01.shape}")
    h, w, _ = img01.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(to_bytes01(img01).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a P6 file, returning float32 in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise PpmError(f"{path}: not a P6 pixmap")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise PpmError(f"{path}: unsupported maxval {maxval}")
    raw = data[pos : pos + w * h * 3]
    if len(raw) != w * h * 3:
        raise PpmError(f"{path}: truncated pixel payload")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return img.astype(np.float32) / 255.0
