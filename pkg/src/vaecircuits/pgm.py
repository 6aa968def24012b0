"""8-bit binary PGM (P5) read/write."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    """Write a 2-D array of intensities in [0, 1] as round(p * 255)."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"write_pgm expects a 2-D image, got shape {img.shape}")
    h, w = img.shape
    data = to_u8(img)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    body = raw[pos + 1:pos + 1 + w * h]
    if len(body) != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def tile(images, ncols: int, pad: int = 1, fill: float = 1.0) -> np.ndarray:
    """Arrange equally sized 2-D images in a grid."""
    images = [np.asarray(im) for im in images]
    h, w = images[0].shape
    nrows = -(-len(images) // ncols)
    out = np.full((nrows * (h + pad) + pad, ncols * (w + pad) + pad), fill)
    for k, im in enumerate(images):
        r, c = divmod(k, ncols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        out[y:y + h, x:x + w] = im
    return out
