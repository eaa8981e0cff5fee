"""PPM (P6) and PNG image I/O for float images in [0, 1]."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    img = to_uint8(image)
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError("only 8-bit PPM is supported")
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return raw.reshape(h, w, 3).astype(np.float64) / 255.0


def write_png(path, image: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def write_image(path, image: np.ndarray) -> None:
    if str(path).lower().endswith(".png"):
        write_png(path, image)
    else:
        write_ppm(path, image)


def read_image(path) -> np.ndarray:
    """Float RGB image in [0, 1] from a PPM or any Pillow-readable file."""
    if str(path).lower().endswith((".ppm", ".pnm")):
        return read_ppm(path)
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
