"""Binary PPM (P6) / PGM (P5) image files, maxval 255.

Float images in [0,1] map to bytes by round(255*x); masks use 0/255 only, so
the {0,1} values survive a round-trip exactly.
"""

import numpy as np

from .tensor import ShapeError


def _read_header(buf, magic):
    if buf[:2] != magic:
        raise ShapeError(f"expected {magic.decode()} file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(buf[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ShapeError(f"only maxval 255 supported, got {maxval}")
    return w, h, pos


def write_ppm(path, img):
    """img: (3,H,W) float in [0,1]."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"expected (3,H,W) image, got {list(img.shape)}")
    h, w = img.shape[1], img.shape[2]
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.transpose(1, 2, 0).tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    w, h, pos = _read_header(buf, b"P6")
    data = np.frombuffer(buf[pos : pos + 3 * w * h], dtype=np.uint8)
    if data.size != 3 * w * h:
        raise ShapeError(f"{path}: truncated pixel data")
    return (data.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32)) / 255.0


def write_pgm(path, mask):
    """mask: (1,H,W) or (H,W) binary; written as 0/255."""
    m = mask[0] if mask.ndim == 3 else mask
    data = (m > 0.5).astype(np.uint8) * 255
    h, w = m.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    w, h, pos = _read_header(buf, b"P5")
    data = np.frombuffer(buf[pos : pos + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise ShapeError(f"{path}: truncated pixel data")
    return (data.reshape(h, w) > 127).astype(np.float32)[None]
