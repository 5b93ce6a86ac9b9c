"""Small image helpers: resampling, compositing, hashing and PNG I/O.

Images are ``uint8`` arrays of shape (H, W, 3); masks are ``uint8`` arrays of
shape (H, W) holding 0/1; alpha channels are ``uint8`` 0..255.
"""
import hashlib
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidInputError


def nearest_indices(src_len, dst_len):
    """Source index for each destination index under pixel-center nearest sampling."""
    idx = np.floor((np.arange(dst_len) + 0.5) * src_len / dst_len).astype(np.int64)
    return np.clip(idx, 0, src_len - 1)


def resize_nearest(arr, size):
    h, w = size
    rows = nearest_indices(arr.shape[0], h)
    cols = nearest_indices(arr.shape[1], w)
    return arr[rows][:, cols]


def resize_bilinear(arr, size):
    """Half-pixel-centred bilinear resize of a float array (H, W) or (H, W, C)."""
    arr = np.asarray(arr, dtype=np.float64)
    h, w = size
    src_h, src_w = arr.shape[:2]

    def axis(src, dst):
        pos = (np.arange(dst) + 0.5) * src / dst - 0.5
        pos = np.clip(pos, 0, src - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, src - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(src_h, h)
    c0, c1, fc = axis(src_w, w)
    if arr.ndim == 3:
        fr = fr[:, None, None]
        fc = fc[None, :, None]
    else:
        fr = fr[:, None]
        fc = fc[None, :]
    top = arr[r0][:, c0] * (1 - fc) + arr[r0][:, c1] * fc
    bot = arr[r1][:, c0] * (1 - fc) + arr[r1][:, c1] * fc
    return top * (1 - fr) + bot * fr


def scaled_size(shape, scale):
    return int(round(shape[0] * scale)), int(round(shape[1] * scale))


def scale_sprite(color, alpha, scale):
    """Resample a sprite: bilinear for color, nearest-neighbour for alpha."""
    h, w = scaled_size(alpha.shape, scale)
    if h < 1 or w < 1:
        return None, None
    if (h, w) == alpha.shape:
        return color.astype(np.float64), alpha.copy()
    return resize_bilinear(color, (h, w)), resize_nearest(alpha, (h, w))


def alpha_over(dst, color, alpha8, x, y):
    """Composite ``color`` with 8-bit ``alpha8`` onto ``dst`` in place at top-left (x, y)."""
    h, w = alpha8.shape
    a = (alpha8.astype(np.float64) / 255.0)[..., None]
    region = dst[y:y + h, x:x + w].astype(np.float64)
    out = region * (1.0 - a) + np.asarray(color, dtype=np.float64) * a
    dst[y:y + h, x:x + w] = np.clip(np.rint(out), 0, 255).astype(np.uint8)


def to_gray(image):
    """Luma in [0, 1] from a uint8 or float [0, 1] color image."""
    img = np.asarray(image, dtype=np.float64)
    if image.dtype == np.uint8:
        img = img / 255.0
    if img.ndim == 2:
        return img
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


def content_hash(*arrays, length=16):
    h = hashlib.sha256()
    for arr in arrays:
        arr = np.ascontiguousarray(arr)
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()[:length]


def tight_bbox(mask):
    """(x, y, w, h) of the nonzero region, or None for an empty mask."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1)


def check_same_shape(*arrays):
    shapes = {a.shape[:2] for a in arrays}
    if len(shapes) != 1:
        raise InvalidInputError(f"grid dimensions differ: {sorted(shapes)}")


def write_png(path, arr, mask=False):
    """Write a uint8 array atomically. With ``mask=True`` 0/1 values are stored as {0, 255}."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(arr)
    if mask:
        arr = (arr > 0).astype(np.uint8) * np.uint8(255)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".png")
    os.close(fd)
    Image.fromarray(arr.astype(np.uint8)).save(tmp, format="PNG")
    os.replace(tmp, path)


def read_png(path, mask=False):
    arr = np.asarray(Image.open(path))
    if mask:
        return (arr > 127).astype(np.uint8)
    return arr.copy()


def atomic_write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w") as f:
        f.write(text)
    os.replace(tmp, path)
