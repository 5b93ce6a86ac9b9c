import numpy as np
import pytest

from lifelong_cd.compositor import make_prior


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def opaque_square(size=10, color=(200, 30, 30)):
    sprite = np.zeros((size, size, 3), dtype=np.uint8)
    sprite[:] = color
    return make_prior(sprite, np.full((size, size), 255, dtype=np.uint8))


def disc_prior(radius=4, color=(20, 220, 40)):
    n = 2 * radius + 1
    yy, xx = np.mgrid[0:n, 0:n]
    alpha = (((yy - radius) ** 2 + (xx - radius) ** 2) <= radius * radius).astype(np.uint8) * 255
    sprite = np.zeros((n, n, 3), dtype=np.uint8)
    sprite[:] = color
    return make_prior(sprite, alpha)


def nearest_oracle(alpha8, out_h, out_w):
    """Pixel-centre nearest-neighbour resampling written with plain loops."""
    in_h, in_w = alpha8.shape
    out = np.zeros((out_h, out_w), dtype=alpha8.dtype)
    for i in range(out_h):
        si = min(int((i + 0.5) * in_h / out_h), in_h - 1)
        for j in range(out_w):
            sj = min(int((j + 0.5) * in_w / out_w), in_w - 1)
            out[i, j] = alpha8[si, sj]
    return out


def flood_fill_count(binary):
    """Count 8-connected components with an explicit stack."""
    h, w = binary.shape
    seen = np.zeros_like(binary, dtype=bool)
    count = 0
    for y in range(h):
        for x in range(w):
            if binary[y, x] and not seen[y, x]:
                count += 1
                stack = [(y, x)]
                seen[y, x] = True
                while stack:
                    cy, cx = stack.pop()
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            ny, nx = cy + dy, cx + dx
                            if 0 <= ny < h and 0 <= nx < w and binary[ny, nx] and not seen[ny, nx]:
                                seen[ny, nx] = True
                                stack.append((ny, nx))
    return count


def brute_correlation(a, b, d):
    """Triple-loop cost volume: out[k, y, x] = <a[:, y, x], b[:, y+dy, x+dx]> / C."""
    c, h, w = a.shape
    side = 2 * d + 1
    out = np.zeros((side * side, h, w))
    for k in range(side * side):
        dy, dx = k // side - d, k % side - d
        for y in range(h):
            for x in range(w):
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w:
                    out[k, y, x] = sum(a[ch, y, x] * b[ch, yy, xx] for ch in range(c)) / c
    return out
