"""Procedural object sprites.

Two families are drawn:

* generic priors, nine COCO-like classes drawn as cut-outs: hard alpha edges,
  saturated colors and, for a share of instances, busy photographic clutter;
* domain objects for the two planted groups, drawn the way they appear in the
  workspace: soft alpha fringe, muted colors and smooth shading.
"""
import numpy as np

from .compositor import GENERIC, make_prior

GENERIC_CLASSES = ("apple", "bottle", "fork", "spoon", "toothbrush", "banana", "cup",
                   "handbag", "sports_ball")
GROUPS = {
    "group1": ("smartphone", "cable", "notepad", "pen"),
    "group2": ("handkerchief", "wallet", "ic_card"),
}

_SUPERSAMPLE = 4


def _grid(h, w):
    s = _SUPERSAMPLE
    yy, xx = np.mgrid[0:h * s, 0:w * s].astype(np.float64)
    return (yy + 0.5) / s, (xx + 0.5) / s


def _downsample(cover, h, w):
    s = _SUPERSAMPLE
    return cover.reshape(h, s, w, s).mean(axis=(1, 3))


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _rect(yy, xx, y0, x0, y1, x1):
    return (yy >= y0) & (yy < y1) & (xx >= x0) & (xx < x1)


def _segment(yy, xx, p0, p1, width):
    (y0, x0), (y1, x1) = p0, p1
    dy, dx = y1 - y0, x1 - x0
    t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / max(dy * dy + dx * dx, 1e-9), 0, 1)
    return (yy - (y0 + t * dy)) ** 2 + (xx - (x0 + t * dx)) ** 2 <= (width / 2.0) ** 2


def _coverage(kind, h, w, rng):
    """Fractional pixel coverage of a class silhouette on an (h, w) canvas."""
    yy, xx = _grid(h, w)
    cy, cx = h / 2.0, w / 2.0
    if kind in ("apple", "sports_ball"):
        m = _ellipse(yy, xx, cy, cx, h / 2.0 - 0.3, w / 2.0 - 0.3)
        if kind == "apple":
            m |= _rect(yy, xx, 0, cx - 0.6, 1.6, cx + 0.6)
    elif kind == "bottle":
        m = _rect(yy, xx, h * 0.3, 0.5, h - 0.3, w - 0.5) | _rect(yy, xx, 0.3, w * 0.35, h * 0.35, w * 0.65)
    elif kind in ("fork", "toothbrush"):
        m = _rect(yy, xx, h * 0.3, cx - 0.7, h, cx + 0.7)
        if kind == "fork":
            for off in (-1.5, 0.0, 1.5):
                m |= _rect(yy, xx, 0, cx + off - 0.4, h * 0.35, cx + off + 0.4)
            m |= _rect(yy, xx, h * 0.25, cx - 1.9, h * 0.35, cx + 1.9)
        else:
            m |= _rect(yy, xx, 0, cx - 1.2, h * 0.3, cx + 1.2)
    elif kind == "spoon":
        m = _ellipse(yy, xx, h * 0.2, cx, h * 0.2, w / 2.0 - 0.2) | _rect(yy, xx, h * 0.3, cx - 0.6, h, cx + 0.6)
    elif kind == "banana":
        r = np.hypot(yy - h * 1.1, xx - cx)
        m = (r >= h * 0.55) & (r <= h * 0.95) & (yy < h * 0.85)
    elif kind == "cup":
        m = _rect(yy, xx, 0.5, 0.5, h - 0.5, w * 0.72)
        ring = np.hypot(yy - cy, xx - w * 0.72)
        m |= (ring >= h * 0.15) & (ring <= h * 0.3) & (xx > w * 0.72)
    elif kind == "handbag":
        m = _rect(yy, xx, h * 0.4, 0.5, h - 0.5, w - 0.5)
        ring = np.hypot(yy - h * 0.4, xx - cx)
        m |= (ring >= w * 0.22) & (ring <= w * 0.35) & (yy < h * 0.4)
    elif kind in ("smartphone", "ic_card", "wallet", "notepad", "handkerchief"):
        inset = 0.5 if kind != "handkerchief" else 0.3
        m = _rect(yy, xx, inset, inset, h - inset, w - inset)
        if kind in ("smartphone", "ic_card", "wallet"):
            # round the corners a little
            for (ry, rx) in ((inset, inset), (inset, w - inset), (h - inset, inset), (h - inset, w - inset)):
                m &= ~((np.abs(yy - ry) < 1.0) & (np.abs(xx - rx) < 1.0)
                       & (np.hypot(np.abs(yy - ry) - 1.0, np.abs(xx - rx) - 1.0) > 1.0))
    elif kind == "pen":
        m = _segment(yy, xx, (1.0, 1.0), (h - 1.0, w - 1.0), 1.6)
    elif kind == "cable":
        pts = [(1.0 + i * (h - 2.0) / 4, w / 2.0 + (w / 2.0 - 1.5) * np.sin(i * 1.4 + rng.uniform(0, 3)))
               for i in range(5)]
        m = np.zeros_like(yy, dtype=bool)
        for a, b in zip(pts[:-1], pts[1:]):
            m |= _segment(yy, xx, a, b, 1.4)
    else:
        raise KeyError(kind)
    return _downsample(m.astype(np.float64), h, w)


_GENERIC_SIZE = {
    "apple": (10, 10), "bottle": (14, 7), "fork": (14, 5), "spoon": (14, 5),
    "toothbrush": (14, 4), "banana": (9, 14), "cup": (10, 11), "handbag": (12, 12),
    "sports_ball": (11, 11),
}
_GENERIC_COLOR = {
    "apple": (220, 20, 30), "bottle": (20, 200, 90), "fork": (230, 230, 240),
    "spoon": (200, 200, 215), "toothbrush": (30, 120, 255), "banana": (250, 225, 20),
    "cup": (250, 250, 250), "handbag": (200, 30, 160), "sports_ball": (255, 140, 0),
}
_DOMAIN_SIZE = {
    "smartphone": (12, 7), "cable": (14, 8), "notepad": (11, 9), "pen": (12, 5),
    "handkerchief": (10, 10), "wallet": (8, 11), "ic_card": (7, 11),
}
_DOMAIN_COLOR = {
    "smartphone": (40, 42, 48), "cable": (70, 70, 75), "notepad": (215, 205, 170),
    "pen": (35, 55, 120), "handkerchief": (170, 150, 175), "wallet": (95, 60, 40),
    "ic_card": (180, 195, 210),
}


def _shade(h, w, base, rng, strength):
    """Smooth directional shading around ``base``."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(theta) * (xx / max(w - 1, 1) - 0.5) + np.sin(theta) * (yy / max(h - 1, 1) - 0.5))
    return np.asarray(base, dtype=np.float64)[None, None, :] * (1.0 + strength * ramp[..., None])


def generic_sprite(kind, rng, cluttered):
    h, w = _GENERIC_SIZE[kind]
    cover = _coverage(kind, h, w, rng)
    alpha8 = np.where(cover >= 0.5, 255, 0).astype(np.uint8)
    base = np.clip(np.asarray(_GENERIC_COLOR[kind]) + rng.integers(-25, 26, 3), 0, 255)
    color = np.broadcast_to(base.astype(np.float64), (h, w, 3)).copy()
    if cluttered:
        color += rng.normal(0, 70, (h, w, 3))
        color[rng.random((h, w)) < 0.2] = rng.integers(0, 256, 3)
    # the matte around a cut-out keeps the saturated source color
    return np.clip(np.rint(color), 0, 255).astype(np.uint8), alpha8


def domain_sprite(kind, rng):
    h, w = _DOMAIN_SIZE[kind]
    if rng.random() < 0.5 and kind not in ("pen", "cable"):
        h, w = w, h
    cover = _coverage(kind, h, w, rng)
    alpha8 = np.rint(cover * 255).astype(np.uint8)
    base = np.clip(np.asarray(_DOMAIN_COLOR[kind]) + rng.integers(-15, 16, 3), 0, 255)
    color = _shade(h, w, base, rng, 0.35)
    if kind == "smartphone":
        color[1:-1, 1:-1] *= 0.6
    elif kind == "notepad":
        color[2::3, 1:-1] *= 0.85
    elif kind == "ic_card":
        color[h // 3:h // 3 + 2, 1:-1] = (200, 170, 60)
    color += rng.normal(0, 3, color.shape)
    return np.clip(np.rint(color), 0, 255).astype(np.uint8), alpha8


def generic_priors(instances_per_class=1, rng_seed=0, cluttered_fraction=0.5):
    """COCO-like generic priors, ``instances_per_class`` per class."""
    rng = np.random.default_rng(rng_seed)
    out = []
    for kind in GENERIC_CLASSES:
        for i in range(instances_per_class):
            cluttered = bool(rng.random() < cluttered_fraction)
            color, alpha8 = generic_sprite(kind, rng, cluttered)
            out.append(make_prior(color, alpha8, GENERIC, 0, label=kind,
                                  meta={"cluttered": cluttered, "instance": i}))
    return out


def group_priors(group, instances_per_class=2, rng_seed=0):
    """Domain objects of ``group`` ('group1' or 'group2') tagged with the group."""
    rng = np.random.default_rng(rng_seed)
    out = []
    for kind in GROUPS[group]:
        for i in range(instances_per_class):
            color, alpha8 = domain_sprite(kind, rng)
            out.append(make_prior(color, alpha8, GENERIC, 0, group_tag=group, label=kind,
                                  meta={"instance": i}))
    return out
