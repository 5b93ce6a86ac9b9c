"""Procedural workspaces and repeatable camera traversals.

A workspace is a wide canvas; the camera is a fixed-size window sliding
horizontally through a list of subgoal offsets, so reference and live passes
over the same traversal see exactly the same viewpoints. Objects are planted
on the canvas inside the floor band.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import imaging
from .compositor import footprint
from .errors import InvalidConfigError, InvalidInputError, NotFoundError, PlacementCapacityError

STYLES = ("shelf_grid", "table_blobs", "sofa_stripes", "corridor_plain")
STYLE_CODES = {"shelf_grid": "CS", "table_blobs": "CR", "sofa_stripes": "LR", "corridor_plain": "COR"}

MAX_PLACEMENT_RETRIES = 1000
MIN_CANVAS = 64
# ground truth counts every pixel a sprite touches (alpha > 0)
VISIBLE = 0.0


@dataclass(eq=False)
class Workspace:
    id: str
    style: str
    seed: int
    canvas: np.ndarray
    floor_band: tuple

    @property
    def size(self):
        return self.canvas.shape[:2]


@dataclass
class Traversal:
    workspace_id: str
    subgoals: list
    frame_size: tuple
    frames_per_segment: int = 8

    def __post_init__(self):
        if len(self.subgoals) < 2:
            raise InvalidConfigError("a traversal needs at least two subgoals")
        if self.frames_per_segment < 1:
            raise InvalidConfigError("frames_per_segment must be >= 1")

    def offsets(self):
        """Horizontal canvas offset of every frame, subgoals joined by straight segments."""
        out = []
        for a, b in zip(self.subgoals[:-1], self.subgoals[1:]):
            for k in range(self.frames_per_segment):
                out.append(int(round(a + (b - a) * k / self.frames_per_segment)))
        out.append(int(self.subgoals[-1]))
        return out


@dataclass(frozen=True)
class Placement:
    prior_id: str
    canvas_position: tuple
    scale: float
    group_tag: str = None


@dataclass(eq=False)
class TraversalCapture:
    reference: list
    live: list
    masks: list
    jitter_magnitude: int = 0
    shifts: list = field(default_factory=list)
    offsets: list = field(default_factory=list)

    def __len__(self):
        return len(self.reference)

    def __iter__(self):
        return iter(zip(self.reference, self.live, self.masks))


def _smooth_noise(rng, shape, cells):
    """Bilinearly upsampled uniform noise with roughly ``cells`` control points per axis."""
    h, w = shape
    ch = max(2, int(cells[0]))
    cw = max(2, int(cells[1]))
    coarse = rng.random((ch, cw))
    return imaging.resize_bilinear(coarse, (h, w))


def _texture(style, rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    base = np.empty((h, w, 3))
    horizon = int(h * 0.45)
    palettes = {
        "shelf_grid": ((205, 205, 200), (150, 150, 150)),
        "table_blobs": ((185, 180, 165), (120, 110, 95)),
        "sofa_stripes": ((200, 185, 160), (140, 95, 70)),
        "corridor_plain": ((215, 215, 210), (165, 165, 160)),
    }
    wall, floor = (np.asarray(c, dtype=np.float64) for c in palettes[style])
    base[:horizon] = wall
    base[horizon:] = floor
    shade = _smooth_noise(rng, (h, w), (4, w // 96)) - 0.5
    base += 25.0 * shade[..., None]

    if style == "shelf_grid":
        # wall of shelves with product boxes, tiled floor
        shelf_h = max(6, horizon // 4)
        x = 0
        while x < w:
            bw = int(rng.integers(4, 14))
            for r in range(0, horizon - 2, shelf_h):
                bh = int(rng.integers(shelf_h // 2, shelf_h - 1))
                base[r + shelf_h - bh:r + shelf_h - 1, x:x + bw - 1] = rng.integers(20, 240, 3)
            x += bw
        base[horizon:][(yy[horizon:] - horizon) % 12 < 1] -= 40
        base[horizon:][xx[horizon:] % 16 < 1] -= 40
    elif style == "table_blobs":
        for _ in range(max(2, w // 120)):
            cx, cy = rng.uniform(0, w), rng.uniform(horizon * 0.3, horizon * 1.1)
            rx, ry = rng.uniform(20, 60), rng.uniform(6, 14)
            m = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1
            base[m] = rng.integers(70, 200, 3)
        # carpet speckle in patches
        patch = _smooth_noise(rng, (h, w), (3, w // 64)) > 0.55
        speck = rng.normal(0, 22, (h, w))
        base[horizon:] += (speck * patch)[horizon:, :, None]
    elif style == "sofa_stripes":
        period = int(rng.integers(5, 9))
        stripes = ((xx + 3 * np.sin(yy / 5.0)) % period) < period / 2
        base[:horizon][stripes[:horizon]] -= 45
        rug = _smooth_noise(rng, (h, w), (2, w // 160)) > 0.5
        checker = ((xx // 4 + yy // 4) % 2 == 0) & rug
        base[horizon:][checker[horizon:]] += 35
    elif style == "corridor_plain":
        for x0 in range(int(rng.integers(30, 90)), w, int(rng.integers(120, 200))):
            base[:horizon, x0:x0 + 20] = rng.integers(90, 160, 3)
            base[:horizon, x0:x0 + 1] -= 50
        base[horizon:horizon + 1] -= 50
    else:
        raise InvalidConfigError(f"unknown style {style!r}")
    base += rng.normal(0, 2.0, base.shape)
    return np.clip(np.rint(base), 0, 255).astype(np.uint8), (horizon, h)


def generate_workspace(seed, style="corridor_plain", size=(512, 2048), workspace_id=None):
    """Deterministic procedural canvas for (seed, style, size)."""
    h, w = size
    if h < MIN_CANVAS or w < MIN_CANVAS:
        raise InvalidConfigError(f"workspace size {size} below the {MIN_CANVAS}x{MIN_CANVAS} minimum")
    if style not in STYLES:
        raise InvalidConfigError(f"unknown style {style!r}; expected one of {STYLES}")
    rng = np.random.default_rng([int(seed), STYLES.index(style)])
    canvas, band = _texture(style, rng, h, w)
    wid = workspace_id or f"{STYLE_CODES[style]}-s{seed}"
    return Workspace(id=wid, style=style, seed=int(seed), canvas=canvas, floor_band=band)


def texture_energy(image, window=9):
    """Local standard deviation of luma, a proxy for texture strength."""
    g = imaging.to_gray(image)
    mean = ndimage.uniform_filter(g, window)
    sq = ndimage.uniform_filter(g * g, window)
    return np.sqrt(np.maximum(sq - mean * mean, 0))


def make_traversal(ws, frame_size, n_subgoals=3, frames_per_segment=8, rng_seed=0):
    """Traversal across the workspace with evenly spread, seed-jittered subgoals."""
    fh, fw = frame_size
    H, W = ws.size
    if fh > H or fw > W:
        raise InvalidConfigError(f"frame {frame_size} larger than workspace {ws.size}")
    rng = np.random.default_rng(rng_seed)
    span = W - fw
    anchors = np.linspace(0, span, n_subgoals)
    wiggle = span / max(4 * (n_subgoals - 1), 1)
    goals = [int(np.clip(a + rng.uniform(-wiggle, wiggle), 0, span)) for a in anchors]
    goals[0], goals[-1] = 0, span
    return Traversal(workspace_id=ws.id, subgoals=goals, frame_size=(fh, fw),
                     frames_per_segment=frames_per_segment)


def _bbox_overlap(a, b):
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return ax < bx + bw and bx < ax + aw and ay < by + bh and by < ay + ah


def plant_objects(ws, priors, n, scale_range=(0.6, 1.2), rng_seed=0, group_tag=None):
    """Place ``n`` priors inside the floor band with pairwise-disjoint bounding boxes."""
    if n < 0:
        raise InvalidInputError("n must be >= 0")
    lo, hi = scale_range
    if lo <= 0 or hi < lo:
        raise InvalidInputError(f"bad scale_range {scale_range}")
    if n == 0:
        return []
    if not priors:
        raise InvalidInputError("no priors to plant")
    for p in priors:
        if p.area_px < 1:
            raise InvalidInputError(f"prior {p.id} has an empty alpha footprint")
    rng = np.random.default_rng(rng_seed)
    H, W = ws.size
    y0, y1 = ws.floor_band
    placed, boxes = [], []
    for _ in range(n):
        for _attempt in range(MAX_PLACEMENT_RETRIES):
            prior = priors[int(rng.integers(len(priors)))]
            scale = float(rng.uniform(lo, hi))
            h, w = imaging.scaled_size(prior.shape, scale)
            if h < 1 or w < 1 or h > y1 - y0 or w > W:
                continue
            x = int(rng.integers(0, W - w + 1))
            y = int(rng.integers(y0, y1 - h + 1))
            box = (x, y, w, h)
            if any(_bbox_overlap(box, b) for b in boxes):
                continue
            if not footprint(prior, scale, VISIBLE)[2].any():
                continue
            boxes.append(box)
            placed.append(Placement(prior.id, (x, y), scale, group_tag or prior.group_tag))
            break
        else:
            raise PlacementCapacityError(n, len(placed))
    return placed


def _render_canvas(ws, placements, priors):
    canvas = ws.canvas.copy()
    masks = {}
    for pl in placements:
        if pl.prior_id not in priors:
            raise NotFoundError(f"unknown prior {pl.prior_id}")
        color, alpha8, m = footprint(priors[pl.prior_id], pl.scale, VISIBLE)
        x, y = pl.canvas_position
        h, w = m.shape
        if x < 0 or y < 0 or x + w > canvas.shape[1] or y + h > canvas.shape[0]:
            raise InvalidInputError(f"placement {pl} falls outside the canvas")
        imaging.alpha_over(canvas, color, alpha8, x, y)
        masks[pl] = (x, y, m)
    return canvas, masks


def change_mask(ws, placements_reference, placements_live, priors):
    """Canvas-level footprint of objects present in exactly one of the two passes."""
    ref, live = set(placements_reference), set(placements_live)
    mask = np.zeros(ws.size, dtype=np.uint8)
    for pl in ref ^ live:
        _, _, m = footprint(priors[pl.prior_id], pl.scale, VISIBLE)
        x, y = pl.canvas_position
        mask[y:y + m.shape[0], x:x + m.shape[1]] |= m
    return mask


def shift_image(img, dx, dy, fill=None):
    """Translate by (dx, dy); vacated pixels replicate the edge, or take ``fill``."""
    if dx == 0 and dy == 0:
        return img.copy()
    h, w = img.shape[:2]
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    out = img[rows][:, cols]
    if fill is not None:
        valid_r = (np.arange(h) - dy >= 0) & (np.arange(h) - dy < h)
        valid_c = (np.arange(w) - dx >= 0) & (np.arange(w) - dx < w)
        out = out.copy()
        out[~valid_r] = fill
        out[:, ~valid_c] = fill
    return out


def render_traversal(ws, t, placements_reference, placements_live, priors, jitter=0,
                     brightness=0.0, rng_seed=0):
    """Render reference/live frame pairs and ground-truth change masks along ``t``.

    ``priors`` maps prior id to ObjectPrior for every placement. Live frames are
    scaled by a per-frame brightness factor in [1 - brightness, 1 + brightness]
    and shifted by a per-frame integer translation in [-jitter, jitter]^2 with
    edge replication; masks follow the same translation.
    """
    if isinstance(ws, dict):
        if t.workspace_id not in ws:
            raise NotFoundError(f"unknown workspace {t.workspace_id!r}")
        ws = ws[t.workspace_id]
    elif ws.id != t.workspace_id:
        raise NotFoundError(f"traversal targets workspace {t.workspace_id!r}, got {ws.id!r}")
    if jitter < 0:
        raise InvalidInputError("jitter must be >= 0")
    if not 0.0 <= brightness < 1.0:
        raise InvalidInputError("brightness must lie in [0, 1)")
    if not isinstance(priors, dict):
        priors = {p.id: p for p in priors}
    ref_canvas, _ = _render_canvas(ws, placements_reference, priors)
    live_canvas, _ = _render_canvas(ws, placements_live, priors)
    full_mask = change_mask(ws, placements_reference, placements_live, priors)

    rng = np.random.default_rng(rng_seed)
    fh, fw = t.frame_size
    H, W = ws.size
    if fh > H or fw > W:
        raise InvalidConfigError(f"frame {t.frame_size} larger than workspace {ws.size}")
    top = H - fh
    cap = TraversalCapture([], [], [], jitter_magnitude=int(jitter))
    for off in t.offsets():
        if off < 0 or off + fw > W:
            raise InvalidConfigError(f"subgoal offset {off} leaves the canvas")
        ref = ref_canvas[top:, off:off + fw].copy()
        live = live_canvas[top:, off:off + fw].copy()
        mask = full_mask[top:, off:off + fw].copy()
        dx = int(rng.integers(-jitter, jitter + 1)) if jitter else 0
        dy = int(rng.integers(-jitter, jitter + 1)) if jitter else 0
        gain = float(rng.uniform(1 - brightness, 1 + brightness)) if brightness else 1.0
        if gain != 1.0:
            live = np.clip(np.rint(live.astype(np.float64) * gain), 0, 255).astype(np.uint8)
        live = shift_image(live, dx, dy)
        mask = shift_image(mask, dx, dy, fill=0)
        cap.reference.append(ref)
        cap.live.append(live)
        cap.masks.append(mask)
        cap.shifts.append((dx, dy))
        cap.offsets.append(off)
    return cap


def save_workspace(run_dir, ws):
    imaging.write_png(Path(run_dir) / "workspaces" / ws.id / "canvas.png", ws.canvas)


def save_capture(run_dir, capture_id, cap):
    d = Path(run_dir) / "captures" / capture_id
    for i, (ref, live, mask) in enumerate(cap):
        imaging.write_png(d / f"{i:04d}_ref.png", ref)
        imaging.write_png(d / f"{i:04d}_live.png", live)
        imaging.write_png(d / f"{i:04d}_mask.png", mask, mask=True)


def load_capture(run_dir, capture_id, jitter=0):
    d = Path(run_dir) / "captures" / capture_id
    cap = TraversalCapture([], [], [], jitter_magnitude=jitter)
    i = 0
    while (d / f"{i:04d}_ref.png").exists():
        cap.reference.append(imaging.read_png(d / f"{i:04d}_ref.png"))
        cap.live.append(imaging.read_png(d / f"{i:04d}_live.png"))
        cap.masks.append(imaging.read_png(d / f"{i:04d}_mask.png", mask=True))
        i += 1
    if i == 0:
        raise NotFoundError(f"no capture frames under {d}")
    return cap


def placements_to_json(placements):
    return [{"prior_id": p.prior_id, "position": list(p.canvas_position), "scale": p.scale,
             "group_tag": p.group_tag} for p in placements]


def write_manifest(run_dir, entries):
    """``manifest.json`` listing seeds, placements, group tags and jitter per capture."""
    imaging.atomic_write_text(Path(run_dir) / "manifest.json",
                              json.dumps(entries, indent=1, sort_keys=True))
