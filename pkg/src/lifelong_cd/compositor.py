"""Copy-paste synthesis of change-detection training pairs.

A training pair is a background frame (reference) and the same frame with one
or more object sprites alpha-composited on top (live). The change mask is the
nearest-neighbour-resampled sprite alpha thresholded at ``alpha_threshold``.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import imaging
from .errors import (
    DegenerateScaleError,
    EmptyKnowledgeBaseError,
    InvalidInputError,
    OutOfBoundsError,
)

GENERIC = "generic"
DETECTED = "detected"
SYNTHETIC = "synthetic"
HARVESTED = "harvested"

ALPHA_THRESHOLD = 0.5
# consecutive empty composites before synthesis gives up
MAX_BARREN_DRAWS = 1000


@dataclass(eq=False)
class ObjectPrior:
    """An object sprite with 8-bit alpha and provenance.

    ``sprite`` is (h, w, 3) uint8 and ``alpha8`` is (h, w) uint8; use
    :func:`make_prior` to get a validated, tightly cropped, content-addressed prior.
    """

    id: str
    sprite: np.ndarray
    alpha8: np.ndarray
    provenance: str = GENERIC
    source_generation: int = 0
    group_tag: Optional[str] = None
    label: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def alpha(self):
        return self.alpha8.astype(np.float64) / 255.0

    @property
    def area_px(self):
        return int(np.count_nonzero(self.alpha8))

    @property
    def shape(self):
        return self.alpha8.shape


def make_prior(sprite, alpha8, provenance=GENERIC, source_generation=0, group_tag=None,
               label="", meta=None):
    sprite = np.asarray(sprite, dtype=np.uint8)
    alpha8 = np.asarray(alpha8, dtype=np.uint8)
    if sprite.shape[:2] != alpha8.shape or sprite.ndim != 3:
        raise InvalidInputError("sprite and alpha must share (h, w) and sprite must be RGB")
    if provenance not in (GENERIC, DETECTED):
        raise InvalidInputError(f"unknown provenance {provenance!r}")
    box = imaging.tight_bbox(alpha8)
    if box is None:
        raise DegenerateScaleError("prior has an empty alpha footprint")
    x, y, w, h = box
    sprite = np.ascontiguousarray(sprite[y:y + h, x:x + w])
    alpha8 = np.ascontiguousarray(alpha8[y:y + h, x:x + w])
    return ObjectPrior(
        id=imaging.content_hash(sprite, alpha8),
        sprite=sprite,
        alpha8=alpha8,
        provenance=provenance,
        source_generation=int(source_generation),
        group_tag=group_tag,
        label=label,
        meta=dict(meta or {}),
    )


@dataclass(eq=False)
class SamplePair:
    reference: np.ndarray
    live: np.ndarray
    mask: np.ndarray
    origin: str = SYNTHETIC
    generation: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def id(self):
        return imaging.content_hash(self.reference, self.live, self.mask)


def footprint(prior, scale, threshold=ALPHA_THRESHOLD):
    """Scaled color, scaled 8-bit alpha and binary mask for ``prior`` at ``scale``."""
    if scale <= 0:
        raise DegenerateScaleError(f"scale must be positive, got {scale}")
    color, alpha8 = imaging.scale_sprite(prior.sprite, prior.alpha8, scale)
    if alpha8 is None:
        raise DegenerateScaleError(f"sprite {prior.id} collapses to 0 px at scale {scale}")
    mask = (alpha8.astype(np.float64) / 255.0 > threshold).astype(np.uint8)
    if not mask.any():
        raise DegenerateScaleError(f"sprite {prior.id} has no alpha above {threshold} at scale {scale}")
    return color, alpha8, mask


def _paste_into(live, mask, prior, position, scale, threshold):
    color, alpha8, m = footprint(prior, scale, threshold)
    x, y = position
    h, w = m.shape
    H, W = live.shape[:2]
    if x < 0 or y < 0 or x + w > W or y + h > H:
        raise OutOfBoundsError(f"{w}x{h} sprite at ({x}, {y}) exceeds {W}x{H} background")
    imaging.alpha_over(live, color, alpha8, x, y)
    mask[y:y + h, x:x + w] |= m
    return m


def paste_object(background, prior, position, scale=1.0, alpha_threshold=ALPHA_THRESHOLD):
    """Paste one prior onto ``background`` and return the synthetic pair."""
    background = np.asarray(background, dtype=np.uint8)
    live = background.copy()
    mask = np.zeros(background.shape[:2], dtype=np.uint8)
    _paste_into(live, mask, prior, position, scale, alpha_threshold)
    return SamplePair(
        reference=background.copy(),
        live=live,
        mask=mask,
        origin=SYNTHETIC,
        meta={"objects": [{"prior_id": prior.id, "position": [int(position[0]), int(position[1])],
                           "scale": float(scale)}]},
    )


def _random_paste(rng, live, mask, prior, scale_range, threshold):
    lo, hi = scale_range
    H, W = live.shape[:2]
    for _ in range(100):
        scale = float(rng.uniform(lo, hi))
        h, w = imaging.scaled_size(prior.shape, scale)
        if h < 1 or w < 1 or h > H or w > W:
            continue
        x = int(rng.integers(0, W - w + 1))
        y = int(rng.integers(0, H - h + 1))
        try:
            _paste_into(live, mask, prior, (x, y), scale, threshold)
        except DegenerateScaleError:
            continue
        return {"prior_id": prior.id, "position": [x, y], "scale": scale}
    return None


def synthesize_dataset(backgrounds, priors, n_samples, objects_per_image=(1, 3),
                       scale_range=(0.5, 1.5), rng_seed=0, generation=0,
                       alpha_threshold=ALPHA_THRESHOLD):
    """Build ``n_samples`` synthetic pairs by pasting random priors onto random backgrounds."""
    if not priors:
        raise EmptyKnowledgeBaseError("no object priors to synthesize from")
    if not backgrounds:
        raise EmptyKnowledgeBaseError("no background frames to synthesize on")
    kmin, kmax = objects_per_image
    if kmin < 1 or kmax < kmin:
        raise InvalidInputError(f"bad objects_per_image {objects_per_image}")
    rng = np.random.default_rng(rng_seed)
    out = []
    barren = 0
    while len(out) < n_samples:
        bg_idx = int(rng.integers(len(backgrounds)))
        bg = np.asarray(backgrounds[bg_idx], dtype=np.uint8)
        live = bg.copy()
        mask = np.zeros(bg.shape[:2], dtype=np.uint8)
        objects = []
        for _ in range(int(rng.integers(kmin, kmax + 1))):
            prior = priors[int(rng.integers(len(priors)))]
            placed = _random_paste(rng, live, mask, prior, scale_range, alpha_threshold)
            if placed is not None:
                objects.append(placed)
        if not mask.any():
            barren += 1
            if barren > MAX_BARREN_DRAWS:
                raise DegenerateScaleError(
                    f"{barren} consecutive draws produced an empty mask; priors do not fit the backgrounds")
            continue
        barren = 0
        out.append(SamplePair(reference=bg.copy(), live=live, mask=mask, origin=SYNTHETIC,
                              generation=generation,
                              meta={"background": bg_idx, "objects": objects}))
    return out


def mix_generations(gen0, harvested, ratio=0.5, n_out=None, rng_seed=0):
    """Shuffled training list whose expected harvested fraction is ``ratio``.

    Each slot is drawn from the harvested pool with probability ``ratio`` and
    from ``gen0`` otherwise, uniformly with replacement. An empty pool forces
    every slot into the other one.
    """
    if not 0.0 <= ratio <= 1.0:
        raise InvalidInputError(f"ratio must lie in [0, 1], got {ratio}")
    if not gen0 and not harvested:
        raise EmptyKnowledgeBaseError("nothing to mix")
    if n_out is None:
        n_out = len(gen0) + len(harvested)
    if not harvested:
        ratio = 0.0
    elif not gen0:
        ratio = 1.0
    rng = np.random.default_rng(rng_seed)
    from_harvest = rng.random(n_out) < ratio
    out = []
    for h in from_harvest:
        pool = harvested if h else gen0
        out.append(pool[int(rng.integers(len(pool)))])
    return out


def save_samples(directory, samples, extra=None):
    """Write ``NNNN_{ref,live,mask}.png`` triples plus ``samples.json``."""
    directory = Path(directory)
    entries = []
    for i, s in enumerate(samples):
        stem = f"{i:04d}"
        imaging.write_png(directory / f"{stem}_ref.png", s.reference)
        imaging.write_png(directory / f"{stem}_live.png", s.live)
        imaging.write_png(directory / f"{stem}_mask.png", s.mask, mask=True)
        entries.append({"index": i, "id": s.id, "origin": s.origin,
                        "generation": s.generation, **s.meta})
    doc = {"samples": entries, **(extra or {})}
    imaging.atomic_write_text(directory / "samples.json", json.dumps(doc, indent=1, sort_keys=True))


def load_samples(directory):
    directory = Path(directory)
    doc = json.loads((directory / "samples.json").read_text())
    out = []
    for e in doc["samples"]:
        stem = f"{e['index']:04d}"
        meta = {k: v for k, v in e.items() if k not in ("index", "id", "origin", "generation")}
        out.append(SamplePair(
            reference=imaging.read_png(directory / f"{stem}_ref.png"),
            live=imaging.read_png(directory / f"{stem}_live.png"),
            mask=imaging.read_png(directory / f"{stem}_mask.png", mask=True),
            origin=e["origin"], generation=e["generation"], meta=meta))
    return out
