"""Generational store of object priors, background frames and harvested samples."""
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import imaging
from .compositor import DETECTED, GENERIC, HARVESTED, ObjectPrior, SamplePair, make_prior
from .errors import (
    EmptyKnowledgeBaseError,
    InvalidInputError,
    LifecycleOrderError,
    NotFoundError,
    ProvenanceError,
)

log = logging.getLogger(__name__)

EMPTY_MASK = "empty_mask"
TOO_SMALL = "too_small"
MALFORMED_BBOX = "malformed_bbox"
DUPLICATE = "duplicate"

DEDUP_IOU = 0.9


@dataclass(eq=False)
class Detection:
    frame_id: str
    mask_crop: np.ndarray
    color_crop: np.ndarray
    bbox: tuple
    area_px: int
    score: float = 1.0


@dataclass(frozen=True)
class GenerationRecord:
    index: int
    prior_ids: tuple
    background_ids: tuple
    sample_ids: tuple
    parent_index: Optional[int]
    created_at: float

    def to_json(self):
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(index=d["index"], prior_ids=tuple(d["prior_ids"]),
                   background_ids=tuple(d["background_ids"]), sample_ids=tuple(d["sample_ids"]),
                   parent_index=d["parent_index"], created_at=d["created_at"])


def bbox_iou(a, b):
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union else 0.0


def check_detection(det, min_area_px=1):
    """Reason code for rejecting ``det``, or None when it is acceptable."""
    mask = np.asarray(det.mask_crop)
    count = int(np.count_nonzero(mask))
    if count == 0:
        return EMPTY_MASK
    if count < min_area_px:
        return TOO_SMALL
    x, y, w, h = det.bbox
    if w < 1 or h < 1 or mask.shape != (h, w) or np.asarray(det.color_crop).shape[:2] != (h, w):
        return MALFORMED_BBOX
    if imaging.tight_bbox(mask) != (0, 0, w, h) or det.area_px != count:
        return MALFORMED_BBOX
    return None


class KnowledgeBase:
    """Single-writer store; snapshots are immutable ``GenerationRecord`` values."""

    def __init__(self, min_area_px=1, clock=time.time):
        if min_area_px < 1:
            raise InvalidInputError("min_area_px must be >= 1")
        self.min_area_px = int(min_area_px)
        self.priors = {}
        self.backgrounds = {}
        self.samples = {}
        self.removed_generic = set()
        self.generations = []
        self._dirty = False
        self._clock = clock

    @property
    def current_index(self):
        return self.generations[-1].index if self.generations else -1

    @property
    def is_empty(self):
        return not self.generations and not self.priors

    def add_backgrounds(self, frames):
        ids = []
        for f in frames:
            f = np.asarray(f, dtype=np.uint8)
            bid = imaging.content_hash(f)
            if bid not in self.backgrounds:
                self.backgrounds[bid] = f
                self._dirty = True
            ids.append(bid)
        return ids

    def add_samples(self, samples):
        ids = []
        for s in samples:
            if s.origin != HARVESTED:
                raise ProvenanceError("only harvested scene samples are stored")
            sid = s.id
            if sid not in self.samples:
                self.samples[sid] = s
                self._dirty = True
            ids.append(sid)
        return ids

    def init_with_generic(self, priors):
        if self.generations:
            raise LifecycleOrderError("knowledge base already initialised")
        if not priors:
            raise EmptyKnowledgeBaseError("generation 0 needs at least one generic prior")
        bad = [p.id for p in priors if p.provenance != GENERIC]
        if bad:
            raise ProvenanceError(f"non-generic priors offered to generation 0: {bad}")
        for p in priors:
            if p.area_px < self.min_area_px:
                raise InvalidInputError(f"prior {p.id} smaller than {self.min_area_px} px")
            self.priors[p.id] = p
        self._dirty = True
        return self.snapshot_generation()

    def ingest_detections(self, dets, min_area_px=None):
        """Turn acceptable detections into detected priors for the next generation."""
        if not self.generations:
            raise LifecycleOrderError("ingest requires an initialised knowledge base")
        min_area = self.min_area_px if min_area_px is None else int(min_area_px)
        if min_area < 1:
            raise InvalidInputError("min_area_px must be >= 1")
        accepted, rejected = [], []
        kept = []
        for det in dets:
            reason = check_detection(det, min_area)
            if reason:
                rejected.append((det, reason))
                continue
            dup = next((k for k in kept if k.frame_id == det.frame_id
                        and bbox_iou(k.bbox, det.bbox) > DEDUP_IOU), None)
            if dup is not None:
                if det.score > dup.score:
                    kept[kept.index(dup)] = det
                    rejected.append((dup, DUPLICATE))
                else:
                    rejected.append((det, DUPLICATE))
                continue
            kept.append(det)
        gen = self.current_index + 1
        for det in kept:
            prior = make_prior(det.color_crop, (np.asarray(det.mask_crop) > 0).astype(np.uint8) * 255,
                               DETECTED, gen,
                               meta={"frame_id": det.frame_id, "bbox": list(map(int, det.bbox)),
                                     "score": float(det.score)})
            if prior.id in self.priors:
                rejected.append((det, DUPLICATE))
                continue
            self.priors[prior.id] = prior
            accepted.append(prior)
            self._dirty = True
        return accepted, rejected

    def remove_generic_priors(self, ids):
        for pid in ids:
            if pid not in self.priors:
                raise NotFoundError(f"unknown prior {pid}")
            if self.priors[pid].provenance != GENERIC:
                raise ProvenanceError(f"prior {pid} is not generic")
        for pid in ids:
            if pid not in self.removed_generic:
                self.removed_generic.add(pid)
                self._dirty = True

    def active_prior_ids(self):
        gen = sorted(pid for pid, p in self.priors.items()
                     if p.provenance == GENERIC and pid not in self.removed_generic)
        det = sorted((p.source_generation, pid) for pid, p in self.priors.items()
                     if p.provenance == DETECTED)
        return gen + [pid for _, pid in det]

    def snapshot_generation(self, force=False):
        if not self._dirty and not force:
            raise LifecycleOrderError("no mutation since the previous snapshot")
        parent = self.generations[-1].index if self.generations else None
        rec = GenerationRecord(
            index=self.current_index + 1,
            prior_ids=tuple(self.active_prior_ids()),
            background_ids=tuple(sorted(self.backgrounds)),
            sample_ids=tuple(sorted(self.samples)),
            parent_index=parent,
            created_at=float(self._clock()),
        )
        self.generations.append(rec)
        self._dirty = False
        return rec

    def generation(self, index):
        for rec in self.generations:
            if rec.index == index:
                return rec
        raise NotFoundError(f"no generation {index}")

    def priors_of(self, rec, provenance=None):
        out = [self.priors[pid] for pid in rec.prior_ids]
        return [p for p in out if provenance is None or p.provenance == provenance]

    def backgrounds_of(self, rec):
        return [self.backgrounds[b] for b in rec.background_ids]

    def samples_of(self, rec):
        return [self.samples[s] for s in rec.sample_ids]

    # persistence -----------------------------------------------------------

    def save(self, root):
        root = Path(root)
        for pid, p in self.priors.items():
            d = root / "priors" / pid
            if not (d / "meta.json").exists():
                imaging.write_png(d / "sprite.png", p.sprite)
                imaging.write_png(d / "alpha.png", p.alpha8)
                meta = {"id": p.id, "provenance": p.provenance, "source_generation": p.source_generation,
                        "group_tag": p.group_tag, "label": p.label, "area_px": p.area_px, "meta": p.meta}
                imaging.atomic_write_text(d / "meta.json", json.dumps(meta, indent=1, sort_keys=True))
        for bid, f in self.backgrounds.items():
            if not (root / "backgrounds" / f"{bid}.png").exists():
                imaging.write_png(root / "backgrounds" / f"{bid}.png", f)
        for sid, s in self.samples.items():
            d = root / "samples" / sid
            if not (d / "meta.json").exists():
                imaging.write_png(d / "ref.png", s.reference)
                imaging.write_png(d / "live.png", s.live)
                imaging.write_png(d / "mask.png", s.mask, mask=True)
                imaging.atomic_write_text(d / "meta.json", json.dumps(
                    {"origin": s.origin, "generation": s.generation, "meta": s.meta}, sort_keys=True))
        for rec in self.generations:
            path = root / "generations" / f"{rec.index}.json"
            if not path.exists():
                imaging.atomic_write_text(path, rec.to_json())
        state = {"min_area_px": self.min_area_px, "removed_generic": sorted(self.removed_generic)}
        imaging.atomic_write_text(root / "state.json", json.dumps(state, indent=1, sort_keys=True))

    @classmethod
    def load(cls, root):
        root = Path(root)
        state = json.loads((root / "state.json").read_text())
        kb = cls(min_area_px=state["min_area_px"])
        kb.removed_generic = set(state["removed_generic"])
        for d in sorted((root / "priors").glob("*")) if (root / "priors").exists() else []:
            meta = json.loads((d / "meta.json").read_text())
            kb.priors[meta["id"]] = ObjectPrior(
                id=meta["id"], sprite=imaging.read_png(d / "sprite.png"),
                alpha8=imaging.read_png(d / "alpha.png"), provenance=meta["provenance"],
                source_generation=meta["source_generation"], group_tag=meta["group_tag"],
                label=meta["label"], meta=meta["meta"])
        for f in sorted((root / "backgrounds").glob("*.png")) if (root / "backgrounds").exists() else []:
            kb.backgrounds[f.stem] = imaging.read_png(f)
        for d in sorted((root / "samples").glob("*")) if (root / "samples").exists() else []:
            meta = json.loads((d / "meta.json").read_text())
            kb.samples[d.name] = SamplePair(
                reference=imaging.read_png(d / "ref.png"), live=imaging.read_png(d / "live.png"),
                mask=imaging.read_png(d / "mask.png", mask=True), origin=meta["origin"],
                generation=meta["generation"], meta=meta["meta"])
        gens = sorted((root / "generations").glob("*.json"), key=lambda p: int(p.stem))
        kb.generations = [GenerationRecord.from_json(p.read_text()) for p in gens]
        kb._dirty = False
        return kb
