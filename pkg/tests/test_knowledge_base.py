import numpy as np
import pytest

from conftest import disc_prior, opaque_square
from lifelong_cd import sprites
from lifelong_cd.compositor import DETECTED, GENERIC, HARVESTED, SamplePair, make_prior
from lifelong_cd.errors import (
    EmptyKnowledgeBaseError,
    LifecycleOrderError,
    ProvenanceError,
)
from lifelong_cd.knowledge_base import (
    DUPLICATE,
    EMPTY_MASK,
    MALFORMED_BBOX,
    TOO_SMALL,
    Detection,
    KnowledgeBase,
)


def detection(mask, frame="f0", x=0, y=0, score=0.9, color=None):
    mask = np.asarray(mask, dtype=np.uint8)
    h, w = mask.shape
    if color is None:
        color = np.full((h, w, 3), 100, np.uint8)
        color[..., 0] = np.arange(w, dtype=np.uint8)[None, :] * 7 + x
    return Detection(frame, mask, color, (x, y, w, h), int(mask.sum()), score)


@pytest.fixture
def kb():
    store = KnowledgeBase(clock=lambda: 0.0)
    store.add_backgrounds([np.zeros((8, 8, 3), np.uint8)])
    store.init_with_generic(sprites.generic_priors(1, 0))
    return store


def test_nine_generic_classes_make_generation_zero():
    store = KnowledgeBase()
    rec = store.init_with_generic(sprites.generic_priors(1, 0))
    assert rec.index == 0
    assert len(rec.prior_ids) == 9
    assert {store.priors[p].label for p in rec.prior_ids} == set(sprites.GENERIC_CLASSES)


def test_init_errors():
    with pytest.raises(EmptyKnowledgeBaseError):
        KnowledgeBase().init_with_generic([])
    det = make_prior(np.zeros((2, 2, 3), np.uint8), np.full((2, 2), 255, np.uint8), DETECTED, 1)
    with pytest.raises(ProvenanceError):
        KnowledgeBase().init_with_generic([disc_prior(), det])


def test_ingest_reason_codes(kb):
    empty = detection(np.zeros((3, 3)))
    single = detection(np.ones((1, 1)), x=5)
    loose = detection(np.pad(np.ones((2, 2)), 1), x=9)
    accepted, rejected = kb.ingest_detections([empty, single, loose])
    assert len(accepted) == 1 and accepted[0].area_px == 1
    assert accepted[0].provenance == DETECTED
    assert accepted[0].source_generation == 1
    assert dict((id(d), r) for d, r in rejected) == {id(empty): EMPTY_MASK, id(loose): MALFORMED_BBOX}


def test_ingest_min_area_option(kb):
    accepted, rejected = kb.ingest_detections([detection(np.ones((1, 2)))], min_area_px=3)
    assert not accepted and rejected[0][1] == TOO_SMALL


def test_ingest_deduplicates_same_frame(kb):
    a = detection(np.ones((4, 4)), score=0.5)
    b = detection(np.ones((4, 4)), score=0.8, color=np.full((4, 4, 3), 7, np.uint8))
    c = detection(np.ones((4, 4)), frame="f1", score=0.1)
    accepted, rejected = kb.ingest_detections([a, b, c])
    assert len(accepted) == 2
    assert {p.meta["score"] for p in accepted} == {0.8, 0.1}
    assert rejected == [(a, DUPLICATE)]


def test_snapshots_are_append_only_and_immutable(kb):
    before = kb.generations[0]
    frozen = before.to_json()
    dets = [detection(np.ones((2, 2)), x=i * 3) for i in range(4)]
    kb.ingest_detections(dets)
    rec = kb.snapshot_generation()
    assert rec.index == 1 and rec.parent_index == 0
    detected = [p for p in rec.prior_ids if kb.priors[p].provenance == DETECTED]
    assert len(detected) == 4
    assert set(before.prior_ids) <= set(rec.prior_ids)
    assert before.to_json() == frozen
    with pytest.raises(LifecycleOrderError):
        kb.snapshot_generation()
    assert kb.snapshot_generation(force=True).index == 2
    with pytest.raises(AttributeError):
        rec.index = 5


def test_remove_generic_priors(kb):
    kb.ingest_detections([detection(np.ones((2, 2)))])
    generic = [p for p in kb.generations[0].prior_ids]
    kb.remove_generic_priors(generic[:3])
    kb.remove_generic_priors(generic[:1])
    rec = kb.snapshot_generation()
    kinds = [kb.priors[p].provenance for p in rec.prior_ids]
    assert kinds.count(GENERIC) == 6 and kinds.count(DETECTED) == 1
    detected = [p for p in rec.prior_ids if kb.priors[p].provenance == DETECTED]
    with pytest.raises(ProvenanceError):
        kb.remove_generic_priors(detected)


def test_generic_set_never_grows(kb):
    counts = []
    for g in range(3):
        kb.ingest_detections([detection(np.ones((2, 3)), x=g)])
        rec = kb.snapshot_generation()
        counts.append(sum(kb.priors[p].provenance == GENERIC for p in rec.prior_ids))
        ids = [p for p in rec.prior_ids if kb.priors[p].provenance == GENERIC]
        kb.remove_generic_priors(ids[:1])
    assert counts == sorted(counts, reverse=True)
    for rec in kb.generations:
        for p in kb.priors_of(rec):
            assert p.area_px >= kb.min_area_px


def test_ingest_fuzz_minimum_one_pixel(kb):
    rng = np.random.default_rng(0)
    dets, areas = [], []
    for i in range(300):
        h, w = rng.integers(1, 6, 2)
        mask = np.zeros((h, w), np.uint8)
        if rng.random() > 0.2:
            mask[0, 0] = mask[-1, -1] = mask[0, -1] = mask[-1, 0] = 1
            mask[rng.random((h, w)) < 0.4] = 1
        dets.append(detection(mask, frame=f"f{i}", color=rng.integers(0, 256, (h, w, 3)).astype(np.uint8)))
        areas.append(int(mask.sum()))
    accepted, rejected = kb.ingest_detections(dets)
    reasons = {id(d): r for d, r in rejected}
    for d, a in zip(dets, areas):
        assert (id(d) not in reasons or reasons[id(d)] == DUPLICATE) == (a >= 1)


def test_store_round_trip(tmp_path, kb):
    kb.ingest_detections([detection(np.ones((2, 2)))])
    bg = np.zeros((8, 8, 3), np.uint8)
    kb.add_samples([SamplePair(bg, bg + 1, np.eye(8, dtype=np.uint8), HARVESTED, 1, {"frame_id": "f0"})])
    kb.snapshot_generation()
    kb.save(tmp_path / "kb")
    back = KnowledgeBase.load(tmp_path / "kb")
    assert [r.to_json() for r in back.generations] == [r.to_json() for r in kb.generations]
    assert back.priors.keys() == kb.priors.keys()
    for pid, p in kb.priors.items():
        assert back.priors[pid].sprite.tobytes() == p.sprite.tobytes()
        assert back.priors[pid].alpha8.tobytes() == p.alpha8.tobytes()
    back.save(tmp_path / "kb2")
    for f in (tmp_path / "kb").rglob("*"):
        if f.is_file():
            assert (tmp_path / "kb2" / f.relative_to(tmp_path / "kb")).read_bytes() == f.read_bytes()
    with pytest.raises(ProvenanceError):
        kb.add_samples([SamplePair(bg, bg, bg[..., 0])])


def test_reingest_same_crop_is_idempotent(kb):
    d = detection(np.ones((3, 3)))
    first, _ = kb.ingest_detections([d])
    second, rejected = kb.ingest_detections([detection(np.ones((3, 3)), frame="other")])
    assert len(first) == 1 and not second and rejected[0][1] == DUPLICATE
    assert opaque_square().provenance == GENERIC
