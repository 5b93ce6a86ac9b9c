import numpy as np
import pytest
from scipy import ndimage

from conftest import disc_prior, nearest_oracle, opaque_square
from lifelong_cd import compositor, imaging
from lifelong_cd.compositor import ObjectPrior, SamplePair, make_prior
from lifelong_cd.errors import (
    DegenerateScaleError,
    EmptyKnowledgeBaseError,
    InvalidInputError,
    OutOfBoundsError,
)


def background(h=40, w=50, value=90):
    return np.full((h, w, 3), value, dtype=np.uint8)


def test_make_prior_crops_tight_and_hashes_content():
    alpha = np.zeros((8, 8), dtype=np.uint8)
    alpha[2:5, 3:7] = 255
    sprite = np.full((8, 8, 3), 10, dtype=np.uint8)
    p = make_prior(sprite, alpha)
    assert p.shape == (3, 4)
    assert p.area_px == 12
    assert p.id == make_prior(sprite, alpha).id
    with pytest.raises(DegenerateScaleError):
        make_prior(sprite, np.zeros((8, 8), dtype=np.uint8))


def test_transparent_sprite_is_degenerate():
    p = ObjectPrior("ghost", np.zeros((5, 5, 3), np.uint8), np.zeros((5, 5), np.uint8))
    with pytest.raises(DegenerateScaleError):
        compositor.paste_object(background(), p, (3, 3), 1.0)


def test_opaque_square_scale_one():
    bg = background()
    pair = compositor.paste_object(bg, opaque_square(10), (7, 11), 1.0)
    assert pair.mask.sum() == 100
    diff = np.any(pair.live != pair.reference, axis=2)
    assert diff.sum() == 100
    assert np.array_equal(diff, pair.mask.astype(bool))
    assert pair.origin == compositor.SYNTHETIC
    assert np.array_equal(pair.reference, bg)


def test_half_scale_matches_oracle_resampler():
    pair = compositor.paste_object(background(), opaque_square(10), (0, 0), 0.5)
    expected = nearest_oracle(np.full((10, 10), 255, np.uint8), 5, 5) / 255.0 > 0.5
    assert pair.mask.sum() == expected.sum() == 25


def test_out_of_bounds_and_bad_scale():
    with pytest.raises(OutOfBoundsError):
        compositor.paste_object(background(20, 20), opaque_square(10), (15, 0), 1.0)
    with pytest.raises(DegenerateScaleError):
        compositor.paste_object(background(), opaque_square(10), (0, 0), 0.01)
    with pytest.raises(DegenerateScaleError):
        compositor.paste_object(background(), opaque_square(10), (0, 0), -1.0)


def random_prior(rng):
    h, w = rng.integers(1, 16, 2)
    alpha = rng.integers(0, 256, (h, w)).astype(np.uint8)
    alpha[rng.integers(h), rng.integers(w)] = 255
    sprite = rng.integers(0, 256, (h, w, 3)).astype(np.uint8)
    return make_prior(sprite, alpha)


def test_paste_locality_and_background_purity(rng):
    for _ in range(50):
        prior = random_prior(rng)
        bg = rng.integers(0, 256, (40, 40, 3)).astype(np.uint8)
        scale = float(rng.uniform(0.5, 2.0))
        h, w = imaging.scaled_size(prior.shape, scale)
        if h > 40 or w > 40:
            continue
        x, y = int(rng.integers(0, 41 - w)), int(rng.integers(0, 41 - h))
        try:
            pair = compositor.paste_object(bg, prior, (x, y), scale)
        except DegenerateScaleError:
            continue
        assert np.array_equal(pair.reference, bg)
        changed = np.any(pair.live != bg, axis=2)
        outside = changed.copy()
        outside[y:y + h, x:x + w] = False
        assert not outside.any()
        expected = np.zeros((40, 40), bool)
        expected[y:y + h, x:x + w] = nearest_oracle(prior.alpha8, h, w) / 255.0 > 0.5
        assert np.array_equal(pair.mask.astype(bool), expected)


def test_synthesize_dataset_contracts():
    bgs = [background(value=v) for v in (40, 90, 160)]
    priors = [disc_prior(4), opaque_square(6)]
    assert compositor.synthesize_dataset(bgs, priors, 0) == []
    with pytest.raises(EmptyKnowledgeBaseError):
        compositor.synthesize_dataset(bgs, [], 3)
    a = compositor.synthesize_dataset(bgs, priors, 100, rng_seed=5)
    b = compositor.synthesize_dataset(bgs, priors, 100, rng_seed=5)
    assert len(a) == 100
    for s, t in zip(a, b):
        assert s.reference.tobytes() == t.reference.tobytes()
        assert s.live.tobytes() == t.live.tobytes()
        assert s.mask.tobytes() == t.mask.tobytes()
        assert s.mask.sum() >= 1


def test_single_convex_object_gives_one_component():
    bgs = [background(60, 60, v) for v in (40, 200)]
    data = compositor.synthesize_dataset(bgs, [disc_prior(5)], 40, objects_per_image=(1, 1),
                                         scale_range=(0.5, 1.5), rng_seed=3)
    for s in data:
        _, n = ndimage.label(s.mask, structure=np.ones((3, 3)))
        assert n == 1


def _pairs(n, origin):
    bg = background(4, 4)
    return [SamplePair(bg, bg, np.ones((4, 4), np.uint8), origin, 0, {"i": i}) for i in range(n)]


def test_mix_generations_extremes():
    gen0 = _pairs(20, compositor.SYNTHETIC)
    harvested = _pairs(5, compositor.HARVESTED)
    assert all(s.origin == compositor.SYNTHETIC for s in compositor.mix_generations(gen0, harvested, 0.0))
    assert all(s.origin == compositor.HARVESTED for s in compositor.mix_generations(gen0, harvested, 1.0))
    with pytest.raises(EmptyKnowledgeBaseError):
        compositor.mix_generations([], [], 0.5)
    with pytest.raises(InvalidInputError):
        compositor.mix_generations(gen0, harvested, 1.5)


def test_mix_generations_fraction_monte_carlo():
    gen0 = _pairs(1000, compositor.SYNTHETIC)
    harvested = _pairs(10, compositor.HARVESTED)
    for seed in range(10):
        mixed = compositor.mix_generations(gen0, harvested, 0.5, rng_seed=seed)
        frac = np.mean([s.origin == compositor.HARVESTED for s in mixed])
        assert abs(frac - 0.5) <= 0.05


def test_mix_is_deterministic():
    gen0 = _pairs(30, compositor.SYNTHETIC)
    harvested = _pairs(7, compositor.HARVESTED)
    a = compositor.mix_generations(gen0, harvested, 0.3, rng_seed=9)
    b = compositor.mix_generations(gen0, harvested, 0.3, rng_seed=9)
    assert [s.meta["i"] for s in a] == [s.meta["i"] for s in b]


def test_save_and_load_samples(tmp_path):
    data = compositor.synthesize_dataset([background()], [disc_prior(3)], 4, rng_seed=2)
    compositor.save_samples(tmp_path, data, {"seed": 2})
    back = compositor.load_samples(tmp_path)
    for s, t in zip(data, back):
        assert np.array_equal(s.live, t.live)
        assert np.array_equal(s.mask, t.mask)
        assert s.meta["objects"] == t.meta["objects"]


def test_synthesis_stops_when_nothing_fits():
    with pytest.raises(DegenerateScaleError):
        compositor.synthesize_dataset([background(4, 4)], [opaque_square(10)], 2, scale_range=(1.0, 1.0))
