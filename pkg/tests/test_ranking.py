import numpy as np
import pytest
from fractions import Fraction

from sketchsift.embedder import EmbedNet, EmbedNetConfig
from sketchsift.errors import (
    EmptyEpisode,
    EmptyGallery,
    LengthMismatch,
    UnknownPairedId,
)
from sketchsift.ranking import (
    CurveSample,
    GalleryFeatures,
    acc_at_k,
    area_under,
    build_gallery,
    curve_areas,
    onthefly_curves,
    rank,
    rank_many,
    stroke_prefixes,
    write_curve_csv,
)
from sketchsift.sketch import parse_sketch


def unit_rows(arr):
    arr = np.asarray(arr, dtype=np.float64)
    return arr / np.linalg.norm(arr, axis=1, keepdims=True)


def rng_for(seed):
    return np.random.Generator(np.random.PCG64(seed))


# -- gallery -------------------------------------------------------------------


def test_build_gallery_rows_unit_norm_and_deterministic():
    net = EmbedNet(EmbedNetConfig(input_hw=16, channels=(2, 3), embed_dim=4, seed=1))
    photos = rng_for(1).random((5, 16, 16))
    g1 = build_gallery(net, photos, [f"p{i}" for i in range(5)])
    g2 = build_gallery(net, photos, [f"p{i}" for i in range(5)])
    assert g1.size == 5
    assert np.abs(np.linalg.norm(g1.features, axis=1) - 1.0).max() < 1e-6
    assert np.array_equal(g1.features, g2.features)


def test_build_gallery_duplicate_photo_identical_rows():
    net = EmbedNet(EmbedNetConfig(input_hw=16, channels=(2, 3), embed_dim=4, seed=1))
    photo = rng_for(2).random((16, 16))
    gallery = build_gallery(net, np.stack([photo, photo]), ["a", "b"])
    assert np.array_equal(gallery.features[0], gallery.features[1])


def test_gallery_validation():
    with pytest.raises(EmptyGallery):
        GalleryFeatures(np.zeros((0, 4)), [])
    with pytest.raises(LengthMismatch):
        GalleryFeatures(np.eye(3), ["a", "b"])
    with pytest.raises(LengthMismatch):
        GalleryFeatures(np.eye(3), ["a", "a", "b"])
    gallery = GalleryFeatures(np.eye(3), ["a", "b", "c"])
    with pytest.raises(UnknownPairedId):
        gallery.index_of("zzz")


def test_gallery_features_immutable():
    gallery = GalleryFeatures(np.eye(3), ["a", "b", "c"])
    with pytest.raises(ValueError):
        gallery.features[0, 0] = 5.0


# -- rank ----------------------------------------------------------------------


def test_rank_exact_match_is_one():
    feats = unit_rows(rng_for(3).normal(size=(6, 4)))
    gallery = GalleryFeatures(feats, [f"p{i}" for i in range(6)])
    result = rank(feats[2], gallery, "p2")
    assert result.rank == 1
    assert result.percentile == 1.0


def test_rank_single_item_gallery():
    gallery = GalleryFeatures(unit_rows([[1.0, 0.0]]), ["only"])
    result = rank(np.array([0.0, 1.0]), gallery, "only")
    assert result.rank == 1
    assert result.percentile == 1.0


def test_rank_all_identical_rows_pessimistic():
    row = unit_rows([[1.0, 2.0]])[0]
    gallery = GalleryFeatures(np.tile(row, (5, 1)), [f"p{i}" for i in range(5)])
    result = rank(row, gallery, "p0")
    assert result.rank == 5
    assert result.percentile == 0.0


def test_rank_unknown_paired_id():
    gallery = GalleryFeatures(np.eye(2), ["a", "b"])
    with pytest.raises(UnknownPairedId):
        rank(np.array([1.0, 0.0]), gallery, "c")


def test_rank_shuffle_invariance():
    rng = rng_for(4)
    feats = unit_rows(rng.normal(size=(8, 5)))
    ids = [f"p{i}" for i in range(8)]
    query = unit_rows(rng.normal(size=(1, 5)))[0]
    base = rank(query, GalleryFeatures(feats, ids), "p3").rank
    for _ in range(10):
        perm = rng.permutation(8)
        shuffled = rank(query, GalleryFeatures(feats[perm], [ids[i] for i in perm]), "p3").rank
        assert shuffled == base


def test_rank_adding_photo_changes_rank_by_at_most_one():
    rng = rng_for(5)
    feats = unit_rows(rng.normal(size=(7, 4)))
    ids = [f"p{i}" for i in range(7)]
    query = unit_rows(rng.normal(size=(1, 4)))[0]
    base = rank(query, GalleryFeatures(feats, ids), "p1").rank
    for trial in range(20):
        extra = unit_rows(rng.normal(size=(1, 4)))
        grown = GalleryFeatures(np.vstack([feats, extra]), ids + [f"new{trial}"])
        new_rank = rank(query, grown, "p1").rank
        assert base <= new_rank <= base + 1


def test_percentile_decreasing_in_rank():
    m = 9
    pcts = [(m - r) / (m - 1) for r in range(1, m + 1)]
    assert all(a > b for a, b in zip(pcts, pcts[1:]))


def test_rank_many_agrees_with_rank():
    rng = rng_for(6)
    feats = unit_rows(rng.normal(size=(10, 4)))
    ids = [f"p{i}" for i in range(10)]
    gallery = GalleryFeatures(feats, ids)
    queries = unit_rows(rng.normal(size=(6, 4)))
    paired = [ids[i] for i in (0, 3, 5, 5, 9, 2)]
    batch = rank_many(queries, gallery, paired)
    singles = [rank(queries[i], gallery, paired[i]).rank for i in range(6)]
    assert list(batch) == singles


# -- acc@k ----------------------------------------------------------------------


def test_acc_at_k_examples():
    assert acc_at_k([1, 6, 3], 5) == pytest.approx(2 / 3)
    assert acc_at_k([2, 3, 4], 10) == 1.0
    assert acc_at_k([7, 8], 5) == 0.0
    with pytest.raises(LengthMismatch):
        acc_at_k([], 5)
    with pytest.raises(LengthMismatch):
        acc_at_k([1], 0)


# -- on-the-fly curves ------------------------------------------------------------


def test_area_under_constant_one_is_100():
    assert area_under([0.25, 0.5, 1.0], [1.0, 1.0, 1.0]) == pytest.approx(100.0)


def test_curve_areas_hand_computed_three_step_episode():
    # ranks (2, 1, 1) with M=10 at fractions 1/3, 2/3, 1:
    # percentiles 8/9, 1, 1: normalized trapezoid = 35/36 -> r@A = 3500/36
    # inv ranks 1/2, 1, 1: normalized trapezoid = 7/8 -> r@B = 87.5
    samples = [
        CurveSample(1, 1 / 3, 2, 8 / 9),
        CurveSample(2, 2 / 3, 1, 1.0),
        CurveSample(3, 1.0, 1, 1.0),
    ]
    r_a, r_b = curve_areas(samples)
    assert r_a == pytest.approx(float(Fraction(3500, 36)), abs=1e-9)
    assert r_b == pytest.approx(87.5, abs=1e-9)


def test_onthefly_all_rank_one_gives_100_and_limits(tmp_path):
    net = EmbedNet(EmbedNetConfig(input_hw=16, channels=(2, 3), embed_dim=4, seed=2))
    doc = "canvas 64 64\nstroke 5,5 50,5\nstroke 50,5 50,50\nstroke 50,50 5,50\n"
    sketch = parse_sketch(doc)
    prefixes = stroke_prefixes(sketch)
    photo = np.zeros((16, 16))
    gallery = build_gallery(net, photo[None], ["only"])
    samples, r_a, r_b = onthefly_curves(prefixes, net, gallery, "only")
    # single-photo gallery: every prefix ranks 1
    assert all(s.rank == 1 for s in samples)
    assert r_b == pytest.approx(100.0)
    assert r_a == pytest.approx(100.0)
    out = tmp_path / "curve.csv"
    write_curve_csv(out, samples, r_a, r_b)
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "step,fraction,rank,percentile"
    assert lines[-1].startswith("summary,")
    assert len(lines) == 2 + len(samples)


def test_onthefly_large_gallery_bad_ranks_near_zero_area():
    rng = rng_for(9)
    m = 500
    feats = unit_rows(rng.normal(size=(m, 6)))
    ids = [f"p{i}" for i in range(m)]
    # all prefixes rank dead last: percentile 0, inv rank 1/m
    samples = [CurveSample(i + 1, (i + 1) / 4, m, 0.0) for i in range(4)]
    r_a, r_b = curve_areas(samples)
    assert r_a == pytest.approx(0.0)
    assert r_b == pytest.approx(100.0 / m)


def test_onthefly_empty_episode():
    net = EmbedNet(EmbedNetConfig(input_hw=16, channels=(2, 3), embed_dim=4, seed=2))
    gallery = GalleryFeatures(np.eye(2), ["a", "b"])
    with pytest.raises(EmptyEpisode):
        onthefly_curves([], net, gallery, "a")
