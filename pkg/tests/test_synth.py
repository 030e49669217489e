import numpy as np
import pytest

from sketchsift.errors import InvalidFractions
from sketchsift.sketch import apply_mask, rasterize, serialize_sketch
from sketchsift.synth import (
    PairSpec,
    generate_dataset,
    generate_pair,
    inject_noise,
    load_dataset,
    read_pgm,
    write_pgm,
)


def rng_for(seed):
    return np.random.Generator(np.random.PCG64(seed))


def test_generate_pair_deterministic():
    spec = PairSpec(shape_family="polygon", seed=42, n_noise_strokes=2)
    photo1, labeled1 = generate_pair(spec)
    photo2, labeled2 = generate_pair(spec)
    assert np.array_equal(photo1.pixels, photo2.pixels)
    assert labeled1.sketch == labeled2.sketch
    assert labeled1.noise_flags == labeled2.noise_flags


@pytest.mark.parametrize("family", ["polygon", "ellipse", "blob"])
def test_generate_pair_families(family):
    spec = PairSpec(shape_family=family, seed=7, n_clean_strokes=4)
    photo, labeled = generate_pair(spec)
    assert labeled.sketch.stroke_count == 4
    assert not any(labeled.noise_flags)
    assert labeled.sketch.fits_canvas()
    assert photo.ink_count > 20  # the shape is actually drawn


def test_generate_pair_zero_jitter_contained_in_dilated_photo():
    spec = PairSpec(shape_family="blob", seed=9, jitter_sigma=0.0)
    photo, labeled = generate_pair(spec)
    sketch_img = rasterize(labeled.sketch, spec.photo_hw, spec.photo_hw, 1)
    # dilate photo ink by radius 1
    padded = np.pad(photo.pixels, 1)
    dilated = np.zeros_like(photo.pixels)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            dilated = np.maximum(
                dilated, padded[1 + dy : 1 + dy + 64, 1 + dx : 1 + dx + 64]
            )
    assert np.all(dilated[sketch_img.pixels > 0] > 0)


def test_inject_noise_identity_at_zero():
    _, labeled = generate_pair(PairSpec(seed=1))
    out = inject_noise(labeled.sketch, 0, rng_for(0))
    assert out.sketch == labeled.sketch
    assert not any(out.noise_flags)


def test_inject_noise_grows_k_and_flags():
    _, labeled = generate_pair(PairSpec(seed=2))
    k_in = labeled.sketch.stroke_count
    for n in (1, 3, 5):
        out = inject_noise(labeled.sketch, n, rng_for(n))
        assert out.sketch.stroke_count == k_in + n
        assert sum(out.noise_flags) == n


def test_inject_noise_round_trip_byte_exact():
    _, labeled = generate_pair(PairSpec(seed=3))
    original_doc = serialize_sketch(labeled.sketch)
    noisy = inject_noise(labeled.sketch, 4, rng_for(11))
    recovered = apply_mask(noisy.sketch, noisy.clean_mask())
    assert serialize_sketch(recovered) == original_doc


def test_pgm_round_trip(tmp_path):
    _, labeled = generate_pair(PairSpec(seed=4))
    img = rasterize(labeled.sketch, 64, 64, 1)
    path = tmp_path / "img.pgm"
    write_pgm(path, img)
    back = read_pgm(path)
    assert np.array_equal(back.pixels, img.pixels)


def test_generate_dataset_split_sizes_and_disjoint(tmp_path):
    ds = generate_dataset(
        40, PairSpec(), (0.7, 0.15, 0.15), seed=5, out_dir=tmp_path / "ds"
    )
    assert len(ds.split("train")) == 28
    assert len(ds.split("val")) == 6
    assert len(ds.split("test")) == 6
    ids = {}
    for e in ds.entries:
        assert e.pair_id not in ids
        ids[e.pair_id] = e.split


def test_generate_dataset_regeneration_identical(tmp_path):
    ds1 = generate_dataset(12, PairSpec(), (0.5, 0.25, 0.25), 6, tmp_path / "a")
    ds2 = generate_dataset(12, PairSpec(), (0.5, 0.25, 0.25), 6, tmp_path / "b")
    m1 = (tmp_path / "a" / "manifest.txt").read_text()
    m2 = (tmp_path / "b" / "manifest.txt").read_text()
    assert m1 == m2
    for e in ds1.entries:
        assert (tmp_path / "a" / e.sketch_path).read_text() == (
            tmp_path / "b" / e.sketch_path
        ).read_text()
        assert (tmp_path / "a" / e.photo_path).read_bytes() == (
            tmp_path / "b" / e.photo_path
        ).read_bytes()


def test_generate_dataset_bad_fractions(tmp_path):
    with pytest.raises(InvalidFractions):
        generate_dataset(10, PairSpec(), (0.7, 0.7), 1, tmp_path / "x")


def test_load_dataset_round_trip(tmp_path):
    ds = generate_dataset(9, PairSpec(), (0.6, 0.2, 0.2), 8, tmp_path / "ds")
    loaded = load_dataset(tmp_path / "ds")
    assert [e.pair_id for e in loaded.entries] == [e.pair_id for e in ds.entries]
    sketches, photos, ids = loaded.load_split("train")
    assert len(sketches) == len(ids) == photos.shape[0]
    assert photos.shape[1:] == (64, 64)


def test_dataset_variable_stroke_counts(tmp_path):
    ds = generate_dataset(
        10, PairSpec(), (1.0,), 9, tmp_path / "ds", n_clean_range=(4, 6)
    )
    sketches, _, _ = ds.load_split("train")
    counts = {s.stroke_count for s in sketches}
    assert counts <= {4, 5, 6}
    assert len(counts) > 1
