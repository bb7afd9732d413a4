import numpy as np
import pytest

from gfrnet.data import (DataError, Palette, Sample, ambiguous_layout, gen_ambiguous, gen_shapes,
                         generate, load_image_ppm, load_labels_pgm, load_manifest, load_palette,
                         normalize, random_crop, save_image_ppm, save_labels_pgm, save_palette,
                         write_dataset)


def test_empty_dataset():
    assert gen_shapes(np.random.default_rng(0), 0, 32, 4) == []
    assert generate({"generator": "ambiguous", "n": 0, "size": 32}, 0) == []


def test_shapes_labels_in_range():
    for s in gen_shapes(np.random.default_rng(0), 10, 32, 5):
        assert s.image.shape == (1, 3, 32, 32)
        assert s.labels.min() >= 0 and s.labels.max() < 5
        assert 0 <= s.image.min() and s.image.max() <= 1


def test_generate_is_deterministic_and_splits_differ():
    spec = {"generator": "shapes", "n": 3, "size": 32, "num_classes": 4}
    a, b = generate(spec, 5), generate(spec, 5)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.image, y.image)
        np.testing.assert_array_equal(x.labels, y.labels)
    test = generate(spec, 5, "test")
    assert not np.array_equal(a[0].image, test[0].image)


def test_ambiguous_patch_bytes_identical_across_classes():
    samples = gen_ambiguous(np.random.default_rng(1), 40, 64)
    _, side, _, _ = ambiguous_layout(64)
    patches = {1: [], 2: []}
    for s in samples:
        ys, xs = np.nonzero(s.labels)
        y0, x0 = ys.min(), xs.min()
        cls = int(s.labels[y0, x0])
        patches[cls].append(s.image[..., y0:y0 + side, x0:x0 + side])
    assert patches[1] and patches[2]
    ref = patches[1][0]
    for p in patches[1] + patches[2]:
        np.testing.assert_array_equal(p, ref)


def test_ambiguous_cue_far_from_patch():
    cue, side, lo, hi = ambiguous_layout(64)
    assert lo - cue >= 32 and hi + side <= 64


def test_ambiguous_classes_balanced():
    labs = [int(s.labels.max()) for s in gen_ambiguous(np.random.default_rng(0), 1000, 32)]
    frac = labs.count(1) / len(labs)
    assert 0.45 <= frac <= 0.55


def test_ppm_pgm_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
    save_image_ppm(tmp_path / "a.ppm", img)
    back = load_image_ppm(tmp_path / "a.ppm")
    assert back.shape == (1, 3, 5, 7)
    np.testing.assert_array_equal(np.round(back[0].transpose(1, 2, 0) * 255).astype(np.uint8), img)

    lab = rng.choice([0, 1, 2, 255], (5, 7))
    save_labels_pgm(tmp_path / "a.pgm", lab)
    np.testing.assert_array_equal(load_labels_pgm(tmp_path / "a.pgm", 3), lab)


def test_pgm_exact_bytes(tmp_path):
    save_labels_pgm(tmp_path / "x.pgm", np.array([[0, 1], [2, 255]]))
    assert (tmp_path / "x.pgm").read_bytes() == b"P5\n2 2\n255\n\x00\x01\x02\xff"


def test_header_comments_are_skipped(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# hi\n2 1\n255\n\x01\x00")
    assert load_labels_pgm(tmp_path / "c.pgm").tolist() == [[1, 0]]


@pytest.mark.parametrize("payload, msg", [
    (b"P2\n2 2\n255\n\x00\x00\x00\x00", "bad magic"),
    (b"P5\n2 x\n255\n\x00\x00\x00\x00", "malformed header"),
    (b"P5\n2 2\n255\n\x00\x00", "truncated"),
    (b"P5\n2 2\n65535\n" + b"\x00" * 8, "maxval"),
])
def test_malformed_pgm(tmp_path, payload, msg):
    (tmp_path / "bad.pgm").write_bytes(payload)
    with pytest.raises(DataError, match=msg):
        load_labels_pgm(tmp_path / "bad.pgm")


def test_label_out_of_range_names_pixel(tmp_path):
    save_labels_pgm(tmp_path / "l.pgm", np.array([[0, 0], [0, 9]]))
    with pytest.raises(DataError, match=r"label 9 at \(1, 1\)"):
        load_labels_pgm(tmp_path / "l.pgm", 4)


def _sample(h, w):
    img = np.arange(3 * h * w, dtype=np.float64).reshape(1, 3, h, w)
    lab = np.arange(h * w).reshape(h, w)
    return Sample(img, lab)


def test_crop_full_size_is_identity(rng):
    s = _sample(8, 6)
    c = random_crop(s, 8, 6, rng)
    np.testing.assert_array_equal(c.image, s.image)
    np.testing.assert_array_equal(c.labels, s.labels)


def test_crop_aligned_with_labels(rng):
    s = _sample(16, 12)
    for _ in range(20):
        c = random_crop(s, 8, 4, rng)
        y0, x0 = divmod(int(c.labels[0, 0]), 12)
        np.testing.assert_array_equal(c.labels, s.labels[y0:y0 + 8, x0:x0 + 4])
        np.testing.assert_array_equal(c.image, s.image[..., y0:y0 + 8, x0:x0 + 4])


def test_crop_too_large(rng):
    with pytest.raises(ValueError, match="does not fit"):
        random_crop(_sample(4, 4), 8, 4, rng)


def test_normalize_example():
    img = np.full((1, 3, 1, 1), 0.8)
    out = normalize(img, (0.5, 0.5, 0.5), (0.25, 0.25, 0.25))
    np.testing.assert_allclose(out, 1.2)


def test_palette_round_trip_and_colorize(tmp_path):
    p = Palette([(1, 0, 255, 0, "grass"), (0, 10, 20, 30, "sky")])
    assert p.names == ["sky", "grass"]
    save_palette(tmp_path / "p.txt", p)
    q = load_palette(tmp_path / "p.txt")
    assert q.entries == p.entries
    rgb = q.colorize(np.array([[0, 1, 255]]))
    assert rgb.tolist() == [[[10, 20, 30], [0, 255, 0], [0, 0, 0]]]


def test_palette_needs_dense_indices():
    with pytest.raises(ValueError):
        Palette([(0, 0, 0, 0, "a"), (2, 0, 0, 0, "b")])


def test_dataset_dir_round_trip(tmp_path):
    samples = generate({"generator": "shapes", "n": 3, "size": 32, "num_classes": 3}, 0)
    manifest = write_dataset(tmp_path, samples, Palette.default(3))
    assert len(manifest.read_text().splitlines()) == 3
    back = load_manifest(manifest, 3)
    for a, b in zip(samples, back):
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.image, b.image)


def test_missing_manifest(tmp_path):
    with pytest.raises(DataError, match="does not exist"):
        load_manifest(tmp_path / "nope.txt")
