import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from phenobench.baselines import (ImagePlanes, load_png_planes, load_raw_planes, pixel_stats,
                                  pixel_stats_table, random_embeddings, save_png_planes,
                                  save_raw_planes, scan_png_wells, shuffle_labels)
from phenobench.errors import SchemaError, ValidationError


def test_random_embeddings_deterministic_and_shaped():
    a = random_embeddings(50, d=16, seed=4)
    b = random_embeddings(50, d=16, seed=4)
    assert a == b
    assert a.vectors.shape == (50, 16)
    assert random_embeddings(50, d=16, seed=5) != a
    assert len({r.perturbation_id for r in a.records}) == 50


def test_random_embedding_moments():
    n = 4000
    x = random_embeddings(n, d=32, seed=1).vectors
    assert np.abs(x.mean(axis=0)).max() < 4 / math.sqrt(n)
    assert np.abs(x.var(axis=0) - 1).max() < 0.1


def test_random_embeddings_with_controls():
    t = random_embeddings(10, d=4, seed=0, n_controls=3, replicates=2)
    assert len(t) == 23 and int(t.control_mask().sum()) == 3
    with pytest.raises(ValidationError):
        random_embeddings(0)


def test_shuffle_keeps_multiset_and_metadata():
    t = random_embeddings(30, d=3, seed=2, n_controls=5)
    s = shuffle_labels(t, seed=9)
    assert s.meta == t.meta
    key = lambda m: Counter(map(bytes, (r.tobytes() for r in m)))
    assert key(s.vectors) == key(t.vectors)
    ctrl = t.control_mask()
    assert s.vectors[ctrl].tobytes() == t.vectors[ctrl].tobytes()
    assert shuffle_labels(t, seed=9) == s


def test_shuffle_identity_hook():
    t = random_embeddings(8, d=2, seed=0)
    assert shuffle_labels(t, permutation=lambda k: np.arange(k)) == t
    rev = shuffle_labels(t, permutation=lambda k: np.arange(k)[::-1])
    assert rev.vectors.tobytes() == t.vectors[::-1].tobytes()
    with pytest.raises(ValidationError):
        shuffle_labels(t, permutation=lambda k: np.zeros(k, dtype=int))


def test_pixel_stats_constant_channel():
    img = ImagePlanes(np.full((1, 4, 5), 7, dtype=np.uint16))
    assert pixel_stats(img).tolist() == [7.0, 0.0, 7.0, 7.0, 7.0]


def test_pixel_stats_two_by_two_by_hand():
    img = ImagePlanes(np.array([[[1, 2], [3, 4]]], dtype=np.uint16))
    assert pixel_stats(img).tolist() == [2.5, math.sqrt(1.25), 1.0, 4.0, 2.5]


def test_six_channels_give_thirty_features(rng):
    img = ImagePlanes(rng.integers(0, 65535, (6, 8, 8), dtype=np.uint16))
    f = pixel_stats(img)
    assert f.shape == (30,)
    assert f[5:10].tolist() == pixel_stats(ImagePlanes(img.pixels[1:2])).tolist()


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint16, st.tuples(st.integers(1, 3), st.integers(1, 6), st.integers(1, 6))),
       st.randoms(use_true_random=False))
def test_pixel_stats_ignore_pixel_order(px, rnd):
    flat = px.reshape(px.shape[0], -1).copy()
    perm = list(range(flat.shape[1]))
    rnd.shuffle(perm)
    shuffled = flat[:, perm].reshape(px.shape)
    a, b = pixel_stats(ImagePlanes(px)), pixel_stats(ImagePlanes(shuffled))
    # min, max, median exact; mean and std up to summation order
    assert np.allclose(a, b, rtol=1e-12, atol=1e-9)
    assert a.reshape(-1, 5)[:, 2:].tobytes() == b.reshape(-1, 5)[:, 2:].tobytes()


def test_image_validation():
    with pytest.raises(ValidationError):
        ImagePlanes(np.array([[[-1.0]]]))
    with pytest.raises(ValidationError):
        ImagePlanes(np.zeros(4))
    with pytest.raises(ValidationError):
        pixel_stats(ImagePlanes(np.zeros((1, 0, 3))))


def test_pixel_stats_table(rng):
    imgs = [((f"W{i}", "E", "P", f"G{i}", "perturbation"),
             ImagePlanes(rng.integers(0, 100, (6, 4, 4), dtype=np.uint16))) for i in range(3)]
    t = pixel_stats_table(imgs)
    assert t.dim == 30 and len(t) == 3


def test_png_round_trip(tmp_path, rng):
    img = ImagePlanes(rng.integers(0, 65535, (3, 5, 7), dtype=np.uint16))
    save_png_planes(img, tmp_path, "A01")
    wells = scan_png_wells(tmp_path)
    assert list(wells) == ["A01"] and len(wells["A01"]) == 3
    back = load_png_planes(wells["A01"])
    np.testing.assert_array_equal(back.pixels, img.pixels)
    (tmp_path / "B01_c1.png").write_bytes((tmp_path / "A01_c0.png").read_bytes())
    with pytest.raises(SchemaError):
        scan_png_wells(tmp_path)


def test_raw_round_trip(tmp_path, rng):
    img = ImagePlanes(rng.integers(0, 4096, (6, 4, 3), dtype=np.uint16))
    p = tmp_path / "w.raw"
    save_raw_planes(img, p)
    back = load_raw_planes(p)
    assert back.pixels.dtype == np.uint16
    np.testing.assert_array_equal(back.pixels, img.pixels)
    p.write_bytes(p.read_bytes()[:-2])
    with pytest.raises(SchemaError):
        load_raw_planes(p)
