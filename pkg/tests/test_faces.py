import numpy as np
import pytest

from masque import faces
from masque.errors import DataError


def test_generation_is_deterministic():
    a, b = faces.generate(3, 2, seed=7), faces.generate(3, 2, seed=7)
    assert a.digest() == b.digest()
    assert np.array_equal(a.images(), b.images())
    assert faces.generate(3, 2, seed=8).digest() != a.digest()


def test_identity_seed_fixes_the_people():
    a = faces.generate(4, 1, seed=1, identity_seed=50)
    b = faces.generate(4, 1, seed=2, identity_seed=50)
    assert [r.identity for r in a.renders] == [r.identity for r in b.renders]
    assert not np.array_equal(a.images(), b.images())


def test_prefix_of_larger_set():
    small, big = faces.generate(3, 2, seed=5, identity_seed=9), faces.generate(6, 2, seed=5, identity_seed=9)
    assert np.array_equal(small.images(), big.images()[:6])


def test_render_range_and_layout():
    ds = faces.generate(2, 3, seed=0)
    x = ds.images()
    assert x.shape == (6, faces.IMAGE_SIZE, faces.IMAGE_SIZE, 3)
    assert x.min() >= 0 and x.max() <= 1
    assert ds.identities() == ["id0000", "id0001"]
    assert {"lips", "eyes", "eyebrows", "cheeks", "skin"} <= set(ds.renders[0].polygons)


def test_rasterize_square():
    m = faces.rasterize([[(4.0, 4.0), (8.0, 4.0), (8.0, 8.0), (4.0, 8.0)]])
    assert m.sum() == 16 and m[4:8, 4:8].all()
    assert not faces.rasterize([[(1.0, 1.0), (2.0, 2.0)]]).any()


def test_save_load_round_trip(tmp_path):
    ds = faces.generate(2, 2, seed=3)
    faces.save(ds, tmp_path)
    again = faces.load(tmp_path)
    assert again.digest() == ds.digest()
    assert np.array_equal(again.images(), ds.images())
    assert again.renders[1].polygons == ds.renders[1].polygons


def test_bad_requests():
    with pytest.raises(DataError):
        faces.generate(0, 1, seed=0)
    with pytest.raises(DataError):
        faces.load("/nonexistent/faces")
