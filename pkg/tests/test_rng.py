import numpy as np
import pytest

from mard.rng import Rng


def test_same_seed_same_stream():
    a = Rng(123)
    b = Rng(123)
    assert np.array_equal(a.normal((1000,)), b.normal((1000,)))
    assert np.array_equal(a.uniform((1000,)), b.uniform((1000,)))
    assert np.array_equal(a.integers(0, 17, (50,)), b.integers(0, 17, (50,)))


def test_different_seeds_differ():
    assert not np.array_equal(Rng(1).normal((100,)), Rng(2).normal((100,)))


def test_normal_moments():
    z = Rng(7).normal((100_000,))
    assert abs(z.mean()) < 0.02
    assert abs(z.var() - 1.0) < 0.05


def test_uniform_range_and_mean():
    u = Rng(3).uniform((100_000,))
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.01


def test_integers_cover_range():
    v = Rng(5).integers(2, 6, (10_000,))
    assert set(np.unique(v)) == {2, 3, 4, 5}


def test_integers_empty_range_rejected():
    with pytest.raises(ValueError):
        Rng(0).integers(4, 4, (3,))


def test_permutation_is_bijection():
    for seed in range(20):
        p = Rng(seed).permutation(12)
        assert sorted(p.tolist()) == list(range(12))


def test_spawn_independent_and_stable():
    root = Rng(9)
    a1 = root.spawn(4).normal((10,))
    a2 = Rng(9).spawn(4).normal((10,))
    b = Rng(9).spawn(5).normal((10,))
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, b)


def test_spawn_does_not_advance_parent():
    r = Rng(11)
    r.spawn(0)
    s = Rng(11)
    assert np.array_equal(r.normal((8,)), s.normal((8,)))


def test_normal_dtype():
    assert Rng(0).normal((4,), dtype=np.float32).dtype == np.float32
