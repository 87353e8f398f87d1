import numpy as np
import pytest
from hypothesis import given, strategies as st

from mdmx.augment import AugmentSpec, FOUR_VIEWS, epoch_views, four_views, strong, weak

X = np.array([1.5, -2.0, 0.25, 4.0])


def test_zero_sigma_weak_is_identity(rng):
    spec = AugmentSpec(weak_jitter_sigma=0.0)
    np.testing.assert_array_equal(weak(X, spec, rng), X)


def test_weak_changes_input_when_sigma_positive(rng):
    out = weak(np.tile(X, (50, 1)), AugmentSpec(), rng)
    assert np.all(out != X)


def test_weak_jitter_std_monte_carlo():
    spec = AugmentSpec(weak_jitter_sigma=0.05)
    feature_std = np.array([1.0, 3.0, 0.5, 2.0])
    draws = weak(np.tile(X, (100_000, 1)), spec, np.random.default_rng(0), scale=feature_std)
    emp = (draws - X).std(axis=0)
    np.testing.assert_allclose(emp, 0.05 * feature_std, rtol=0.02)


def test_neutral_strong_is_identity(rng):
    np.testing.assert_array_equal(strong(X, AugmentSpec.neutral(), rng), X)


@pytest.mark.parametrize("p", [1.0, -0.1, 1.5])
def test_dropout_probability_must_be_below_one(p):
    with pytest.raises(ValueError):
        AugmentSpec(strong_dropout_p=p)


@pytest.mark.parametrize("kw", [dict(weak_jitter_sigma=-1), dict(strong_scale_range=(1.1, 1.3)), dict(strong_scale_range=(0.0, 1.0))])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        AugmentSpec(**kw)


def test_dropout_fraction_monte_carlo():
    spec = AugmentSpec(strong_jitter_sigma=0.0, strong_dropout_p=0.2, strong_scale_range=(1.0, 1.0))
    x = np.ones((25_000, 4))
    out = strong(x, spec, np.random.default_rng(1))
    assert abs(np.mean(out == 0.0) - 0.2) < 0.02 * 0.2


def test_strong_scale_range_respected():
    spec = AugmentSpec(strong_jitter_sigma=0.0, strong_dropout_p=0.0, strong_scale_range=(0.8, 1.25))
    out = strong(np.ones((10_000, 3)), spec, np.random.default_rng(2))
    ratios = out[:, 0]
    assert ratios.min() >= 0.8 and ratios.max() <= 1.25
    # one factor per row
    np.testing.assert_array_equal(out[:, 0], out[:, 2])


def test_neutral_four_views_are_copies(rng):
    views = four_views(X, AugmentSpec.neutral(), rng)
    assert len(views) == 4
    for v in views:
        np.testing.assert_array_equal(v, X)


def test_four_views_deterministic():
    a = four_views(X, AugmentSpec(), np.random.default_rng(9))
    b = four_views(X, AugmentSpec(), np.random.default_rng(9))
    for u, v in zip(a, b):
        assert u.tobytes() == v.tobytes()


def test_four_views_replay_from_substreams():
    spec = AugmentSpec()
    views = four_views(X, spec, np.random.default_rng(21))
    children = np.random.default_rng(21).spawn(4)
    replay = [weak(X, spec, children[0]), weak(X, spec, children[1]),
              strong(X, spec, children[2]), strong(X, spec, children[3])]
    for v, r in zip(views, replay):
        assert v.tobytes() == r.tobytes()
    assert not np.array_equal(views[0], views[1])


def test_epoch_views_independent_of_row_subset():
    feats = np.random.default_rng(0).standard_normal((20, 3))
    full = epoch_views(feats, AugmentSpec(), None, seed=5, epoch=2)
    again = epoch_views(feats, AugmentSpec(), None, seed=5, epoch=2)
    other = epoch_views(feats, AugmentSpec(), None, seed=5, epoch=3)
    assert len(full) == len(FOUR_VIEWS)
    for a, b, c in zip(full, again, other):
        assert a.tobytes() == b.tobytes()
        assert a.tobytes() != c.tobytes()


@given(st.integers(0, 2**32), st.floats(0, 2), st.floats(0, 0.99))
def test_augmentations_keep_shape_and_finiteness(seed, sigma, p):
    spec = AugmentSpec(sigma, sigma, p, (0.5, 2.0))
    x = np.random.default_rng(seed).standard_normal((7, 3))
    for v in four_views(x, spec, np.random.default_rng(seed)):
        assert v.shape == x.shape and np.all(np.isfinite(v))
