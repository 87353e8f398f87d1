import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial.distance import cdist

from mdmx.datagen import OOD, make_noisy
from mdmx.nn import init_model
from mdmx.selection import (
    GmmFit,
    clean_posterior,
    default_k,
    fit_gmm_1d,
    gmm_log_likelihood,
    knn_ood_scores,
    lowest_loss_split,
    minmax,
    ood_mask,
    per_sample_losses,
    split_clean_noisy,
    write_selection_csv,
)


def knn_bruteforce(H, k):
    """Every pairwise distance (coordinates summed in index order), full sort, self removed by deletion."""
    n, d = H.shape
    out = np.empty(n)
    for i in range(n):
        dist = []
        for j in range(n):
            if j == i:
                continue
            acc = np.zeros(())
            for c in range(d):
                diff = H[i, c] - H[j, c]
                acc = acc + diff * diff
            dist.append(np.sqrt(acc))
        dist.sort()
        total = 0.0
        for v in dist[:k]:
            total += v
        out[i] = total / k
    return out


def test_identical_points_score_zero():
    assert np.all(knn_ood_scores(np.ones((10, 3)), 4).scores == 0.0)


def test_hand_case_isolated_point_scores_highest():
    s = knn_ood_scores(np.array([[0.0], [1.0], [2.0], [100.0]]), 2).scores
    # point 1 has both neighbours at distance 1
    np.testing.assert_array_equal(s, [1.5, 1.0, 1.5, 98.5])
    assert np.argmax(s) == 3


@pytest.mark.parametrize("seed", range(4))
def test_knn_equals_bruteforce(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 60))
    H = rng.standard_normal((n, int(rng.integers(1, 6))))
    k = int(rng.integers(1, n))
    got = knn_ood_scores(H, k, chunk=int(rng.integers(1, 70))).scores
    np.testing.assert_array_equal(got, knn_bruteforce(H, k))


def test_knn_agrees_with_cdist():
    H = np.random.default_rng(3).standard_normal((300, 32))
    D = cdist(H, H)
    np.fill_diagonal(D, np.inf)
    ref = np.sort(D, axis=1)[:, :30].mean(axis=1)
    np.testing.assert_allclose(knn_ood_scores(H, 30).scores, ref, rtol=1e-12)


def test_knn_chunking_does_not_change_scores():
    H = np.random.default_rng(8).standard_normal((123, 4))
    a = knn_ood_scores(H, 7, chunk=512).scores
    b = knn_ood_scores(H, 7, chunk=10).scores
    assert a.tobytes() == b.tobytes()


def test_knn_translation_invariance():
    H = np.random.default_rng(1).standard_normal((80, 5))
    np.testing.assert_allclose(knn_ood_scores(H + 3.7, 8).scores, knn_ood_scores(H, 8).scores, rtol=1e-12)


@pytest.mark.parametrize("k", [0, 10])
def test_knn_k_out_of_range(k):
    with pytest.raises(ValueError):
        knn_ood_scores(np.zeros((10, 2)), k)


def test_default_k():
    assert default_k(2000) == 100
    assert default_k(500) == 50
    assert default_k(5) == 1


def test_mask_fraction_zero_is_empty():
    assert not ood_mask(np.arange(10.0), 0.0).any()


def test_mask_marks_top_fraction():
    s = np.random.default_rng(0).standard_normal(100)
    m = ood_mask(s, 0.1)
    assert m.sum() == 10
    assert s[m].min() >= s[~m].max()


def test_mask_ties_go_to_smaller_index():
    m = ood_mask(np.array([1.0, 5.0, 5.0, 5.0, 0.0]), 0.4)
    assert m.tolist() == [False, True, True, False, False]


def test_mask_recall_on_ring_ood():
    ds = make_noisy(100, 4, 2, 1.0, 0.2, 0.2, seed=4)
    m = ood_mask(knn_ood_scores(ds.features, default_k(len(ds))), 0.2)
    ood = ds.truth.kind == OOD
    assert (m & ood).sum() / ood.sum() >= 0.9


def _bias_model(bias, in_dim=2):
    m = init_model(in_dim, len(bias), 0)
    for v in m.params.values():
        v[...] = 0.0
    m.params["clf.b"][:] = bias
    return m


def test_perfect_prediction_has_zero_loss():
    x = np.random.default_rng(0).standard_normal((6, 2))
    losses = per_sample_losses(_bias_model([0.0, 0.0, 1000.0]), x, np.full(6, 2))
    assert np.all(losses == 0.0)


def test_uniform_prediction_has_log_c_loss():
    x = np.random.default_rng(0).standard_normal((6, 2))
    losses = per_sample_losses(_bias_model([0.0] * 5), x, np.arange(6) % 5)
    np.testing.assert_allclose(losses, math.log(5), atol=1e-15)


def test_losses_match_loop_oracle():
    m = init_model(3, 4, 2)
    x = np.random.default_rng(2).standard_normal((8, 3))
    y = np.arange(8) % 4
    from mdmx.nn import predict_logits

    logits = predict_logits(m, x)
    ref = [-math.log(math.exp(row[c]) / sum(math.exp(v) for v in row)) for row, c in zip(logits, y)]
    np.testing.assert_allclose(per_sample_losses(m, x, y), ref, rtol=0, atol=1e-12)


FIXTURE = [0.1, 0.2, 0.1, 5.0, 5.1, 4.9]


def test_gmm_two_cluster_fixture():
    fit = fit_gmm_1d(FIXTURE)
    np.testing.assert_allclose(fit.means, [0.4 / 3, 5.0], atol=0.1)
    np.testing.assert_allclose(fit.weights, [0.5, 0.5], atol=0.05)
    assert not fit.degenerate


def test_gmm_fixture_beats_coarse_grid():
    """The EM optimum is at least as likely as every point of a coarse parameter grid."""
    x = np.array(FIXTURE)
    fit = fit_gmm_1d(x)
    best = -np.inf
    for m0 in np.linspace(0, 1, 11):
        for m1 in np.linspace(4.5, 5.5, 11):
            for v in (1e-3, 2.5e-3, 5e-3, 1e-2, 0.1):
                for w0 in (0.3, 0.5, 0.7):
                    best = max(best, gmm_log_likelihood(x, np.array([m0, m1]), np.array([v, v]), np.array([w0, 1 - w0])))
    assert fit.log_likelihood >= best - 1e-9


def test_single_tight_cluster_is_degenerate():
    fit = fit_gmm_1d(np.full(20, 0.3) + 1e-6 * np.arange(20) / 20)
    assert fit.degenerate
    assert clean_posterior(fit, 0.3) == 1.0


@pytest.mark.parametrize("seed", range(100))
def test_em_log_likelihood_never_decreases(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 200))
    x = np.concatenate([rng.normal(0, rng.uniform(0.01, 1), n), rng.normal(rng.uniform(0, 5), rng.uniform(0.01, 2), n // 2)])
    fit = fit_gmm_1d(x)
    assert np.all(np.diff(fit.trace) >= -1e-9 * np.abs(fit.trace[:-1]))


def test_gmm_rejects_bad_input():
    with pytest.raises(ValueError):
        fit_gmm_1d([1.0, 2.0])
    with pytest.raises(ValueError):
        fit_gmm_1d([1.0, 2.0, np.nan, 3.0])


def _fit(m0, m1, v0=0.01, v1=0.01, w0=0.5):
    return GmmFit(np.array([m0, m1]), np.array([v0, v1]), np.array([w0, 1 - w0]), 1, 0.0)


def test_posterior_at_low_mean_is_near_one():
    assert clean_posterior(_fit(0.1, 0.9), 0.1) > 0.99


def test_posterior_symmetric_midpoint():
    assert clean_posterior(_fit(0.2, 0.6), 0.4) == pytest.approx(0.5, abs=1e-12)


@given(st.floats(-1, 2), st.floats(0, 1))
def test_posterior_non_increasing_with_equal_variances(a, delta):
    fit = _fit(0.2, 0.7, 0.05, 0.05, 0.3)
    assert clean_posterior(fit, a) >= clean_posterior(fit, a + delta) - 1e-12


def test_split_boundary_is_inclusive():
    res = split_clean_noisy(np.array([0.3, 0.29, 0.31]), 0.3)
    assert res.clean_indices.tolist() == [0, 2]
    assert res.noisy_indices.tolist() == [1]


def test_all_clean_gives_empty_u():
    active = np.array([0, 2, 3])
    res = split_clean_noisy(np.ones(5), 0.3, active)
    assert res.noisy_indices.size == 0
    assert res.clean_indices.tolist() == active.tolist()


@given(st.lists(st.floats(0, 1), min_size=1, max_size=40), st.floats(0.01, 0.99), st.integers(0, 2**32))
def test_split_partitions_active_set(w, tau2, seed):
    w = np.array(w)
    active = np.random.default_rng(seed).random(w.shape[0]) < 0.7
    res = split_clean_noisy(w, tau2, active)
    assert set(res.clean_indices) | set(res.noisy_indices) == set(np.flatnonzero(active))
    assert not set(res.clean_indices) & set(res.noisy_indices)
    assert np.all(w[res.clean_indices] >= tau2) and np.all(w[res.noisy_indices] < tau2)


def test_lowest_loss_fallback():
    losses = np.array([5.0, 0.1, 3.0, 0.2, 9.0, 1.0, 2.0, 4.0, 6.0, 7.0, 8.0, 0.0])
    active = np.ones(12, dtype=bool)
    active[11] = False
    res = lowest_loss_split(losses, np.zeros(12), 0.3, active)
    assert res.fallback
    assert res.clean_indices.tolist() == [1, 3]
    assert 11 not in res.noisy_indices and len(res.noisy_indices) == 9


def test_minmax():
    np.testing.assert_array_equal(minmax(np.array([2.0, 4.0, 3.0])), [0.0, 1.0, 0.5])
    np.testing.assert_array_equal(minmax(np.array([3.0, 3.0])), [0.0, 0.0])


def test_selection_csv(tmp_path):
    w = np.array([0.9, 0.1, 0.5, 0.8])
    split = split_clean_noisy(w, 0.3, np.array([0, 1, 3]))
    path = tmp_path / "s.csv"
    write_selection_csv(path, np.array([1.0, 2.0, 9.0, 0.5]), np.array([0.1, 2.0, 1.0, 0.2]), split,
                        np.array([False, False, True, False]))
    lines = path.read_text().splitlines()
    assert lines[0] == "index,ood_score,loss,w,assigned"
    assert [l.rsplit(",", 1)[1] for l in lines[1:]] == ["clean", "noisy", "ood", "clean"]
