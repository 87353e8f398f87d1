import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mdmx.datagen import CLEAN, ID_NOISE, OOD, CleanDataset, GroundTruth
from mdmx.evaluation import (
    Evaluator,
    MetricsFormatError,
    MetricsRecord,
    accuracy,
    ood_auroc,
    ood_recall_at,
    read_metrics,
    selection_prf,
    write_metrics,
)
from mdmx.nn import init_model, predict_logits
from mdmx.selection import split_clean_noisy


def _onehot_model(n_classes=3):
    """Logits equal to the first coordinate's one-hot: input e_c is classified as c."""
    m = init_model(n_classes, n_classes, 0)
    for v in m.params.values():
        v[...] = 0.0
    m.params["enc.W1"][:, :n_classes] = np.eye(n_classes)
    m.params["enc.W2"][:n_classes, :n_classes] = np.eye(n_classes)
    m.params["clf.W"][:n_classes] = np.eye(n_classes)
    return m


def test_perfect_model_scores_one():
    labels = np.array([0, 1, 2, 2, 1])
    ds = CleanDataset(np.eye(3)[labels], labels, 3, 1.0)
    assert accuracy(_onehot_model(), ds) == 1.0


def test_constant_model_scores_one_over_c():
    labels = np.repeat(np.arange(4), 5)
    m = init_model(2, 4, 0)
    for v in m.params.values():
        v[...] = 0.0
    m.params["clf.b"][2] = 1.0
    assert accuracy(m, CleanDataset(np.zeros((20, 2)), labels, 4, 1.0)) == 0.25


def test_accuracy_matches_loop():
    m = init_model(2, 3, 4)
    rng = np.random.default_rng(4)
    x, y = rng.standard_normal((50, 2)), rng.integers(0, 3, 50)
    logits = predict_logits(m, x)
    hits = sum(int(max(range(3), key=lambda c: (row[c], -c)) == t) for row, t in zip(logits, y))
    assert accuracy(m, CleanDataset(x, y, 3, 1.0)) == hits / 50


def auroc_pairs(scores, pos):
    """O(N^2) pairwise comparison, ties counted half."""
    p, n = scores[pos], scores[~pos]
    total = 0.0
    for a in p:
        for b in n:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(p) * len(n))


def test_auroc_trivial_cases():
    pos = np.array([False, False, True, True])
    assert ood_auroc(np.array([1.0, 2.0, 3.0, 4.0]), pos) == 1.0
    assert ood_auroc(np.ones(4), pos) == 0.5


def test_auroc_hand_cases():
    s = np.array([1.0, 2.0, 3.0, 4.0])
    assert ood_auroc(s, np.array([False, False, True, True])) == 1.0
    assert ood_auroc(s, np.array([True, False, False, True])) == 0.5


@given(st.integers(0, 2**32), st.integers(2, 300))
def test_auroc_matches_pairwise_oracle(seed, n):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 10, n).astype(float)  # plenty of ties
    pos = rng.random(n) < 0.3
    pos[0], pos[1] = True, False
    assert ood_auroc(scores, pos) == pytest.approx(auroc_pairs(scores, pos), abs=1e-12)


def test_auroc_needs_both_classes():
    with pytest.raises(ValueError):
        ood_auroc(np.arange(3.0), np.zeros(3, dtype=bool))


def test_recall_at_fraction():
    truth = GroundTruth(np.array([0, 1, -1, -1, 0]), np.array([CLEAN, CLEAN, OOD, OOD, CLEAN]))
    assert ood_recall_at(np.array([0.0, 5.0, 4.0, 1.0, 0.0]), truth, 0.4) == 0.5


def _truth(kinds):
    kinds = np.array(kinds)
    return GroundTruth(np.where(kinds == OOD, -1, 0), kinds)


def test_selection_exact_clean_set():
    truth = _truth([CLEAN, ID_NOISE, CLEAN, OOD])
    q = selection_prf(split_clean_noisy(np.array([1.0, 0.0, 1.0, 0.0]), 0.5), truth)
    assert (q.precision, q.recall) == (1.0, 1.0)


def test_selection_everything_clean():
    truth = _truth([CLEAN, ID_NOISE, CLEAN, OOD, CLEAN])
    q = selection_prf(split_clean_noisy(np.ones(5), 0.5), truth)
    assert q.precision == pytest.approx(3 / 5) and q.recall == 1.0


def test_selection_six_sample_hand_case():
    # X = {0, 1, 3, 5}; truly clean = {0, 2, 3}; |X & clean| = 2
    truth = _truth([CLEAN, ID_NOISE, CLEAN, CLEAN, OOD, ID_NOISE])
    q = selection_prf(split_clean_noisy(np.array([0.9, 0.8, 0.1, 0.7, 0.2, 0.6]), 0.5), truth)
    assert q.precision == 0.5
    assert q.recall == pytest.approx(2 / 3)


@given(st.integers(0, 2**32))
def test_selection_metrics_bounded_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    kinds = rng.integers(0, 3, 30)
    w = rng.random(30)
    q = selection_prf(split_clean_noisy(w, 0.5), _truth(kinds))
    perm = rng.permutation(30)
    qp = selection_prf(split_clean_noisy(w[perm], 0.5), _truth(kinds[perm]))
    assert 0 <= q.precision <= 1 and 0 <= q.recall <= 1
    assert (q.precision, q.recall) == (qp.precision, qp.recall)


def test_evaluator_without_truth_returns_none():
    ev = Evaluator(None, None)
    assert ev.test_accuracy(init_model(2, 2, 0)) is None
    assert ev.selection(split_clean_noisy(np.ones(3), 0.5)) is None


RECORDS = [
    MetricsRecord(round=-1, epoch=0, l_self=4.1234567890123457),
    MetricsRecord(round=0, epoch=3, l_sup=0.1, l_unsup=0.2, l_self=0.3, test_acc=0.975, ood_auroc=0.99, sel_p=1 / 3, sel_r=0.5),
]


def test_metrics_round_trip_preserves_order(tmp_path):
    path = tmp_path / "m.jsonl"
    with open(path, "w") as fh:
        for r in RECORDS:
            write_metrics(r, fh)
    assert read_metrics(path) == RECORDS


def test_metrics_line_has_exact_schema():
    obj = json.loads(RECORDS[1].to_json())
    assert list(obj) == ["v", "round", "epoch", "l_sup", "l_unsup", "l_self", "test_acc", "ood_auroc", "sel_p", "sel_r"]
    assert obj["v"] == 1
    assert '"sel_p":0.33333333333333331' in RECORDS[1].to_json()


@pytest.mark.parametrize("line", [
    '{"v":1,"round":0,"epoch":0,"l_sup":0,"l_unsup":0,"l_self":0,"test_acc":null,"ood_auroc":null,"sel_p":null}',
    '{"v":2,"round":0,"epoch":0,"l_sup":0,"l_unsup":0,"l_self":0,"test_acc":null,"ood_auroc":null,"sel_p":null,"sel_r":null}',
    '{"v":1,"round":0,"epoch":0,"l_sup":"x","l_unsup":0,"l_self":0,"test_acc":null,"ood_auroc":null,"sel_p":null,"sel_r":null}',
    '{"v":1,"round":0,"epoch":0,"l_sup":0,"l_unsup":0,"l_self":0,"test_acc":1.5,"ood_auroc":null,"sel_p":null,"sel_r":null}',
    'not json',
])
def test_schema_violations_rejected(tmp_path, line):
    path = tmp_path / "m.jsonl"
    path.write_text(RECORDS[0].to_json() + "\n" + line + "\n")
    with pytest.raises(MetricsFormatError) as err:
        read_metrics(path)
    assert err.value.line == 2
