import itertools

import numpy as np
import pytest

from mtspine import datagen, evalkit, nets
from mtspine.evalkit import EvalReport, confusion, sensitivity_specificity, vote_vertebra

N, B, M, L = 0, 1, 2, 3


def test_confusion_examples():
    m = confusion([0, 0, 1, 2, 3], [0, 1, 1, 2, 2], 4)
    expected = np.zeros((4, 4), int)
    for i, j in ((0, 0), (0, 1), (1, 1), (2, 2), (3, 2)):
        expected[i, j] = 1
    np.testing.assert_array_equal(m, expected)
    np.testing.assert_array_equal(confusion([], [], 4), np.zeros((4, 4)))
    np.testing.assert_array_equal(confusion([0, 1, 2, 3], [0, 1, 2, 3], 4), np.eye(4))


def test_confusion_errors():
    with pytest.raises(ValueError):
        confusion([0, 1], [0], 4)
    with pytest.raises(ValueError):
        confusion([4], [0], 4)


def test_confusion_row_sums_match_truth_counts():
    rng = np.random.default_rng(0)
    truth, pred = rng.integers(4, size=300), rng.integers(4, size=300)
    m = confusion(truth, pred, 4)
    np.testing.assert_array_equal(m.sum(axis=1), np.bincount(truth, minlength=4))
    assert m.sum() == 300


def test_se_sp_examples():
    se, sp = sensitivity_specificity(np.eye(4) * 7)
    np.testing.assert_array_equal(se, 1.0)
    np.testing.assert_array_equal(sp, 1.0)
    se, sp = sensitivity_specificity([[50, 10], [5, 35]])
    assert se[0] == pytest.approx(50 / 60) and sp[0] == pytest.approx(0.875)
    with pytest.raises(ValueError):
        sensitivity_specificity(np.zeros((0, 0)))


def test_absent_class_se_is_undefined():
    m = confusion([0, 0, 1, 3], [0, 2, 1, 3], 4)
    se, sp = sensitivity_specificity(m)
    assert np.isnan(se[2]) and not np.isnan(sp[2])
    assert sp[2] == pytest.approx(3 / 4)
    rep = EvalReport.from_labels("slice", [0, 0, 1, 3], [0, 2, 1, 3])
    assert rep.metrics_csv().splitlines()[1].split(",")[4] == "NA"


def test_binary_sp0_equals_se1():
    rng = np.random.default_rng(1)
    for _ in range(500):
        m = rng.integers(0, 20, size=(2, 2))  # includes absent classes: both sides NaN
        se, sp = sensitivity_specificity(m)
        np.testing.assert_array_equal(sp[0], se[1])


def test_se_sp_match_one_vs_rest_definition():
    rng = np.random.default_rng(2)
    m = rng.integers(1, 30, size=(4, 4))
    se, sp = sensitivity_specificity(m)
    for c in range(4):
        rest = [i for i in range(4) if i != c]
        assert se[c] == pytest.approx(m[c, c] / m[c].sum())
        assert sp[c] == pytest.approx(m[np.ix_(rest, rest)].sum() / m[rest].sum())


def _p(*v):
    return np.array(v, dtype=float)


def test_vote_examples():
    flat = _p(0.25, 0.25, 0.25, 0.25)
    assert vote_vertebra([(c, flat) for c in (N, N, B, B, B)], 2) == B
    for t in range(5):
        assert vote_vertebra([(N, flat)] * 4, t) == N
    slices = [(B, _p(0, 0.6, 0, 0.4)), (B, _p(0, 0.6, 0, 0.4)),
              (L, _p(0, 0.1, 0, 0.9)), (L, _p(0, 0.1, 0, 0.9))]
    assert vote_vertebra(slices, 1) == L
    # count equal, probabilities equal: fixed order
    assert vote_vertebra([(M, flat), (L, flat)], 0) == M
    with pytest.raises(ValueError):
        vote_vertebra([], 1)
    with pytest.raises(ValueError):
        vote_vertebra([(N, flat)], -1)


def brute_force_vote(classes, probs, t):
    best, best_key = N, None
    for order, c in enumerate((B, M, L)):
        count = sum(1 for x in classes if x == c)
        if count <= t:
            continue
        key = (count, sum(float(p[c]) for p in probs), -order)
        if best_key is None or key > best_key:
            best, best_key = c, key
    return best


def test_vote_matches_exhaustive_oracle():
    rng = np.random.default_rng(3)
    checked = 0
    for n in range(1, 7):
        for classes in itertools.product(range(4), repeat=n):
            # dyadic probabilities: the oracle's plain sums are exact too
            probs = rng.integers(0, 16, size=(n, 4)) / 16.0
            if rng.random() < 0.2:
                probs[:] = 0.25
            for t in range(n + 1):
                got = vote_vertebra(list(zip(classes, probs)), t)
                assert got == brute_force_vote(classes, probs, t), (classes, probs, t)
                checked += 1
    assert checked > 30000


def test_vote_permutation_invariant():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        classes = rng.integers(4, size=n)
        probs = rng.dirichlet(np.ones(4), size=n)
        t = int(rng.integers(0, 3))
        ref = vote_vertebra(list(zip(classes, probs)), t)
        perm = rng.permutation(n)
        assert vote_vertebra(list(zip(classes[perm], probs[perm])), t) == ref


def test_majority_label_and_grouping():
    assert evalkit.majority_label([2, 2, 1]) == 2
    assert evalkit.majority_label([3, 1, 3, 1]) == 1
    samples = _samples([(0, "a", "v1"), (0, "a", "v2"), (0, "a", "v1"), (0, "b", "v1")])
    assert evalkit.group_vertebrae(samples) == {("a", "v1"): [0, 2], ("a", "v2"): [1], ("b", "v1"): [3]}


def _samples(rows):
    img = np.zeros((8, 8), np.float32)
    return [datagen.SliceSample(img, bq, 0, p, v) for bq, p, v in rows]


def test_single_slice_dataset_vertebra_equals_slice():
    samples = _samples([(2, "p", "v")])
    for pred in range(4):
        probs = np.eye(4)[[pred]]
        s, v = evalkit.evaluate_predictions(samples, [pred], probs, threshold=0)
        assert np.array_equal(s.matrix, v.matrix)
        np.testing.assert_array_equal(s.se, v.se)
        np.testing.assert_array_equal(s.sp, v.sp)


def simulate(seed, accuracy=0.9, per_vertebra=5, vertebrae=200):
    rng = np.random.default_rng(seed)
    truth = rng.integers(4, size=vertebrae)
    rows, pred = [], []
    for i, c in enumerate(truth):
        for _ in range(per_vertebra):
            rows.append((int(c), f"p{i // 4}", f"v{i}"))
            wrong = rng.random() >= accuracy
            pred.append(int((c + rng.integers(1, 4)) % 4) if wrong else int(c))
    probs = np.eye(4)[pred] * 0.7 + 0.075
    return _samples(rows), np.array(pred), probs


def test_voting_denoises_accurate_slices():
    for seed in range(5):
        samples, pred, probs = simulate(seed)
        s, v = evalkit.evaluate_predictions(samples, pred, probs, threshold=1)
        assert s.accuracy >= 0.87
        assert v.accuracy >= s.accuracy


def test_evaluate_predictions_is_deterministic():
    samples, pred, probs = simulate(9)
    a = evalkit.evaluate_predictions(samples, pred, probs)
    b = evalkit.evaluate_predictions(samples, pred, probs)
    assert a[0].equals(b[0]) and a[1].equals(b[1])


def test_report_csv_layout_and_confusion_text():
    rep = EvalReport.from_labels("slice", [0, 1, 2, 3, 3], [0, 1, 2, 3, 2])
    header, row = rep.metrics_csv().splitlines()
    assert header == "SE_N,SP_N,SE_B,SP_B,SE_M,SP_M,SE_L,SP_L"
    assert row.split(",")[6] == "0.500000"
    assert rep.accuracy == pytest.approx(0.8)
    lines = rep.confusion_text().splitlines()
    assert lines[0].split() == ["truth\\pred", "N", "B", "M", "L"]
    assert lines[4].split() == ["L", "0", "0", "1", "1"]
    pi = EvalReport.from_labels("slice", [0, 1, 2], [0, 1, 2], evalkit.PI_SHORT)
    assert pi.columns() == ["SE_N", "SP_N", "SE_U", "SP_U", "SE_B", "SP_B"]


def test_evaluate_network_end_to_end_shapes():
    counts = ((2, 0, 0), (1, 1, 0), (1, 0, 1), (0, 1, 1))
    samples = datagen.generate_phantoms(datagen.PhantomSpec(seed=5, counts=counts, slices_per_vertebra=2))
    net = nets.build(nets.ModelConfig(), seed=0)
    s, v, pi = evalkit.evaluate(net, samples, threshold=1)
    assert s.n == len(samples) and v.n == len(evalkit.group_vertebrae(samples)) and pi.n == len(samples)
    again = evalkit.evaluate(net, samples, threshold=1)
    assert s.equals(again[0]) and v.equals(again[1]) and pi.equals(again[2])
