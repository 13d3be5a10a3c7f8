import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vbnovelty.metrics import all_metrics, ami, ari, confusion_matrix, fmi, novelty_f1
from oracles import ari_pairs, fmi_pairs


def _mi(a, b):
    n = len(a)
    total = 0.0
    for x in set(a):
        for y in set(b):
            nxy = sum(1 for i in range(n) if a[i] == x and b[i] == y)
            if nxy:
                nx, ny = a.count(x), b.count(y)
                total += nxy / n * math.log(n * nxy / (nx * ny))
    return total


def _entropy(a):
    n = len(a)
    return -sum(a.count(x) / n * math.log(a.count(x) / n) for x in set(a))


def ami_by_permutation(a, b):
    """Expected MI as the average over every reordering of b, then max-normalized."""
    a, b = list(a), list(b)
    perms = list(itertools.permutations(b))
    emi = sum(_mi(a, list(p)) for p in perms) / len(perms)
    return (_mi(a, b) - emi) / (max(_entropy(a), _entropy(b)) - emi)


def test_identical():
    lab = [1, 1, 2, 3, 3, 3]
    assert ari(lab, lab) == 1.0 and ami(lab, lab) == 1.0 and fmi(lab, lab) == 1.0


def test_singletons_vs_one_cluster():
    assert ari(np.arange(10), np.zeros(10)) == 0.0


def test_two_by_two_contingency():
    # contingency [[2, 1], [1, 2]]
    a = [1, 1, 1, 2, 2, 2]
    b = [1, 1, 2, 1, 2, 2]
    assert confusion_matrix(a, b).counts.tolist() == [[2, 1], [1, 2]]
    assert ari(a, b) == pytest.approx(ari_pairs(a, b), abs=1e-12)
    assert fmi(a, b) == pytest.approx(fmi_pairs(a, b), abs=1e-12)
    # 2 pairs together in both, 6 together in each partition, 15 pairs overall
    assert ari(a, b) == pytest.approx((2 - 6 * 6 / 15) / (6 - 6 * 6 / 15), abs=1e-12)


def test_fmi_hand_case():
    a = [1, 1, 1, 2, 2]
    b = [1, 1, 2, 2, 2]
    # same-same pairs {0,1} and {3,4}; 4 same in a, 4 same in b
    assert fmi(a, b) == pytest.approx(2 / math.sqrt(4 * 4), abs=1e-12)
    assert fmi(a, b) == pytest.approx(fmi_pairs(a, b), abs=1e-12)


def test_pair_oracle_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 41))
        a = rng.integers(0, rng.integers(1, 6), n).tolist()
        b = rng.integers(0, rng.integers(1, 6), n).tolist()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            assert ari(a, b) == pytest.approx(ari_pairs(a, b), abs=1e-12)
            assert fmi(a, b) == pytest.approx(fmi_pairs(a, b), abs=1e-12)


@pytest.mark.parametrize("a,b", [([1, 1, 2, 2, 3], [1, 2, 2, 3, 3]),
                                 ([1, 1, 1, 2, 2, 2, 3], [1, 1, 2, 2, 2, 3, 3]),
                                 ([1, 2, 1, 2, 1, 2], [1, 1, 1, 2, 2, 3])])
def test_ami_matches_permutation_oracle(a, b):
    assert ami(a, b) == pytest.approx(ami_by_permutation(a, b), abs=1e-10)


def test_ami_null_mean():
    vals = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        vals.append(ami(rng.integers(0, 4, 200), rng.integers(0, 4, 200)))
    assert abs(np.mean(vals)) <= 0.05


@given(st.lists(st.integers(0, 4), min_size=2, max_size=40), st.randoms(use_true_random=False))
@settings(max_examples=60, deadline=None)
def test_relabeling_invariance(labels, rnd):
    other = [(v * 7 + 3) % 5 for v in labels][::-1]
    perm = list(range(5))
    rnd.shuffle(perm)
    relabeled = [perm[v] + 10 for v in labels]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for f in (ari, ami, fmi):
            assert f(relabeled, other) == pytest.approx(f(labels, other), abs=1e-12)
            assert f(other, relabeled) == pytest.approx(f(other, labels), abs=1e-12)


def test_fmi_symmetric():
    rng = np.random.default_rng(3)
    a, b = rng.integers(0, 3, 30), rng.integers(0, 4, 30)
    assert fmi(a, b) == pytest.approx(fmi(b, a), abs=1e-15)


def test_fmi_no_pairs_warns():
    with pytest.warns(RuntimeWarning, match="no co-clustered pairs"):
        assert fmi([1, 2, 3], [1, 1, 2]) == 0.0


@pytest.mark.parametrize("f", [ari, ami, fmi])
def test_empty_and_mismatch(f):
    with pytest.raises(ValueError):
        f([], [])
    with pytest.raises(ValueError):
        f([1, 2], [1])


def test_novelty_f1_cases():
    truth = [1, 1, 2, 3, 3]
    assert novelty_f1(truth, [1, 1, 2, 3, 4], [3], n_known=2) == 1.0
    assert novelty_f1(truth, [1, 1, 2, 2, 1], [3], n_known=2) == 0.0
    assert novelty_f1([1, 2, 2], [1, 2, 2], [3], n_known=2) is None
    # two flagged, one truly novel: precision 1/2, recall 1
    assert novelty_f1([1, 1, 3], [1, 5, 4], [3], n_known=2) == pytest.approx(2 / 3, abs=1e-15)


def test_confusion_margins():
    rng = np.random.default_rng(4)
    t, p = rng.integers(1, 5, 80), rng.integers(1, 8, 80)
    cm = confusion_matrix(t, p)
    np.testing.assert_array_equal(cm.counts.sum(axis=1), np.bincount(t)[cm.row_ids])
    np.testing.assert_array_equal(cm.counts.sum(axis=0), np.bincount(p)[cm.col_ids])
    ident = confusion_matrix(t, t).counts
    assert np.array_equal(ident, np.diag(np.diag(ident)))


def test_confusion_rows_use_names():
    cm = confusion_matrix([1, 2, 2], [1, 1, 3])
    rows = cm.to_rows({1: "a", 2: "b"}, {3: "novel"})
    assert rows == [["true\\pred", "1", "novel"], ["a", 1, 0], ["b", 1, 1]]


def test_all_metrics_keys():
    out = all_metrics([1, 1, 2, 3], [1, 1, 2, 3], novelty_ids=[3], n_known=2)
    assert out == {"ari": 1.0, "ami": 1.0, "fmi": 1.0, "novelty_f1": 1.0}
    assert "novelty_f1" not in all_metrics([1, 1, 2], [1, 1, 2])
