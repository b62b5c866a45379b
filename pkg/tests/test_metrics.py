import json
import math

import numpy as np
import pytest

from pfhin.errors import DataError, NumericError
from pfhin.metrics import (MetricsReport, ari, f1_scores, group_auc, nmi,
                           read_report, roc_auc, write_report)


# ---------------------------------------------------------------------------
# ROC-AUC
# ---------------------------------------------------------------------------

def _auc_pair_loop(scores, labels):
    # quadratic reference: every (positive, negative) pair scored directly
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


def test_auc_perfect_separation():
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0


def test_auc_hand_cases():
    assert roc_auc([0.9, 0.1, 0.8, 0.2], [1, 0, 1, 0]) == 1.0
    # swap one positive below one negative: 3 of 4 pairs concordant
    assert roc_auc([0.9, 0.1, 0.2, 0.8], [1, 0, 1, 0]) == 0.75


def test_auc_all_ties_is_half():
    assert roc_auc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5


def test_auc_single_class_rejected():
    with pytest.raises(DataError):
        roc_auc([0.1, 0.2], [1, 1])


def test_auc_matches_pair_loop_battery():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(5, 40))
        scores = rng.integers(0, 6, size=n).astype(float)  # forces ties
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        want = _auc_pair_loop(scores.tolist(), labels.tolist())
        assert abs(roc_auc(scores, labels) - want) < 1e-10


def test_auc_monotone_transform_invariant():
    rng = np.random.default_rng(3)
    scores = rng.normal(size=30)
    labels = rng.integers(0, 2, size=30)
    labels[0], labels[1] = 0, 1
    a = roc_auc(scores, labels)
    assert abs(roc_auc(np.exp(scores), labels) - a) < 1e-12


def test_auc_reversal_identity():
    rng = np.random.default_rng(4)
    scores = rng.normal(size=25)            # continuous, no ties
    labels = rng.integers(0, 2, size=25)
    labels[0], labels[1] = 0, 1
    assert abs(roc_auc(scores, labels) + roc_auc(-scores, labels) - 1.0) < 1e-12


# ---------------------------------------------------------------------------
# group AUC
# ---------------------------------------------------------------------------

def test_group_auc_indicator_similarity_is_one():
    groups = np.array([0, 0, 1, 1, 2, 2])
    m = len(groups)
    sim = (groups[:, None] == groups[None, :]).astype(float)
    np.fill_diagonal(sim, 0.0)
    assert group_auc(sim, list(range(m)), groups) == 1.0


def test_group_auc_four_node_hand_case():
    # groups {0,1} and {2,3}; per query the correct-pair fractions are
    # 1, 1, 1, 1/2 so the mean is 0.875
    sim = np.array([[0.0, 0.9, 0.8, 0.1],
                    [0.9, 0.0, 0.5, 0.4],
                    [0.2, 0.3, 0.0, 0.6],
                    [0.7, 0.5, 0.6, 0.0]])
    got = group_auc(sim, [0, 1, 2, 3], [0, 0, 1, 1])
    assert abs(got - 0.875) < 1e-12


def _group_auc_triple_loop(sim, groups):
    m = len(groups)
    per = []
    for i in range(m):
        wins = 0.0
        pairs = 0
        for j in range(m):
            if j == i or groups[j] != groups[i]:
                continue
            for k in range(m):
                if k == i or groups[k] == groups[i]:
                    continue
                pairs += 1
                if sim[i, j] > sim[i, k]:
                    wins += 1.0
                elif sim[i, j] == sim[i, k]:
                    wins += 0.5
        if pairs:
            per.append(wins / pairs)
    return float(np.mean(per))


def test_group_auc_matches_triple_enumeration():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(6, 14))
        groups = rng.integers(0, 3, size=m)
        while len(np.unique(groups)) < 2:
            groups = rng.integers(0, 3, size=m)
        sim = rng.integers(0, 5, size=(m, m)).astype(float)  # with ties
        want = _group_auc_triple_loop(sim, groups)
        import warnings as w
        with w.catch_warnings():
            w.simplefilter("ignore", RuntimeWarning)  # singleton groups ok
            got = group_auc(sim, list(range(m)), groups)
        assert abs(got - want) < 1e-10


def test_group_auc_null_is_half():
    groups = np.repeat([0, 1], 50)
    vals = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        sim = rng.normal(size=(100, 100))
        sim = (sim + sim.T) / 2
        vals.append(group_auc(sim, list(range(100)), groups))
    assert abs(np.mean(vals) - 0.5) < 0.05


def test_group_auc_singleton_group_skipped_with_warning():
    sim = np.array([[0.0, 0.5, 0.4],
                    [0.5, 0.0, 0.3],
                    [0.4, 0.3, 0.0]])
    groups = [0, 0, 1]   # node 2 has no same-group candidate
    with pytest.warns(RuntimeWarning, match="skipped"):
        got = group_auc(sim, [0, 1, 2], groups)
    # queries 0 and 1 remain: sim(0,1)=.5 > sim(0,2)=.4; sim(1,0)=.5 > sim(1,2)=.3
    assert got == 1.0


def test_group_auc_reorder_invariance():
    rng = np.random.default_rng(8)
    m = 12
    sim = rng.normal(size=(m, m))
    sim = (sim + sim.T) / 2
    groups = rng.integers(0, 3, size=m)
    groups[:3] = [0, 1, 2]
    base = group_auc(sim, list(range(m)), groups)
    perm = rng.permutation(m)
    got = group_auc(sim[np.ix_(perm, perm)], list(range(m)), groups[perm])
    assert abs(got - base) < 1e-12


def test_group_auc_needs_two_groups():
    with pytest.raises(DataError):
        group_auc(np.zeros((3, 3)), [0, 1, 2], [1, 1, 1])


# ---------------------------------------------------------------------------
# F1
# ---------------------------------------------------------------------------

def test_f1_exact_match_is_one():
    micro, macro, binary = f1_scores([0, 1, 2, 1], [0, 1, 2, 1])
    assert micro == 1.0 and macro == 1.0 and binary == 1.0


def test_f1_binary_hand_case():
    # one true positive, one false positive, one false negative
    micro, macro, binary = f1_scores([1, 1, 0], [1, 0, 1])
    assert binary == 0.5


def test_f1_three_class_confusion_oracle():
    truth = [0, 0, 0, 1, 1, 2, 2, 2, 2]
    pred = [0, 1, 0, 1, 2, 2, 2, 0, 2]
    # class 0: tp 2 fp 1 fn 1 -> 2/3; class 1: tp 1 fp 1 fn 1 -> 1/2
    # class 2: tp 3 fp 1 fn 1 -> 3/4; micro = 12/18
    micro, macro, binary = f1_scores(pred, truth)
    assert abs(micro - 2 / 3) < 1e-12
    assert abs(macro - (2 / 3 + 0.5 + 0.75) / 3) < 1e-12
    assert abs(binary - 0.5) < 1e-12


def test_f1_micro_equals_accuracy():
    rng = np.random.default_rng(0)
    truth = rng.integers(0, 4, size=60)
    pred = rng.integers(0, 4, size=60)
    micro, _, _ = f1_scores(pred, truth)
    assert abs(micro - np.mean(pred == truth)) < 1e-12


def test_f1_macro_skips_absent_classes():
    # only classes 0 and 2 appear anywhere; macro averages two classes
    micro, macro, _ = f1_scores([0, 2, 2], [0, 2, 0])
    # class 0: tp 1 fp 0 fn 1 -> 2/3; class 2: tp 1 fp 1 fn 0 -> 2/3
    assert abs(macro - 2 / 3) < 1e-12


def test_f1_empty_rejected():
    with pytest.raises(DataError):
        f1_scores([], [])


# ---------------------------------------------------------------------------
# NMI / ARI
# ---------------------------------------------------------------------------

def test_nmi_ari_identical_up_to_relabeling():
    a = [0, 0, 1, 1, 2, 2]
    b = [5, 5, 9, 9, 7, 7]
    assert nmi(a, b) == 1.0 or abs(nmi(a, b) - 1.0) < 1e-12
    assert abs(ari(a, b) - 1.0) < 1e-12


def test_ari_singletons_vs_lump_is_zero():
    assert ari([0, 1, 2, 3], [0, 0, 0, 0]) == 0.0


def test_nmi_degenerate_conventions():
    assert nmi([0, 0, 0], [1, 1, 1]) == 1.0     # identical trivial partitions
    assert nmi([0, 0, 0], [0, 1, 1]) == 0.0     # one trivial, one not


def _nmi_joint_entropy_oracle(a, b):
    # independent route: I = H(A) + H(B) - H(A,B)
    from collections import Counter

    def entropy(labels):
        counts = np.array(list(Counter(labels).values()), dtype=float)
        p = counts / counts.sum()
        return float(-(p * np.log(p)).sum())
    joint = list(zip(a, b))
    ha, hb = entropy(a), entropy(b)
    info = ha + hb - entropy(joint)
    return info / math.sqrt(ha * hb)


def _ari_pair_loop_oracle(a, b):
    n = len(a)
    same_both = same_a = same_b = 0
    for i in range(n):
        for j in range(i + 1, n):
            ia = a[i] == a[j]
            ib = b[i] == b[j]
            same_a += ia
            same_b += ib
            same_both += ia and ib
    total = n * (n - 1) / 2
    expected = same_a * same_b / total
    max_index = 0.5 * (same_a + same_b)
    return (same_both - expected) / (max_index - expected)


def test_nmi_ari_random_partitions_match_oracles():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        a = rng.integers(0, 4, size=30).tolist()
        b = rng.integers(0, 3, size=30).tolist()
        if len(set(a)) < 2 or len(set(b)) < 2:
            continue
        assert abs(nmi(a, b) - _nmi_joint_entropy_oracle(a, b)) < 1e-10
        assert abs(ari(a, b) - _ari_pair_loop_oracle(a, b)) < 1e-10


def test_nmi_ari_label_permutation_invariance():
    rng = np.random.default_rng(2)
    a = rng.integers(0, 4, size=40)
    b = rng.integers(0, 4, size=40)
    remap = {0: 3, 1: 0, 2: 2, 3: 1}
    a2 = np.array([remap[x] for x in a])
    assert abs(nmi(a, b) - nmi(a2, b)) < 1e-12
    assert abs(ari(a, b) - ari(a2, b)) < 1e-12


def test_partition_length_validation():
    with pytest.raises(DataError):
        nmi([0], [1])
    with pytest.raises(DataError):
        ari([0, 1], [0, 1, 2])


# ---------------------------------------------------------------------------
# report file
# ---------------------------------------------------------------------------

def test_report_round_trip(tmp_path):
    rep = MetricsReport(task="link", metrics={"auc": 0.91},
                        config_digest="abc123", seed=7,
                        runtime_seconds=1.25)
    path = tmp_path / "report.json"
    write_report(path, rep)
    back = read_report(path)
    assert back == rep
    raw = json.loads(path.read_text())
    assert raw["task"] == "link" and raw["metrics"]["auc"] == 0.91


def test_report_range_validation(tmp_path):
    bad = MetricsReport(task="link", metrics={"auc": 1.5},
                        config_digest="x", seed=0, runtime_seconds=0.0)
    with pytest.raises(NumericError):
        write_report(tmp_path / "r.json", bad)
    neg_ari = MetricsReport(task="cluster", metrics={"ari": -0.2},
                            config_digest="x", seed=0, runtime_seconds=0.0)
    write_report(tmp_path / "r2.json", neg_ari)   # valid: ARI may be negative
    nonfinite = MetricsReport(task="link", metrics={"auc": float("nan")},
                              config_digest="x", seed=0, runtime_seconds=0.0)
    with pytest.raises(NumericError):
        write_report(tmp_path / "r3.json", nonfinite)
