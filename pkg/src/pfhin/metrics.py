"""Evaluation arithmetic: ROC-AUC, grouped ranking AUC, F1 variants, NMI,
ARI, and the report file writer.

All functions are pure numpy on plain arrays. Ties in both AUC variants
count one half, the Mann-Whitney convention, which keeps
auc(s) + auc(-s) = 1 exact for tie-free scores.
"""

import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import DataError, NumericError


def roc_auc(scores, labels):
    """P(random positive outscores random negative), ties half-weighted."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DataError("roc_auc needs matching 1-d scores and labels")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("roc_auc needs both classes present")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _sim_matrix(sim, nodes):
    m = len(nodes)
    if callable(sim):
        mat = np.zeros((m, m))
        for i, u in enumerate(nodes):
            for j, v in enumerate(nodes):
                if i != j:
                    mat[i, j] = sim(u, v)
        return mat
    mat = np.asarray(sim, dtype=np.float64)
    if mat.shape != (m, m):
        raise DataError(f"similarity matrix {mat.shape} does not cover "
                        f"{m} nodes")
    return mat


def group_auc(sim, nodes, groups):
    """Mean over query nodes of the fraction of (same-group, other-group)
    candidate pairs ranked correctly by similarity.

    ``sim`` is an (m, m) matrix aligned with ``nodes`` or a callable
    sim(u, v).  Queries whose group has no other member are skipped with a
    warning.
    """
    nodes = list(nodes)
    groups = np.asarray(groups)
    m = len(nodes)
    if len(groups) != m:
        raise DataError("groups must align with nodes")
    if len(np.unique(groups)) < 2:
        raise DataError("group_auc needs at least 2 groups")
    mat = _sim_matrix(sim, nodes)
    per_query = []
    for i in range(m):
        others = np.arange(m) != i
        same = others & (groups == groups[i])
        diff = others & (groups != groups[i])
        if not same.any():
            warnings.warn(f"query node {nodes[i]} has no same-group "
                          "candidate: skipped", RuntimeWarning)
            continue
        diff_sorted = np.sort(mat[i, diff])
        s = mat[i, same]
        lo = np.searchsorted(diff_sorted, s, side="left")
        hi = np.searchsorted(diff_sorted, s, side="right")
        wins = lo.sum() + 0.5 * (hi - lo).sum()
        per_query.append(wins / (same.sum() * diff.sum()))
    if not per_query:
        raise DataError("group_auc: every query was skipped")
    return float(np.mean(per_query))


def f1_scores(pred, truth):
    """(micro, macro, binary) F1.

    Macro averages classes present in either argument; binary is the F1 of
    label 1 (0.0 when label 1 appears nowhere).
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if len(pred) == 0:
        raise DataError("f1_scores on empty input")
    if pred.shape != truth.shape:
        raise DataError("pred and truth must have the same length")
    classes = np.union1d(pred, truth)
    tp_all = 0
    fp_all = 0
    fn_all = 0
    per_class = {}
    for c in classes:
        tp = int(np.sum((pred == c) & (truth == c)))
        fp = int(np.sum((pred == c) & (truth != c)))
        fn = int(np.sum((pred != c) & (truth == c)))
        tp_all += tp
        fp_all += fp
        fn_all += fn
        denom = 2 * tp + fp + fn
        per_class[c] = 2 * tp / denom if denom else 0.0
    micro = 2 * tp_all / (2 * tp_all + fp_all + fn_all)
    macro = float(np.mean(list(per_class.values())))
    binary = float(per_class.get(1, 0.0))
    return float(micro), macro, binary


def _contingency(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise DataError("partition arrays must be equal-length 1-d, n >= 2")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    r = ai.max() + 1
    c = bi.max() + 1
    table = np.zeros((r, c), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def _entropy(counts, n):
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def nmi(a, b):
    """Mutual information over the geometric mean of the entropies.

    Degenerate single-cluster partitions: 1.0 when the two partitions are
    identical as partitions, else 0.0.
    """
    table = _contingency(a, b)
    n = table.sum()
    ha = _entropy(table.sum(axis=1), n)
    hb = _entropy(table.sum(axis=0), n)
    if ha == 0.0 or hb == 0.0:
        same = (table > 0).sum() == max(table.shape) \
            and table.shape[0] == table.shape[1]
        return 1.0 if same else 0.0
    pij = table / n
    pa = table.sum(axis=1) / n
    pb = table.sum(axis=0) / n
    mask = pij > 0
    info = (pij[mask] * np.log(pij[mask] / np.outer(pa, pb)[mask])).sum()
    return float(info / np.sqrt(ha * hb))


def ari(a, b):
    """Pair-counting adjusted Rand index in [-1, 1]."""
    table = _contingency(a, b)
    n = table.sum()

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_ij = comb2(table).sum()
    sum_a = comb2(table.sum(axis=1)).sum()
    sum_b = comb2(table.sum(axis=0)).sum()
    total = comb2(n)
    expected = sum_a * sum_b / total
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        # both partitions trivial in the same way; identical by construction
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


# ---------------------------------------------------------------------------
# report plumbing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsReport:
    task: str
    metrics: dict
    config_digest: str
    seed: int
    runtime_seconds: float


_SLOP = 1e-9


def _check_range(name, value):
    lo, hi = (-1.0, 1.0) if "ari" in name else (0.0, 1.0)
    if not (lo - _SLOP <= value <= hi + _SLOP):
        raise NumericError(f"metric '{name}' = {value} outside [{lo}, {hi}]")


def write_report(path, report):
    """Validate metric ranges and write the report as JSON."""
    for name, value in report.metrics.items():
        if not np.isfinite(value):
            raise NumericError(f"metric '{name}' is not finite: {value}")
        _check_range(name, float(value))
    payload = asdict(report)
    payload["metrics"] = {k: float(v) for k, v in report.metrics.items()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_report(path):
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return MetricsReport(**payload)
