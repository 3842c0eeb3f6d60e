"""
Segmentation evaluation metrics against ground truth, all computed from the
contingency table: PR (Rand) index, GCE*, VoI, PRI and pair F-measure.
"""

import logging
from typing import Sequence

import numpy as np
from scipy.special import xlogy

from app.errors import DimensionMismatchError, EmptyEnsembleError, UndefinedMetricError
from app.models import MetricsReport
from app.services.contingency import ContingencyTable, contingency_table
from app.services.fusion import gce_star

logger = logging.getLogger(__name__)


def _pairs(values) -> int:
    values = np.asarray(values, dtype=np.int64)
    return int((values * (values - 1) // 2).sum())


def _pair_counts(table: ContingencyTable):
    """(total pairs, same in both, same in rows, same in cols) as exact integers."""
    n = table.n
    return n * (n - 1) // 2, _pairs(table.counts), _pairs(table.row_sizes), _pairs(table.col_sizes)


def pr_index(seg_aut, seg_gt) -> float:
    """Fraction of pixel pairs on which both maps agree (same/same or different/different)."""
    table = contingency_table(seg_aut, seg_gt)
    if table.n < 2:
        raise UndefinedMetricError("PR index needs at least 2 pixels")
    total, both, same_aut, same_gt = _pair_counts(table)
    agreements = total + 2 * both - same_aut - same_gt
    return agreements / total


def voi(seg_aut, seg_gt) -> float:
    """Variation of information H(A) + H(B) - 2 I(A;B), in nats."""
    table = contingency_table(seg_aut, seg_gt)
    n = float(table.n)
    joint = table.counts / n
    p_a, p_b = table.row_sizes / n, table.col_sizes / n
    h_a = -xlogy(p_a, p_a).sum()
    h_b = -xlogy(p_b, p_b).sum()
    h_ab = -xlogy(joint, joint).sum()
    # I = H(A) + H(B) - H(A,B)  =>  VoI = 2 H(A,B) - H(A) - H(B)
    return max(float(2.0 * h_ab - h_a - h_b), 0.0)


def pri(seg_aut, ground_truths: Sequence) -> float:
    """Probabilistic Rand index: mean pair agreement over a set of ground truths."""
    if len(ground_truths) == 0:
        raise EmptyEnsembleError("PRI needs at least one ground-truth map")
    return float(np.mean([pr_index(seg_aut, gt) for gt in ground_truths]))


def f_measure(seg_aut, seg_gt) -> float:
    """Harmonic mean of pair precision and pair recall."""
    table = contingency_table(seg_aut, seg_gt)
    _, both, same_aut, same_gt = _pair_counts(table)
    if same_aut == 0 or same_gt == 0:
        raise UndefinedMetricError("F-measure undefined: a map has no same-label pixel pair")
    precision = both / same_aut
    recall = both / same_gt
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def evaluate(seg_aut, seg_gt) -> MetricsReport:
    """All metrics for one prediction against one ground truth."""
    shape_aut = np.shape(getattr(seg_aut, "labels", seg_aut))
    shape_gt = np.shape(getattr(seg_gt, "labels", seg_gt))
    if shape_aut != shape_gt:
        raise DimensionMismatchError(f"Prediction {shape_aut} and ground truth {shape_gt} differ in shape")

    pr = pr_index(seg_aut, seg_gt)
    return MetricsReport(
        pr=pr,
        gce=gce_star(seg_aut, seg_gt),
        voi=voi(seg_aut, seg_gt),
        pri=pri(seg_aut, [seg_gt]),
        f_measure=f_measure(seg_aut, seg_gt),
        n=int(np.prod(shape_aut)),
    )
