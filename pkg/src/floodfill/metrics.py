"""Segmentation evaluation: pairwise Rand counts, ARE, and variation of information.

Two independent routes produce the Rand pair counts. rand_counts_bruteforce
literally enumerates all voxel pairs (the test oracle, O(n^2));
rand_counts_fast derives the same counts from a contingency table with
binomial identities. They agree exactly.

Background: voxels whose *ground-truth* label is 0 are excluded from all pair
and entropy counts by default (unlabeled regions carry no signal); pass
include_background=True to count them. A prediction label of 0 on an included
voxel is treated as an ordinary segment id.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

_BRUTEFORCE_CAP = 8192


@dataclass
class RandCounts:
    """Pair counts over unordered voxel pairs i < j."""

    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total_pairs(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class ContingencyTable:
    """Sparse joint voxel counts over (prediction segment, truth segment)."""

    pred_ids: np.ndarray
    truth_ids: np.ndarray
    counts: np.ndarray  # joint count per (pred_ids[k], truth_ids[k]) cell
    pred_marginals: dict
    truth_marginals: dict
    total: int


@dataclass
class Scores:
    accuracy: float
    precision: float
    recall: float
    f1: float
    are: float
    voi_split: float
    voi_merge: float
    voi: float
    log_base: str = "e"
    degenerate: bool = False

    CSV_FIELDS = (
        "accuracy precision recall f1 are voi_split voi_merge voi log_base degenerate"
    ).split()

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def csv_row(self) -> str:
        return ",".join(repr(getattr(self, f)) if not isinstance(getattr(self, f), str)
                        else getattr(self, f) for f in self.CSV_FIELDS)


def _flatten_pair(pred: np.ndarray, truth: np.ndarray, include_background: bool):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ")
    s = pred.reshape(-1).astype(np.int64)
    g = truth.reshape(-1).astype(np.int64)
    if not include_background:
        keep = g != 0
        s, g = s[keep], g[keep]
    return s, g


def build_contingency(
    pred: np.ndarray, truth: np.ndarray, include_background: bool = False
) -> ContingencyTable:
    s, g = _flatten_pair(pred, truth, include_background)
    key = (s << 32) | g  # labels are u32, so the packing is collision-free
    cells, counts = np.unique(key, return_counts=True)
    pred_ids = (cells >> 32).astype(np.int64)
    truth_ids = (cells & 0xFFFFFFFF).astype(np.int64)
    pa, pc = np.unique(s, return_counts=True)
    ta, tc = np.unique(g, return_counts=True)
    return ContingencyTable(
        pred_ids=pred_ids,
        truth_ids=truth_ids,
        counts=counts.astype(np.int64),
        pred_marginals=dict(zip(pa.tolist(), pc.tolist())),
        truth_marginals=dict(zip(ta.tolist(), tc.tolist())),
        total=int(s.size),
    )


def rand_counts_bruteforce(
    pred: np.ndarray, truth: np.ndarray, include_background: bool = False
) -> RandCounts:
    """Literal enumeration of all voxel pairs. Test oracle; O(n^2)."""
    s, g = _flatten_pair(pred, truth, include_background)
    n = s.size
    if n > _BRUTEFORCE_CAP:
        raise ValueError(
            f"brute-force pair enumeration capped at {_BRUTEFORCE_CAP} voxels, got {n}"
        )
    iu, ju = np.triu_indices(n, k=1)
    same_s = s[iu] == s[ju]
    same_g = g[iu] == g[ju]
    tp = int(np.count_nonzero(same_s & same_g))
    fp = int(np.count_nonzero(same_s & ~same_g))
    fn = int(np.count_nonzero(~same_s & same_g))
    tn = int(np.count_nonzero(~same_s & ~same_g))
    return RandCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def _choose2(x) -> int:
    x = int(x)
    return x * (x - 1) // 2


def rand_counts_fast(
    pred: np.ndarray, truth: np.ndarray, include_background: bool = False
) -> RandCounts:
    """Pair counts from the contingency table; equals the brute force exactly.

    TP = sum_ij C(n_ij, 2); FP = sum_i C(a_i, 2) - TP;
    FN = sum_j C(b_j, 2) - TP; TN = C(n, 2) - TP - FP - FN.
    """
    table = build_contingency(pred, truth, include_background)
    tp = sum(_choose2(c) for c in table.counts.tolist())
    fp = sum(_choose2(a) for a in table.pred_marginals.values()) - tp
    fn = sum(_choose2(b) for b in table.truth_marginals.values()) - tp
    tn = _choose2(table.total) - tp - fp - fn
    return RandCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def rand_scores(counts: RandCounts) -> Scores:
    """Accuracy/precision/recall/F1/ARE from pair counts (VOI fields left 0).

    Degenerate denominators (no positive pairs on one side) yield 0 scores and
    set the degenerate flag instead of dividing by zero.
    """
    degenerate = False
    total = counts.total_pairs
    accuracy = (counts.tp + counts.tn) / total if total else 0.0
    if total == 0:
        degenerate = True
    if counts.tp + counts.fp > 0:
        precision = counts.tp / (counts.tp + counts.fp)
    else:
        precision, degenerate = 0.0, True
    if counts.tp + counts.fn > 0:
        recall = counts.tp / (counts.tp + counts.fn)
    else:
        recall, degenerate = 0.0, True
    if precision + recall > 0:
        f1 = 2.0 * precision * recall / (precision + recall)
    else:
        f1, degenerate = 0.0, True
    return Scores(
        accuracy=accuracy,
        precision=precision,
        recall=recall,
        f1=f1,
        are=1.0 - f1,
        voi_split=0.0,
        voi_merge=0.0,
        voi=0.0,
        degenerate=degenerate,
    )


def voi(
    pred: np.ndarray,
    truth: np.ndarray,
    log_base: str = "e",
    include_background: bool = False,
) -> tuple[float, float, float]:
    """Variation of information between the two partitions.

    voi_split = H(truth | pred): over-segmentation splits truth objects.
    voi_merge = H(pred | truth). Returns (voi_split, voi_merge, their sum),
    in nats for log_base "e" or bits for "2". 0*log(0) counts as 0.
    """
    if log_base not in ("e", "2"):
        raise ValueError("log_base must be 'e' or '2'")
    table = build_contingency(pred, truth, include_background)
    if table.total == 0:
        raise ValueError("no voxels to compare (empty volume after exclusion)")
    n = float(table.total)
    log = math.log if log_base == "e" else math.log2
    split = 0.0
    merge = 0.0
    for p_id, t_id, c in zip(
        table.pred_ids.tolist(), table.truth_ids.tolist(), table.counts.tolist()
    ):
        p_ij = c / n
        split += p_ij * log(table.pred_marginals[p_id] / n / p_ij) if p_ij else 0.0
        merge += p_ij * log(table.truth_marginals[t_id] / n / p_ij) if p_ij else 0.0
    # tiny negative rounding residue snaps to 0
    split = max(split, 0.0)
    merge = max(merge, 0.0)
    return split, merge, split + merge


def evaluate_segmentation(
    pred: np.ndarray,
    truth: np.ndarray,
    log_base: str = "e",
    include_background: bool = False,
) -> Scores:
    """Full score set: Rand metrics via the fast path plus VOI."""
    scores = rand_scores(rand_counts_fast(pred, truth, include_background))
    vs, vm, vt = voi(pred, truth, log_base, include_background)
    scores.voi_split, scores.voi_merge, scores.voi = vs, vm, vt
    scores.log_base = log_base
    return scores


def binary_confusion(
    logits: np.ndarray, labels: np.ndarray, threshold: float = 0.5
) -> tuple[int, int, int, int]:
    """Voxelwise (tp, fp, tn, fn) of sigmoid(logits) >= threshold vs labels >= 0.5."""
    if logits.shape != labels.shape:
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} differ")
    cut = math.log(threshold / (1.0 - threshold))
    pred = logits >= cut
    pos = labels >= 0.5
    tp = int(np.count_nonzero(pred & pos))
    fp = int(np.count_nonzero(pred & ~pos))
    tn = int(np.count_nonzero(~pred & ~pos))
    fn = int(np.count_nonzero(~pred & pos))
    return tp, fp, tn, fn


def confusion_scores(tp: int, fp: int, tn: int, fn: int):
    """(accuracy, precision, recall, f1) with degenerate cases scored 0."""
    total = tp + fp + tn + fn
    acc = (tp + tn) / total if total else 0.0
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return acc, prec, rec, f1


def voxelwise_training_metrics(
    pom_logits: np.ndarray, soft_labels: np.ndarray, threshold: float = 0.5
) -> tuple[float, float, float, float]:
    """Training-time (accuracy, precision, recall, f1) over voxels."""
    return confusion_scores(*binary_confusion(pom_logits, soft_labels, threshold))
