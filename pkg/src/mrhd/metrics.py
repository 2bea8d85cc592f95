"""Evaluation metrics for moment retrieval and highlight detection.

Moment retrieval reports Recall@1 at IoU 0.5 and 0.7 plus mean average
precision over ten IoU thresholds (0.50 to 0.95 in steps of 0.05), with
the usual greedy protocol: predictions are consumed in score order and
each ground-truth window can satisfy at most one of them.

Highlight detection treats each annotator separately: a clip counts as
positive only at the top rating (4), average precision is computed over
the score-ranked clips, HIT@1 checks the single best-scored clip, and
annotators without any positive are skipped. The top-5 variant ranks
only the five best-scored clips and measures precision within that list.

All average precisions use the all-points interpolated integral.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import QuerySample
from .tensor import ContractError

MR_MAP_THRESHOLDS = tuple(round(0.50 + 0.05 * k, 2) for k in range(10))


@dataclass
class EvalReport:
    r1_050: float
    r1_070: float
    map_050: float
    map_075: float
    map_avg: float
    hd_map: float | None = None
    hit_at_1: float | None = None
    top5_map: float | None = None

    def to_dict(self) -> dict:
        out = {}
        for key in ("r1_050", "r1_070", "map_050", "map_075", "map_avg",
                    "hd_map", "hit_at_1", "top5_map"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# ---------------------------------------------------------------------------
# temporal IoU and recall


def temporal_iou(a, b) -> float:
    """Intersection over union of two (start, end) intervals in seconds."""
    s1, e1 = float(a[0]), float(a[1])
    s2, e2 = float(b[0]), float(b[1])
    if e1 <= s1 or e2 <= s2:
        raise ContractError(f"zero-length interval in IoU: {a} vs {b}")
    inter = max(0.0, min(e1, e2) - max(s1, s2))
    union = (e1 - s1) + (e2 - s2) - inter
    return inter / union


def recall_at_1(preds: list[list], gts: list[list], threshold: float) -> float:
    """Fraction of queries whose best-scored span clears the IoU threshold
    against any ground-truth window."""
    if len(preds) != len(gts):
        raise ContractError("recall_at_1 needs one prediction list per query")
    hits = 0
    for spans, windows in zip(preds, gts):
        if not spans:
            raise ContractError("recall_at_1 requires at least one prediction per query")
        if not windows:
            raise ContractError("recall_at_1 requires at least one ground truth per query")
        top = max(spans, key=lambda s: s[2])
        if any(temporal_iou(top[:2], w) >= threshold for w in windows):
            hits += 1
    return hits / len(preds)


# ---------------------------------------------------------------------------
# average precision


def ap_from_flags(tp_flags: list[bool], num_positives: int) -> float:
    """All-points interpolated AP from ranked true-positive flags."""
    if num_positives == 0:
        return 0.0
    tp = 0
    precisions, recalls = [], []
    for rank, flag in enumerate(tp_flags, start=1):
        if flag:
            tp += 1
        precisions.append(tp / rank)
        recalls.append(tp / num_positives)
    mrec = np.concatenate([[0.0], recalls, [1.0]])
    mpre = np.concatenate([[0.0], precisions, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    moved = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[moved + 1] - mrec[moved]) * mpre[moved + 1]))


def _query_ap(spans: list, windows: list, threshold: float) -> float:
    """Greedy score-order matching: each window satisfies one span at most."""
    order = sorted(range(len(spans)), key=lambda i: -spans[i][2])
    taken = [False] * len(windows)
    flags = []
    for i in order:
        best_iou, best_j = 0.0, -1
        for j, w in enumerate(windows):
            if taken[j]:
                continue
            iou = temporal_iou(spans[i][:2], w)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= threshold:
            taken[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return ap_from_flags(flags, len(windows))


def mr_map(
    preds: list[list], gts: list[list], thresholds=MR_MAP_THRESHOLDS
) -> tuple[float, float, float]:
    """(mAP at 0.5, mAP at 0.75, mean over all thresholds)."""
    per_threshold = []
    for t in thresholds:
        aps = [_query_ap(spans, windows, t) for spans, windows in zip(preds, gts)]
        per_threshold.append(float(np.mean(aps)) if aps else 0.0)
    by_thr = dict(zip(thresholds, per_threshold))
    return by_thr[0.5], by_thr[0.75], float(np.mean(per_threshold))


# ---------------------------------------------------------------------------
# highlight detection


def _annotator_columns(sample: QuerySample) -> np.ndarray:
    """(L, A) rating matrix; -1 marks unannotated entries."""
    return np.asarray(sample.saliency, dtype=np.int64)


def hd_metrics(pred_scores, sample: QuerySample) -> tuple[float, float] | None:
    """Per-query highlight quality: (mean AP, mean HIT@1) over annotators.

    An annotator counts only if they rated some clip 4; a query where no
    annotator did has no defined value and returns None.
    """
    scores = np.asarray(pred_scores, dtype=np.float64)
    ratings = _annotator_columns(sample)
    if scores.shape[0] != ratings.shape[0]:
        raise ContractError(
            f"score vector length {scores.shape[0]} != clip count {ratings.shape[0]}"
        )
    order = np.argsort(-scores, kind="stable")
    aps, hits = [], []
    for a in range(ratings.shape[1]):
        positives = ratings[:, a] == 4
        if not positives.any():
            continue
        flags = [bool(positives[i]) for i in order]
        aps.append(ap_from_flags(flags, int(positives.sum())))
        hits.append(1.0 if positives[order[0]] else 0.0)
    if not aps:
        return None
    return float(np.mean(aps)), float(np.mean(hits))


def top5_map(pred_scores, sample: QuerySample) -> float | None:
    """AP over the five best-scored clips only, positives counted within
    that list; annotators with no positive anywhere are skipped."""
    scores = np.asarray(pred_scores, dtype=np.float64)
    ratings = _annotator_columns(sample)
    k = min(5, scores.shape[0])
    order = np.argsort(-scores, kind="stable")[:k]
    aps = []
    for a in range(ratings.shape[1]):
        positives = ratings[:, a] == 4
        if not positives.any():
            continue
        flags = [bool(positives[i]) for i in order]
        aps.append(ap_from_flags(flags, sum(flags)))
    if not aps:
        return None
    return float(np.mean(aps))


# ---------------------------------------------------------------------------
# report assembly


def evaluate(results: list[tuple[QuerySample, list, list]]) -> EvalReport:
    """Build the full report from per-query (sample, spans, clip_scores).

    Spans are (start, end, score) triples; clip_scores is one float per
    clip. Queries are processed in qid order so the report is independent
    of input ordering.
    """
    results = sorted(results, key=lambda r: r[0].qid)
    preds = [spans for _, spans, _ in results]
    gts = [list(s.relevant_windows) for s, _, _ in results]
    m050, m075, mavg = mr_map(preds, gts)

    hd_pairs = [hd_metrics(scores, s) for s, _, scores in results]
    hd_pairs = [p for p in hd_pairs if p is not None]
    t5 = [top5_map(scores, s) for s, _, scores in results]
    t5 = [v for v in t5 if v is not None]

    return EvalReport(
        r1_050=recall_at_1(preds, gts, 0.5),
        r1_070=recall_at_1(preds, gts, 0.7),
        map_050=m050,
        map_075=m075,
        map_avg=mavg,
        hd_map=float(np.mean([p[0] for p in hd_pairs])) if hd_pairs else None,
        hit_at_1=float(np.mean([p[1] for p in hd_pairs])) if hd_pairs else None,
        top5_map=float(np.mean(t5)) if t5 else None,
    )
