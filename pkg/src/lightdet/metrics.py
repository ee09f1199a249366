"""Detection quality metrics: greedy matching, PR curves, AP, and a timing bench.

Matching is class-aware and greedy in confidence order (ties broken by detection
index): each detection takes the unmatched ground truth of its class with the
highest IoU at or above the threshold, ties broken by ground-truth index. AP
integrates the all-points precision envelope over recall. Classes that have no
ground truth anywhere are reported as skipped, not averaged.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box, corners_np, iou_matrix


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    confidence: float


@dataclass
class MetricReport:
    map50: float
    ap_per_class: dict[int, float]
    skipped_classes: list[int]
    precision: float
    recall: float
    best_conf: float
    per_class_counts: dict[int, int] = field(default_factory=dict)


def _det_corners(dets: list[Detection]) -> np.ndarray:
    if not dets:
        return np.zeros((0, 4))
    return corners_np(np.stack([d.box.array() for d in dets]))


def match_image(dets: list[Detection], gts: list[tuple[int, Box]],
                iou_thr: float = 0.5) -> list[bool]:
    """True/False per detection, in the given order after confidence sorting.

    Detections must already be sorted by descending confidence; this matcher
    only applies the greedy rule.
    """
    taken = [False] * len(gts)
    flags: list[bool] = []
    det_xy = _det_corners(dets)
    gt_xy = corners_np(np.stack([g[1].array() for g in gts])) if gts else np.zeros((0, 4))
    ious = iou_matrix(det_xy, gt_xy) if len(dets) and len(gts) else np.zeros((len(dets), len(gts)))
    for i, det in enumerate(dets):
        best_j, best_iou = -1, 0.0
        for j, (cls, _) in enumerate(gts):
            if taken[j] or cls != det.class_id:
                continue
            # strictly-greater keeps the earliest gt on equal IoU
            if ious[i, j] >= iou_thr and ious[i, j] > best_iou:
                best_j, best_iou = j, ious[i, j]
        if best_j >= 0:
            taken[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def sort_detections(dets: list[Detection]) -> list[Detection]:
    return [d for _, d in sorted(enumerate(dets), key=lambda t: (-t[1].confidence, t[0]))]


def ap_from_points(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-points interpolation: integrate the right-max precision envelope."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def ap_for_class(dets_per_image: list[list[Detection]],
                 gts_per_image: list[list[tuple[int, Box]]],
                 class_id: int, iou_thr: float = 0.5):
    """(ap, confidences, tp_flags, n_gt); ap is None when the class has no GT."""
    n_gt = sum(1 for gts in gts_per_image for cls, _ in gts if cls == class_id)
    confs: list[float] = []
    flags: list[bool] = []
    for dets, gts in zip(dets_per_image, gts_per_image):
        cls_dets = sort_detections([d for d in dets if d.class_id == class_id])
        cls_gts = [g for g in gts if g[0] == class_id]
        for det, flag in zip(cls_dets, match_image(cls_dets, cls_gts, iou_thr)):
            confs.append(det.confidence)
            flags.append(flag)
    if n_gt == 0:
        return None, np.array(confs), np.array(flags, dtype=bool), 0
    order = np.lexsort((np.arange(len(confs)), -np.asarray(confs, dtype=np.float64))) \
        if confs else np.array([], dtype=int)
    tp = np.asarray(flags, dtype=np.float64)[order] if confs else np.array([])
    if tp.size == 0:
        return 0.0, np.array([]), np.array([], dtype=bool), n_gt
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)
    ap = ap_from_points(recall, precision)
    return ap, np.asarray(confs, dtype=np.float64)[order], tp.astype(bool), n_gt


def evaluate(dets_per_image: list[list[Detection]],
             gts_per_image: list[list[tuple[int, Box]]],
             num_classes: int, iou_thr: float = 0.5) -> MetricReport:
    if not any(gts for gts in gts_per_image):
        raise ValueError("evaluation needs at least one ground-truth box")
    aps: dict[int, float] = {}
    skipped: list[int] = []
    counts: dict[int, int] = {}
    pooled_conf: list[np.ndarray] = []
    pooled_tp: list[np.ndarray] = []
    total_gt = 0
    for cls in range(num_classes):
        ap, confs, tps, n_gt = ap_for_class(dets_per_image, gts_per_image, cls, iou_thr)
        counts[cls] = n_gt
        if ap is None:
            skipped.append(cls)
            continue
        aps[cls] = ap
        pooled_conf.append(confs)
        pooled_tp.append(tps)
        total_gt += n_gt

    map50 = float(np.mean(list(aps.values()))) if aps else 0.0

    # headline precision/recall: the confidence cut that maximizes F1 on the
    # pooled curve across the evaluated classes
    conf = np.concatenate(pooled_conf) if pooled_conf else np.array([])
    tp = np.concatenate(pooled_tp) if pooled_tp else np.array([], dtype=bool)
    if conf.size == 0 or total_gt == 0:
        return MetricReport(map50, aps, skipped, 0.0, 0.0, 0.0, counts)
    order = np.argsort(-conf, kind="stable")
    tp_sorted = tp[order].astype(np.float64)
    cum_tp = np.cumsum(tp_sorted)
    cum_fp = np.cumsum(1.0 - tp_sorted)
    precision = cum_tp / (cum_tp + cum_fp)
    recall = cum_tp / total_gt
    f1 = 2 * precision * recall / np.maximum(precision + recall, 1e-12)
    best = int(np.argmax(f1))
    return MetricReport(map50, aps, skipped, float(precision[best]),
                        float(recall[best]), float(conf[order][best]), counts)


def oracle_ap_sweep(dets_per_image: list[list[Detection]],
                    gts_per_image: list[list[tuple[int, Box]]],
                    class_id: int, iou_thr: float = 0.5):
    """Brute-force reference: re-match the whole dataset at every confidence cut.

    Never reuses the incremental bookkeeping; each threshold starts from nothing.
    Returns None when the class has no ground truth.
    """
    n_gt = sum(1 for gts in gts_per_image for cls, _ in gts if cls == class_id)
    if n_gt == 0:
        return None
    all_confs = sorted({d.confidence for dets in dets_per_image for d in dets
                        if d.class_id == class_id}, reverse=True)
    recalls, precisions = [], []
    for thr in all_confs:
        tp_total, det_total = 0, 0
        for dets, gts in zip(dets_per_image, gts_per_image):
            keep = sort_detections([d for d in dets
                                    if d.class_id == class_id and d.confidence >= thr])
            cls_gts = [g for g in gts if g[0] == class_id]
            flags = match_image(keep, cls_gts, iou_thr)
            tp_total += sum(flags)
            det_total += len(flags)
        if det_total == 0:
            continue
        recalls.append(tp_total / n_gt)
        precisions.append(tp_total / det_total)
    if not recalls:
        return 0.0
    return ap_from_points(np.asarray(recalls), np.asarray(precisions))


def fps_bench(fn, warmup: int = 3, reps: int = 10) -> dict[str, float]:
    """Latency of fn() in milliseconds plus throughput; wall-clock, single feed."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    arr = np.asarray(times)
    mean = float(arr.mean())
    return {
        "mean_ms": mean,
        "p95_ms": float(np.percentile(arr, 95)),
        "fps": 1e3 / mean if mean > 0 else float("inf"),
    }
