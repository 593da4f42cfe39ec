"""Detection and retrieval metrics, weighted averages, forgetting."""

from __future__ import annotations

import numpy as np

from .detection import iou


def detection_pr(detections_per_image, gts_per_image, iou_threshold=0.5):
    """VOC-style AP and recall for single-class detection.

    Detections are ranked globally by (score desc, image index, x1, y1);
    each is a TP if it matches an unmatched ground-truth box with
    IoU >= threshold (highest IoU first). AP is the textbook
    sum of precision at true-positive ranks over the ground-truth count.
    """
    n_gt = sum(len(g) for g in gts_per_image)
    ranked = []
    for img_idx, dets in enumerate(detections_per_image):
        for d in dets:
            ranked.append((img_idx, d))
    ranked.sort(key=lambda t: (-t[1].score, t[0], t[1].x1, t[1].y1))
    matched = [set() for _ in gts_per_image]
    flags = []
    for img_idx, d in ranked:
        gts = gts_per_image[img_idx]
        best, best_iou = None, iou_threshold
        for gi, g in enumerate(gts):
            if gi in matched[img_idx]:
                continue
            v = iou(d, g)
            if v >= best_iou:
                best, best_iou = gi, v
        if best is not None:
            matched[img_idx].add(best)
            flags.append(True)
        else:
            flags.append(False)
    if n_gt == 0:
        return 0.0, 0.0
    tp = 0
    ap = 0.0
    for rank, hit in enumerate(flags, start=1):
        if hit:
            tp += 1
            ap += tp / rank
    recall = sum(len(m) for m in matched) / n_gt
    return ap / n_gt, recall


def retrieval_ap(correct_flags, num_relevant):
    """Textbook average precision over a ranked correctness list."""
    if num_relevant == 0:
        return 0.0
    hits = 0
    total = 0.0
    for rank, ok in enumerate(correct_flags, start=1):
        if ok:
            hits += 1
            total += hits / rank
    return total / num_relevant


def weighted_average(values, weights):
    """Gallery-size-weighted mean of per-domain metrics."""
    total = float(sum(weights))
    if total == 0:
        raise ZeroDivisionError("total gallery size is zero")
    return float(sum(v * w for v, w in zip(values, weights)) / total)


def forgetting_matrix(history, final, metric_keys):
    """history[i] = per-domain metrics right after domain i finished training;
    final[i] = the same metrics after the last domain. Returns
    F[i][metric] = history value - final value, for i < last domain.
    """
    out = []
    for i in range(len(history) - 1):
        if i >= len(final):
            raise RuntimeError(f"missing final evaluation for domain {i}")
        row = {}
        for key in metric_keys:
            row[key] = history[i][key] - final[i][key]
        out.append(row)
    return out
