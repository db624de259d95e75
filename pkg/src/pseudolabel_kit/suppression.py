"""Greedy non-maximum suppression and its grouping variant.

``nms_group`` runs the same sweep as ``nms`` but, instead of discarding a
suppressed box, appends it to the group of the first head that suppressed it.
Groups therefore partition the input, and their heads are exactly the boxes
plain NMS keeps.
"""
from __future__ import annotations

import math
from typing import Sequence

from .geometry import Box, iou

DEFAULT_IOU_THR = 0.5


def _check_args(boxes: Sequence[Box], scores: Sequence[float], iou_thr: float) -> None:
    if len(boxes) != len(scores):
        raise ValueError(f"{len(boxes)} boxes but {len(scores)} scores")
    if not 0.0 < iou_thr <= 1.0:
        raise ValueError(f"iou_thr must lie in (0, 1], got {iou_thr}")
    if not all(math.isfinite(s) for s in scores):
        raise ValueError("scores must be finite")


def score_order(scores: Sequence[float]) -> list[int]:
    """Indices by descending score, ties by ascending index."""
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


def nms_group(
    boxes: Sequence[Box], scores: Sequence[float], iou_thr: float = DEFAULT_IOU_THR
) -> list[list[int]]:
    _check_args(boxes, scores, iou_thr)
    order = score_order(scores)
    assigned = [False] * len(boxes)
    groups = []
    for pos, head in enumerate(order):
        if assigned[head]:
            continue
        assigned[head] = True
        group = [head]
        head_box = boxes[head]
        for other in order[pos + 1:]:
            if not assigned[other] and iou(head_box, boxes[other]) >= iou_thr:
                assigned[other] = True
                group.append(other)
        groups.append(group)
    return groups


def nms(
    boxes: Sequence[Box], scores: Sequence[float], iou_thr: float = DEFAULT_IOU_THR
) -> list[int]:
    """Indices kept by greedy NMS, highest score first."""
    _check_args(boxes, scores, iou_thr)
    order = score_order(scores)
    suppressed = [False] * len(boxes)
    keep = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        for j in order[pos + 1:]:
            if not suppressed[j] and iou(boxes[i], boxes[j]) >= iou_thr:
                suppressed[j] = True
    return keep
