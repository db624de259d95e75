"""Pseudo-label generation strategies.

* ``rps_sample``: random pseudo-label sampling over NMS groups. A group is
  kept with probability equal to its highest score, then one member is drawn
  with probability proportional to its score.
* ``hard_threshold``: NMS heads whose score clears a fixed threshold.
* ``top1_per_label``: the single best detection for every image label.

The random source only needs a ``random()`` method returning a uniform draw
in [0, 1); ``numpy.random.Generator`` qualifies, and so does a stub.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

from .geometry import Box
from .model import Detection, WeakLabels, class_view
from .suppression import DEFAULT_IOU_THR, nms, nms_group


class UniformSource(Protocol):
    def random(self) -> float: ...


@dataclass(frozen=True)
class PseudoLabel:
    class_id: int
    box: Box
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"pseudo-label score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class PseudoLabelSet:
    image_id: str
    labels: tuple[PseudoLabel, ...] = field(default=())
    strategy_tag: str = ""

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class RpsConfig:
    iou_thr: float = DEFAULT_IOU_THR
    sample_count: int = 1

    def __post_init__(self):
        if not 0.0 < self.iou_thr <= 1.0:
            raise ValueError(f"iou_thr must lie in (0, 1], got {self.iou_thr}")
        if self.sample_count < 1:
            raise ValueError(f"sample_count must be >= 1, got {self.sample_count}")


def _num_classes(dets: Sequence[Detection], labels: Optional[WeakLabels]) -> int:
    if labels is not None:
        return len(labels)
    return dets[0].num_classes if dets else 0


def _check_lengths(dets: Sequence[Detection], labels: Optional[WeakLabels]) -> None:
    if labels is None:
        return
    for i, d in enumerate(dets):
        if d.num_classes != len(labels):
            raise ValueError(
                f"detection {i} has {d.num_classes} class scores, labels have {len(labels)}"
            )


def _categorical(weights: Sequence[float], u: float) -> int:
    """Inverse-CDF pick: first position whose cumulative weight exceeds ``u``."""
    total = sum(weights)
    cum = 0.0
    for pos, w in enumerate(weights):
        cum += w / total
        if u < cum:
            return pos
    # u can exceed the rounded final cumulative sum by an ulp
    return max(pos for pos, w in enumerate(weights) if w > 0)


def rps_sample(
    dets: Sequence[Detection],
    labels: WeakLabels,
    cfg: RpsConfig,
    rng: UniformSource,
    image_id: str = "",
    strategy_tag: str = "rps",
) -> PseudoLabelSet:
    """Draw one pseudo-label set.

    Random draws happen in a fixed order: per labelled class (ascending), per
    group (head-score order), first the keep draw and, only if the group is
    kept, the member draw.
    """
    _check_lengths(dets, labels)
    out = []
    for k in range(len(labels)):
        if not labels[k]:
            continue
        boxes, scores = class_view(dets, k, len(labels))
        for group in nms_group(boxes, scores, cfg.iou_thr):
            group_scores = [scores[i] for i in group]
            if rng.random() > max(group_scores):
                continue
            if sum(group_scores) <= 0.0:
                # only reachable when the keep draw is exactly 0.0
                continue
            pick = group[_categorical(group_scores, rng.random())]
            out.append(PseudoLabel(k, boxes[pick], scores[pick]))
    return PseudoLabelSet(image_id, tuple(out), strategy_tag)


def rps_samples(
    dets: Sequence[Detection],
    labels: WeakLabels,
    cfg: RpsConfig,
    rng: UniformSource,
    image_id: str = "",
) -> list[PseudoLabelSet]:
    """``cfg.sample_count`` independent draws from the same random stream."""
    if cfg.sample_count == 1:
        return [rps_sample(dets, labels, cfg, rng, image_id)]
    return [
        rps_sample(dets, labels, cfg, rng, image_id, strategy_tag=f"rps/{b}")
        for b in range(cfg.sample_count)
    ]


def hard_threshold(
    dets: Sequence[Detection],
    labels: Optional[WeakLabels],
    tau: float,
    iou_thr: float = DEFAULT_IOU_THR,
    image_id: str = "",
    strategy_tag: str = "threshold",
) -> PseudoLabelSet:
    """Keep NMS heads scoring at least ``tau``.

    With ``labels=None`` every class is considered (plain semi-supervised
    mode); otherwise only classes present in the image label.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    _check_lengths(dets, labels)
    c_count = _num_classes(dets, labels)
    out = []
    for k in range(c_count):
        if labels is not None and not labels[k]:
            continue
        boxes, scores = class_view(dets, k, c_count)
        for i in nms(boxes, scores, iou_thr):
            if scores[i] >= tau:
                out.append(PseudoLabel(k, boxes[i], scores[i]))
    return PseudoLabelSet(image_id, tuple(out), strategy_tag)


def top1_per_label(
    dets: Sequence[Detection],
    labels: WeakLabels,
    image_id: str = "",
    strategy_tag: str = "top1",
) -> PseudoLabelSet:
    _check_lengths(dets, labels)
    out = []
    if dets:
        for k in labels.positive_classes():
            best = max(range(len(dets)), key=lambda i: (dets[i].class_scores[k], -i))
            out.append(PseudoLabel(k, dets[best].box, dets[best].class_scores[k]))
    return PseudoLabelSet(image_id, tuple(out), strategy_tag)
