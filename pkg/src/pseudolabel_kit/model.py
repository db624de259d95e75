"""Dataset data model: weak labels, instances, detections and image records.

An image record without ``full_annotations`` belongs to the weakly-annotated
split; one with annotations (possibly an empty list) is fully annotated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .geometry import Box

BACKGROUND = -1


@dataclass(frozen=True)
class WeakLabels:
    """Dense 0/1 image-level label vector of length C."""

    flags: tuple[int, ...]

    def __post_init__(self):
        flags = tuple(int(f) for f in self.flags)
        if any(f not in (0, 1) for f in flags):
            raise ValueError(f"weak label flags must be 0/1, got {self.flags}")
        object.__setattr__(self, "flags", flags)

    @classmethod
    def zeros(cls, num_classes: int) -> "WeakLabels":
        return cls((0,) * num_classes)

    @classmethod
    def from_classes(cls, class_ids, num_classes: int) -> "WeakLabels":
        flags = [0] * num_classes
        for k in class_ids:
            if not 0 <= k < num_classes:
                raise ValueError(f"class id {k} outside [0, {num_classes})")
            flags[k] = 1
        return cls(tuple(flags))

    def __len__(self) -> int:
        return len(self.flags)

    def __getitem__(self, k: int) -> int:
        return self.flags[k]

    def positive_classes(self) -> list[int]:
        return [k for k, f in enumerate(self.flags) if f]


@dataclass(frozen=True)
class Instance:
    class_id: int
    box: Optional[Box] = None

    def __post_init__(self):
        if (self.class_id == BACKGROUND) != (self.box is None):
            raise ValueError("an instance has a box iff it is foreground")
        if self.class_id != BACKGROUND and self.class_id < 0:
            raise ValueError(f"invalid class id {self.class_id}")

    @property
    def is_foreground(self) -> bool:
        return self.class_id != BACKGROUND


def _check_unit(value: float, what: str) -> float:
    value = float(value)
    if not (math.isfinite(value) and 0.0 <= value <= 1.0):
        raise ValueError(f"{what} must lie in [0, 1], got {value}")
    return value


@dataclass(frozen=True)
class Detection:
    box: Box
    class_scores: tuple[float, ...]
    objectness: Optional[float] = None

    def __post_init__(self):
        scores = tuple(_check_unit(s, "class score") for s in self.class_scores)
        object.__setattr__(self, "class_scores", scores)
        if self.objectness is not None:
            object.__setattr__(self, "objectness", _check_unit(self.objectness, "objectness"))

    @property
    def num_classes(self) -> int:
        return len(self.class_scores)


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    width: int
    height: int
    weak_labels: WeakLabels
    full_annotations: Optional[tuple[Instance, ...]] = None

    def __post_init__(self):
        if self.full_annotations is not None:
            object.__setattr__(self, "full_annotations", tuple(self.full_annotations))

    @property
    def is_fully_annotated(self) -> bool:
        return self.full_annotations is not None

    def foreground(self) -> list[Instance]:
        return [a for a in (self.full_annotations or ()) if a.is_foreground]


def validate_record(r: ImageRecord, c_count: int) -> list[str]:
    """List every invariant the record violates; never raises."""
    problems = []
    if not isinstance(r.width, int) or not isinstance(r.height, int) or r.width <= 0 or r.height <= 0:
        problems.append(f"{r.image_id}: non-positive or non-integer size {r.width}x{r.height}")
    if len(r.weak_labels) != c_count:
        problems.append(
            f"{r.image_id}: weak label length {len(r.weak_labels)} != category count {c_count}"
        )
    if r.full_annotations is None:
        return problems

    present = set()
    for i, inst in enumerate(r.full_annotations):
        if not inst.is_foreground:
            continue
        if inst.class_id >= c_count:
            problems.append(f"{r.image_id}: annotation {i} class {inst.class_id} out of range")
            continue
        present.add(inst.class_id)
        if not inst.box.within(r.width, r.height):
            problems.append(
                f"{r.image_id}: annotation {i} box {inst.box.as_tuple()} out of bounds "
                f"[0,{r.width}]x[0,{r.height}]"
            )
    if len(r.weak_labels) == c_count:
        for k in range(c_count):
            if bool(r.weak_labels[k]) != (k in present):
                problems.append(
                    f"{r.image_id}: label inconsistency for class {k} "
                    f"(weak flag {r.weak_labels[k]}, annotated {k in present})"
                )
    return problems


@dataclass(frozen=True)
class Dataset:
    categories: tuple[str, ...]
    records: tuple[ImageRecord, ...]
    # external (e.g. COCO) ids, parallel to ``categories``; defaults to 0..C-1
    category_ids: tuple[int, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(self.categories))
        object.__setattr__(self, "records", tuple(self.records))
        ids = tuple(self.category_ids) or tuple(range(len(self.categories)))
        if len(ids) != len(self.categories) or len(set(ids)) != len(ids):
            raise ValueError("category ids must be unique and parallel to category names")
        object.__setattr__(self, "category_ids", ids)
        seen = set()
        for r in self.records:
            if r.image_id in seen:
                raise ValueError(f"duplicate image id {r.image_id!r}")
            seen.add(r.image_id)
            if len(r.weak_labels) != self.num_classes:
                raise ValueError(f"{r.image_id}: weak label length != {self.num_classes}")

    @property
    def num_classes(self) -> int:
        return len(self.categories)

    def problems(self) -> list[str]:
        out = []
        for r in self.records:
            out.extend(validate_record(r, self.num_classes))
        return out

    def record(self, image_id: str) -> ImageRecord:
        for r in self.records:
            if r.image_id == image_id:
                return r
        raise KeyError(image_id)

    def fully_annotated(self) -> list[ImageRecord]:
        return [r for r in self.records if r.is_fully_annotated]

    def weakly_annotated(self) -> list[ImageRecord]:
        return [r for r in self.records if not r.is_fully_annotated]


def class_view(
    dets: Sequence[Detection], k: int, num_classes: Optional[int] = None
) -> tuple[list[Box], list[float]]:
    """Boxes and class-``k`` scores of all detections, in input order."""
    if num_classes is None:
        num_classes = dets[0].num_classes if dets else None
    if k < 0 or (num_classes is not None and k >= num_classes):
        raise IndexError(f"class index {k} outside [0, {num_classes})")
    boxes = [d.box for d in dets]
    scores = [d.class_scores[k] for d in dets]
    return boxes, scores
