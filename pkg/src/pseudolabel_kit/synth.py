"""Synthetic scenes, a simulated agent detector, and pseudo-label quality metrics.

Pseudo-label quality (precision/recall against ground truth) stands in for the
downstream detector accuracy, which would need actual training to measure.
"""
from __future__ import annotations

import hashlib
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, logit

from .errors import GenerationError
from .geometry import Box, iou
from .model import Dataset, Detection, ImageRecord, Instance, WeakLabels
from .pseudolabel import PseudoLabelSet, RpsConfig, hard_threshold, rps_sample, top1_per_label
from .rng import derive_rng
from .suppression import DEFAULT_IOU_THR
from .wsl import EPS

THREADS_ENV = "PSEUDOLABEL_KIT_THREADS"
PLACEMENT_RETRIES = 200
NO_OVERLAP_IOU = 0.3


@dataclass(frozen=True)
class SceneConfig:
    width: int = 640
    height: int = 480
    instance_count_range: tuple[int, int] = (1, 5)
    class_count: int = 3
    box_size_range: tuple[float, float] = (32.0, 160.0)
    overlap_allowed: bool = False

    def __post_init__(self):
        lo, hi = self.instance_count_range
        smin, smax = self.box_size_range
        if self.width <= 0 or self.height <= 0:
            raise ValueError("canvas size must be positive")
        if self.class_count < 1:
            raise ValueError("class_count must be >= 1")
        if not 0 <= lo <= hi:
            raise ValueError(f"bad instance_count_range {self.instance_count_range}")
        if not 0 < smin <= smax <= min(self.width, self.height):
            raise ValueError(f"box_size_range {self.box_size_range} does not fit the canvas")


@dataclass(frozen=True)
class DetectorNoise:
    localization_sigma: float = 0.0
    # (slope, offset) applied to true-positive score logits
    score_calibration: tuple[float, float] = (1.0, 0.0)
    false_positive_rate: float = 0.0
    miss_rate: float = 0.0
    duplicate_rate: float = 0.0

    def __post_init__(self):
        if not self.localization_sigma >= 0:
            raise ValueError("localization_sigma must be >= 0")
        for name in ("false_positive_rate", "miss_rate", "duplicate_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        slope, offset = self.score_calibration
        if not (math.isfinite(slope) and math.isfinite(offset)):
            raise ValueError("score calibration must be finite")


def generate_scene(cfg: SceneConfig, rng: np.random.Generator, image_id: str = "0") -> ImageRecord:
    """One fully-annotated scene with integer-pixel boxes."""
    lo, hi = cfg.instance_count_range
    count = int(rng.integers(lo, hi + 1))
    smin, smax = cfg.box_size_range
    placed: list[Instance] = []
    for _ in range(count):
        for _attempt in range(PLACEMENT_RETRIES):
            w = float(round(rng.uniform(smin, smax)))
            h = float(round(rng.uniform(smin, smax)))
            x = float(round(rng.uniform(0, cfg.width - w)))
            y = float(round(rng.uniform(0, cfg.height - h)))
            box = Box(x, y, x + w, y + h)
            if cfg.overlap_allowed or all(iou(box, p.box) < NO_OVERLAP_IOU for p in placed):
                break
        else:
            raise GenerationError(f"could not place instance {len(placed)} in scene {image_id}")
        placed.append(Instance(int(rng.integers(cfg.class_count)), box))
    weak = WeakLabels.from_classes({p.class_id for p in placed}, cfg.class_count)
    return ImageRecord(image_id, cfg.width, cfg.height, weak, tuple(placed))


def generate_dataset(cfg: SceneConfig, scenes: int, seed: int) -> Dataset:
    records = [generate_scene(cfg, derive_rng(seed, "scene", i), str(i)) for i in range(scenes)]
    names = tuple(f"class{k}" for k in range(cfg.class_count))
    return Dataset(names, tuple(records), tuple(range(1, cfg.class_count + 1)))


def _jitter(box: Box, noise: np.ndarray, width: int, height: int) -> Box:
    x1, y1, x2, y2 = (c + d for c, d in zip(box.as_tuple(), noise))
    x1, x2 = sorted((min(max(x1, 0.0), width), min(max(x2, 0.0), width)))
    y1, y2 = sorted((min(max(y1, 0.0), height), min(max(y2, 0.0), height)))
    return Box(x1, y1, x2, y2)


def simulate_detector(
    record: ImageRecord, noise: DetectorNoise, rng: np.random.Generator
) -> list[Detection]:
    """Noisy detections for a fully-annotated record.

    A true positive's raw confidence is the IoU of its jittered box with the
    instance, mapped through the logit-space calibration; other classes get a
    share of the leftover mass. Every instance consumes the same random draws
    whether or not it is missed, so runs that differ only in ``miss_rate``
    stay coupled.
    """
    if record.full_annotations is None:
        raise ValueError(f"record {record.image_id} has no annotations to simulate from")
    c_count = len(record.weak_labels)
    slope, offset = noise.score_calibration
    sigma = noise.localization_sigma

    def scored(inst: Instance, jit: np.ndarray, other: np.ndarray) -> Detection:
        box = _jitter(inst.box, jit, record.width, record.height)
        raw = min(max(iou(box, inst.box), EPS), 1.0 - EPS)
        s = float(expit(slope * logit(raw) + offset))
        scores = (1.0 - s) * other
        scores[inst.class_id] = s
        return Detection(box, tuple(float(v) for v in scores))

    dets = []
    for inst in record.foreground():
        u_miss, u_dup = rng.random(2)
        jit = rng.normal(0.0, 1.0, (2, 4)) * sigma
        other = rng.random((2, c_count))
        if u_miss < noise.miss_rate:
            continue
        dets.append(scored(inst, jit[0], other[0]))
        if u_dup < noise.duplicate_rate:
            dets.append(scored(inst, jit[1], other[1]))

    for _ in range(int(rng.poisson(noise.false_positive_rate))):
        w = rng.uniform(0.05, 0.3) * record.width
        h = rng.uniform(0.05, 0.3) * record.height
        x = rng.uniform(0, record.width - w)
        y = rng.uniform(0, record.height - h)
        scores = rng.beta(0.5, 1.5, c_count)
        dets.append(Detection(Box(x, y, x + w, y + h), tuple(float(v) for v in scores)))
    return dets


@dataclass
class MatchCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0
    score_sum: float = 0.0

    def __iadd__(self, other: "MatchCounts") -> "MatchCounts":
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.iou_sum += other.iou_sum
        self.score_sum += other.score_sum
        return self


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


@dataclass(frozen=True)
class QualityReport:
    """Pseudo-label quality at one IoU threshold.

    Precision and recall define 0/0 as 1 (an empty set against an empty
    ground truth is perfect). Means over matched pairs are 0 when nothing
    matched.
    """

    iou_thr: float
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    mean_matched_iou: float
    matched_score_mean: float
    per_class: dict = field(default_factory=dict)

    @classmethod
    def from_counts(cls, per_class: dict[int, MatchCounts], iou_thr: float) -> "QualityReport":
        total = MatchCounts()
        for c in per_class.values():
            total += c
        p = _ratio(total.tp, total.tp + total.fp)
        r = _ratio(total.tp, total.tp + total.fn)
        f1 = 0.0 if p + r == 0 else 2 * p * r / (p + r)
        return cls(
            iou_thr=iou_thr,
            tp=total.tp,
            fp=total.fp,
            fn=total.fn,
            precision=p,
            recall=r,
            f1=f1,
            mean_matched_iou=total.iou_sum / total.tp if total.tp else 0.0,
            matched_score_mean=total.score_sum / total.tp if total.tp else 0.0,
            per_class={
                k: {
                    "tp": c.tp,
                    "fp": c.fp,
                    "fn": c.fn,
                    "precision": _ratio(c.tp, c.tp + c.fp),
                    "recall": _ratio(c.tp, c.tp + c.fn),
                }
                for k, c in sorted(per_class.items())
            },
        )


def match_counts(pseudo: PseudoLabelSet, record: ImageRecord, iou_thr: float) -> dict[int, MatchCounts]:
    if record.full_annotations is None:
        raise ValueError(f"record {record.image_id} has no annotations to score against")
    gt = record.foreground()
    counts: dict[int, MatchCounts] = {}
    matched = [False] * len(gt)
    order = sorted(range(len(pseudo.labels)), key=lambda i: (-pseudo.labels[i].score, i))
    for i in order:
        label = pseudo.labels[i]
        c = counts.setdefault(label.class_id, MatchCounts())
        best, best_iou = -1, -1.0
        for j, inst in enumerate(gt):
            if matched[j] or inst.class_id != label.class_id:
                continue
            v = iou(label.box, inst.box)
            if v > best_iou:
                best, best_iou = j, v
        if best >= 0 and best_iou >= iou_thr:
            matched[best] = True
            c.tp += 1
            c.iou_sum += best_iou
            c.score_sum += label.score
        else:
            c.fp += 1
    for j, inst in enumerate(gt):
        if not matched[j]:
            counts.setdefault(inst.class_id, MatchCounts()).fn += 1
    return counts


def match_and_score(pseudo: PseudoLabelSet, record: ImageRecord, iou_thr: float = 0.5) -> QualityReport:
    """Greedy score-ordered matching of pseudo labels to same-class ground truth."""
    return QualityReport.from_counts(match_counts(pseudo, record, iou_thr), iou_thr)


def evaluate_sets(
    sets: Sequence[PseudoLabelSet], dataset: Dataset, iou_thr: float = 0.5
) -> QualityReport:
    """Micro-averaged report over many images; records without a set count as empty."""
    by_image: dict[str, list[PseudoLabelSet]] = {}
    for s in sets:
        by_image.setdefault(s.image_id, []).append(s)
    known = {r.image_id for r in dataset.records}
    unknown = sorted(set(by_image) - known)
    if unknown:
        raise ValueError(f"pseudo labels for unknown images: {unknown[:5]}")
    totals: dict[int, MatchCounts] = {}
    for r in dataset.records:
        for s in by_image.get(r.image_id) or [PseudoLabelSet(r.image_id)]:
            for k, c in match_counts(s, r, iou_thr).items():
                totals.setdefault(k, MatchCounts()).__iadd__(c)
    return QualityReport.from_counts(totals, iou_thr)


@dataclass(frozen=True)
class StrategySpec:
    name: str
    kind: str  # "rps" | "threshold" | "top1"
    tau: float = 0.9
    iou_thr: float = DEFAULT_IOU_THR
    use_labels: bool = True

    def __post_init__(self):
        if self.kind not in ("rps", "threshold", "top1"):
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if self.kind == "threshold" and not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if not 0.0 < self.iou_thr <= 1.0:
            raise ValueError(f"iou_thr must lie in (0, 1], got {self.iou_thr}")

    @property
    def deterministic(self) -> bool:
        return self.kind != "rps"


def run_strategy(
    spec: StrategySpec, dets: Sequence[Detection], record: ImageRecord, rng: Optional[np.random.Generator]
) -> PseudoLabelSet:
    labels = record.weak_labels
    if spec.kind == "rps":
        return rps_sample(dets, labels, RpsConfig(spec.iou_thr), rng, record.image_id, spec.name)
    if spec.kind == "threshold":
        return hard_threshold(
            dets, labels if spec.use_labels else None, spec.tau, spec.iou_thr, record.image_id, spec.name
        )
    return top1_per_label(dets, labels, record.image_id, spec.name)


def detections_digest(dets: Sequence[Detection]) -> str:
    h = hashlib.sha256()
    for d in dets:
        h.update(repr((d.box.as_tuple(), d.class_scores, d.objectness)).encode())
    return h.hexdigest()


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        n = int(raw)
        if n < 1:
            raise ValueError(f"{THREADS_ENV} must be >= 1, got {raw}")
        return n
    return os.cpu_count() or 1


@dataclass
class ComparisonTable:
    strategies: list[StrategySpec]
    trials: int
    reports: dict[str, list[QualityReport]]
    # per strategy and trial: digest of the detections the strategy consumed
    input_digests: dict[str, list[str]]

    FIELDS = ("precision", "recall", "f1", "mean_matched_iou", "matched_score_mean", "tp", "fp", "fn")

    def rows(self) -> list[dict]:
        out = []
        for spec in self.strategies:
            reps = self.reports[spec.name]
            row = {"strategy": spec.name, "kind": spec.kind, "trials": self.trials}
            for f in self.FIELDS:
                values = np.array([getattr(r, f) for r in reps], dtype=np.float64)
                row[f"{f}_mean"] = float(values.mean())
                row[f"{f}_std"] = float(values.std())
            out.append(row)
        return out


def compare_strategies(
    dataset: Dataset,
    noise: DetectorNoise,
    strategies: Sequence[StrategySpec],
    trials: int,
    seed: int,
    match_iou: float = 0.5,
    workers: Optional[int] = None,
) -> ComparisonTable:
    """Run every strategy on identical simulated detections, trial by trial.

    Random streams are keyed by (seed, trial, image id[, strategy]) so the
    result does not depend on ``workers``.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    names = [s.name for s in strategies]
    if len(set(names)) != len(names):
        raise ValueError(f"strategy names must be unique: {names}")
    records = dataset.records
    for r in records:
        if r.full_annotations is None:
            raise ValueError(f"record {r.image_id} has no annotations; comparison needs ground truth")

    def one_image(trial: int, record: ImageRecord):
        dets = simulate_detector(record, noise, derive_rng(seed, "detector", trial, record.image_id))
        out = {}
        for spec in strategies:
            rng = derive_rng(seed, "strategy", spec.name, trial, record.image_id)
            digest = detections_digest(dets)
            pseudo = run_strategy(spec, dets, record, rng)
            out[spec.name] = (digest, match_counts(pseudo, record, match_iou))
        return out

    reports = {n: [] for n in names}
    digests = {n: [] for n in names}
    n_workers = workers or worker_count()
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        for trial in range(trials):
            results = list(pool.map(lambda r: one_image(trial, r), records))
            for name in names:
                totals: dict[int, MatchCounts] = {}
                h = hashlib.sha256()
                for res in results:
                    digest, counts = res[name]
                    h.update(digest.encode())
                    for k, c in counts.items():
                        totals.setdefault(k, MatchCounts()).__iadd__(c)
                reports[name].append(QualityReport.from_counts(totals, match_iou))
                digests[name].append(h.hexdigest())
    return ComparisonTable(list(strategies), trials, reports, digests)
