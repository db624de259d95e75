"""Image-level probabilities, the weakly-supervised loss and label attention.

All probabilities are clamped to [EPS, 1 - EPS] before any logarithm.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, softmax

from .model import WeakLabels

EPS = 1e-12


@dataclass(frozen=True)
class ProposalScores:
    """Per-proposal logits: RPN objectness (N,) and bbox-head class logits (N, C)."""

    objectness: np.ndarray
    class_logits: np.ndarray

    def __post_init__(self):
        obj = np.asarray(self.objectness, dtype=np.float64)
        cls = np.asarray(self.class_logits, dtype=np.float64)
        if cls.ndim == 1:
            cls = cls[:, None]
        if obj.ndim != 1 or obj.size < 1 or cls.shape[0] != obj.size:
            raise ValueError(f"objectness shape {obj.shape} incompatible with logits {cls.shape}")
        if not (np.all(np.isfinite(obj)) and np.all(np.isfinite(cls))):
            raise ValueError("proposal scores must be finite")
        object.__setattr__(self, "objectness", obj)
        object.__setattr__(self, "class_logits", cls)

    @property
    def num_proposals(self) -> int:
        return self.objectness.size


@dataclass(frozen=True)
class WslConfig:
    K: int = 512

    def __post_init__(self):
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")


@dataclass(frozen=True)
class AttentionParams:
    weight: np.ndarray  # (D, C)
    bias: np.ndarray  # (D,)

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ValueError(f"weight {w.shape} and bias {b.shape} do not agree")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("attention parameters must be finite")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)


@dataclass(frozen=True)
class AttentionGrads:
    feature: np.ndarray
    weight: np.ndarray
    bias: np.ndarray


def clamp_prob(p):
    return np.clip(p, EPS, 1.0 - EPS)


def wsl_image_prob(class_logits_single) -> float:
    """Softmax-over-proposals weighting of per-proposal foreground probability.

    A softened max: the result is a convex combination of ``sigmoid(l_j)``,
    pulled toward the most confident proposal.
    """
    logits = np.asarray(class_logits_single, dtype=np.float64).ravel()
    if logits.size == 0:
        raise ValueError("need at least one proposal logit")
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    return float(softmax(logits) @ expit(logits))


def wsl_image_prob_rpn(scores: ProposalScores, cfg: WslConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-class image probability as RPN prior times bbox-head posterior.

    When there are more than ``cfg.K`` proposals, ``K`` of them are drawn
    uniformly without replacement first; otherwise ``rng`` is not touched.
    """
    n = scores.num_proposals
    if cfg.K < n:
        idx = np.sort(rng.choice(n, size=cfg.K, replace=False))
        obj, logits = scores.objectness[idx], scores.class_logits[idx]
    else:
        obj, logits = scores.objectness, scores.class_logits
    w = softmax(obj)
    q = softmax(logits, axis=1)
    return w @ q


def _flags(labels) -> np.ndarray:
    if isinstance(labels, WeakLabels):
        labels = labels.flags
    return np.asarray(labels, dtype=np.float64).ravel()


def wsl_loss(image_probs, labels) -> float:
    """Multi-label binary cross-entropy averaged over classes."""
    p = clamp_prob(np.asarray(image_probs, dtype=np.float64).ravel())
    c = _flags(labels)
    if p.size != c.size:
        raise ValueError(f"{p.size} probabilities but {c.size} labels")
    return float(-np.mean(c * np.log(p) + (1.0 - c) * np.log1p(-p)))


def _attention_inputs(feature, labels, params: AttentionParams):
    f = np.asarray(feature, dtype=np.float64).ravel()
    c = _flags(labels)
    d, k = params.weight.shape
    if f.size != d or c.size != k:
        raise ValueError(f"feature length {f.size} / labels {c.size} vs weight {params.weight.shape}")
    return f, c


def label_attention_forward(feature, labels, params: AttentionParams) -> np.ndarray:
    f, c = _attention_inputs(feature, labels, params)
    return expit(params.weight @ c + params.bias) * f


def label_attention_backward(feature, labels, params: AttentionParams, upstream_grad) -> AttentionGrads:
    f, c = _attention_inputs(feature, labels, params)
    g = np.asarray(upstream_grad, dtype=np.float64).ravel()
    if g.size != f.size:
        raise ValueError(f"upstream gradient length {g.size} != feature length {f.size}")
    a = expit(params.weight @ c + params.bias)
    grad_bias = g * f * a * (1.0 - a)
    return AttentionGrads(
        feature=g * a,
        weight=np.outer(grad_bias, c),
        bias=grad_bias,
    )
