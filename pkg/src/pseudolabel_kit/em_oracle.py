"""Exact and approximate evaluation of the EM objective for one foreground class.

A model is represented by its per-proposal foreground probabilities
(``ProposalPosterior``). An assignment marks each of the N proposals as
foreground or background; the constrained set B holds the 2^N - 1
assignments with at least one foreground proposal.

Assignments are identified with the integer ``sum(bit_j << j)``, so proposal 0
is the least significant bit. Enumeration runs in ascending pattern order and
all ties are broken toward the smaller pattern. The string form lists
proposals left to right: ``"10"`` means proposal 0 foreground, 1 background.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import DegeneratePosteriorError
from .geometry import Box
from .wsl import EPS, clamp_prob

ENUMERATION_CAP = 20
REJECTION_BUDGET = 10_000
_BLOCK = 1 << 16


@dataclass(frozen=True)
class ProposalPosterior:
    fg_prob: np.ndarray
    coord: Optional[tuple[Box, ...]] = None

    def __post_init__(self):
        p = np.asarray(self.fg_prob, dtype=np.float64).ravel()
        if p.size < 1:
            raise ValueError("need at least one proposal")
        if not np.all((p >= 0.0) & (p <= 1.0)):
            raise ValueError("foreground probabilities must lie in [0, 1]")
        object.__setattr__(self, "fg_prob", p)
        if self.coord is not None:
            coord = tuple(self.coord)
            if len(coord) != p.size:
                raise ValueError(f"{len(coord)} boxes for {p.size} proposals")
            object.__setattr__(self, "coord", coord)

    @property
    def n(self) -> int:
        return self.fg_prob.size

    @property
    def clamped(self) -> np.ndarray:
        return clamp_prob(self.fg_prob)


@dataclass(frozen=True)
class Assignment:
    fg_mask: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "fg_mask", tuple(bool(b) for b in self.fg_mask))

    @classmethod
    def from_pattern(cls, pattern: int, n: int) -> "Assignment":
        return cls(tuple((pattern >> j) & 1 == 1 for j in range(n)))

    @classmethod
    def from_string(cls, bits: str) -> "Assignment":
        return cls(tuple(ch == "1" for ch in bits))

    @property
    def pattern(self) -> int:
        return sum(1 << j for j, b in enumerate(self.fg_mask) if b)

    @property
    def in_B(self) -> bool:
        """False for the all-background assignment, which lies outside B."""
        return any(self.fg_mask)

    def __len__(self) -> int:
        return len(self.fg_mask)

    def __str__(self) -> str:
        return "".join("1" if b else "0" for b in self.fg_mask)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda_u: float = 2.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda_u"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be a non-negative real, got {value}")


def _check_mass(z: float, n: int) -> None:
    # clamping alone leaves about n * EPS on B; anything that small is no signal
    if z < 2 * n * EPS:
        raise DegeneratePosteriorError(f"prior puts {z:.3g} mass on B; nothing to condition on")


def _check_n(n: int) -> None:
    if not 1 <= n <= ENUMERATION_CAP:
        raise ValueError(f"exact enumeration needs 1 <= N <= {ENUMERATION_CAP}, got {n}")


def _pattern_blocks(n: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """(patterns, bits) blocks covering 1 .. 2^n - 1; bits[r, j] is proposal j."""
    shifts = np.arange(n, dtype=np.int64)
    stop = 1 << n
    for start in range(1, stop, _BLOCK):
        patterns = np.arange(start, min(start + _BLOCK, stop), dtype=np.int64)
        yield patterns, ((patterns[:, None] >> shifts) & 1).astype(bool)


def enumerate_B(n: int) -> Iterator[Assignment]:
    _check_n(n)
    for pattern in range(1, 1 << n):
        yield Assignment.from_pattern(pattern, n)


def _l1(a: Box, b: Box) -> float:
    return abs(a.x1 - b.x1) + abs(a.y1 - b.y1) + abs(a.x2 - b.x2) + abs(a.y2 - b.y2)


def l1_distance(a: Box, b: Box) -> float:
    """Sum of absolute corner-coordinate differences."""
    return _l1(a, b)


def binary_ce(label: int, prob: float) -> float:
    p = float(clamp_prob(prob))
    return -math.log(p) if label else -math.log1p(-p)


def supervised_loglik(
    pred_prob: float,
    pred_box: Optional[Box],
    gt_class: int,
    gt_box: Optional[Box],
    w: LossWeights = LossWeights(),
) -> float:
    """Log-likelihood of one proposal's supervised target: -(l1*CE + l2*L1)."""
    if gt_class not in (0, 1):
        raise ValueError(f"gt_class must be 0 or 1, got {gt_class}")
    if gt_class == 1 and (gt_box is None or pred_box is None):
        raise ValueError("a foreground target needs both a ground-truth and a predicted box")
    if gt_class == 0 and gt_box is not None:
        raise ValueError("a background target carries no box")
    box_term = _l1(gt_box, pred_box) if gt_class == 1 else 0.0
    return -(w.lambda1 * binary_ce(gt_class, pred_prob) + w.lambda2 * box_term)


def _check_len(t: Assignment, m: ProposalPosterior) -> None:
    if len(t) != m.n:
        raise ValueError(f"assignment of length {len(t)} for {m.n} proposals")


def assignment_prob(t: Assignment, m: ProposalPosterior) -> float:
    _check_len(t, m)
    p = m.clamped
    mask = np.array(t.fg_mask)
    return float(np.prod(np.where(mask, p, 1.0 - p)))


def _coord_costs(m: ProposalPosterior, coords_gt: Optional[Sequence[Box]]) -> Optional[np.ndarray]:
    if coords_gt is None:
        return None
    if m.coord is None:
        raise ValueError("coordinate targets given but the model has no predicted boxes")
    if len(coords_gt) != m.n:
        raise ValueError(f"{len(coords_gt)} coordinate targets for {m.n} proposals")
    return np.array([_l1(g, b) for g, b in zip(coords_gt, m.coord)])


def assignment_loglik(
    t: Assignment,
    m: ProposalPosterior,
    coords_gt: Optional[Sequence[Box]] = None,
    w: LossWeights = LossWeights(),
) -> float:
    """log P(t | model): per-proposal Bernoulli terms plus, when coordinate
    targets are supplied, an L1 penalty on foreground proposals."""
    _check_len(t, m)
    p = m.clamped
    mask = np.array(t.fg_mask)
    value = w.lambda1 * np.sum(np.where(mask, np.log(p), np.log1p(-p)))
    costs = _coord_costs(m, coords_gt)
    if costs is not None:
        value -= w.lambda2 * np.sum(costs[mask])
    return float(value)


def exact_weak_prob(m: ProposalPosterior) -> float:
    """P(at least one foreground proposal), summed over every assignment in B."""
    _check_n(m.n)
    p = m.clamped
    total = 0.0
    for _, bits in _pattern_blocks(m.n):
        total += float(np.sum(np.prod(np.where(bits, p, 1.0 - p), axis=1)))
    return total


def closed_form_weak_prob(m: ProposalPosterior) -> float:
    """1 - prod(1 - p_j), the independence identity for the same quantity."""
    return float(-np.expm1(np.sum(np.log1p(-m.clamped))))


def _loglik_affine(prior_m: ProposalPosterior, model_m: ProposalPosterior, w: LossWeights):
    """log P(t | model) is affine in the assignment bits: base + bits @ slope."""
    if prior_m.n != model_m.n:
        raise ValueError(f"prior has {prior_m.n} proposals, model has {model_m.n}")
    q = model_m.clamped
    base = w.lambda1 * float(np.sum(np.log1p(-q)))
    slope = w.lambda1 * (np.log(q) - np.log1p(-q))
    if prior_m.coord is not None and model_m.coord is not None:
        slope = slope - w.lambda2 * _coord_costs(model_m, prior_m.coord)
    return base, slope


class _Objective:
    """Vectorised pieces shared by the exact scans over B."""

    def __init__(self, prior_m: ProposalPosterior, model_m: ProposalPosterior, w: LossWeights):
        self.base, self.slope = _loglik_affine(prior_m, model_m, w)
        _check_n(prior_m.n)
        self.prior = prior_m.clamped
        self.z = exact_weak_prob(prior_m)
        _check_mass(self.z, prior_m.n)
        self.n = prior_m.n

    def blocks(self):
        for patterns, bits in _pattern_blocks(self.n):
            post = np.prod(np.where(bits, self.prior, 1.0 - self.prior), axis=1) / self.z
            loglik = self.base + bits @ self.slope
            yield patterns, post, loglik


def posterior_table(prior_m: ProposalPosterior) -> tuple[np.ndarray, np.ndarray]:
    """Patterns 1..2^N-1 and their posterior P(t | image label; prior)."""
    _check_n(prior_m.n)
    p = prior_m.clamped
    z = exact_weak_prob(prior_m)
    _check_mass(z, prior_m.n)
    pats, posts = [], []
    for patterns, bits in _pattern_blocks(prior_m.n):
        pats.append(patterns)
        posts.append(np.prod(np.where(bits, p, 1.0 - p), axis=1) / z)
    return np.concatenate(pats), np.concatenate(posts)


def exact_Q(prior_m: ProposalPosterior, model_m: ProposalPosterior, w: LossWeights = LossWeights()) -> float:
    """Expected log P(t | model) under the prior's posterior restricted to B."""
    obj = _Objective(prior_m, model_m, w)
    return float(sum(np.sum(post * loglik) for _, post, loglik in obj.blocks()))


def max_Q(
    prior_m: ProposalPosterior,
    model_m: ProposalPosterior,
    posterior_only: bool = False,
    w: LossWeights = LossWeights(),
) -> tuple[float, Assignment]:
    """Largest single term posterior(t) * log P(t | model) over B.

    With ``posterior_only`` the assignment is instead the posterior mode (the
    "most likely assignment also maximises the term" shortcut); the value
    returned is still that assignment's term.
    """
    obj = _Objective(prior_m, model_m, w)
    best_key, best_value, best_pattern = -np.inf, 0.0, 0
    for patterns, post, loglik in obj.blocks():
        terms = post * loglik
        keys = post if posterior_only else terms
        i = int(np.argmax(keys))
        # strict > keeps the earliest (smallest) pattern on ties across blocks
        if keys[i] > best_key:
            best_key, best_value, best_pattern = keys[i], float(terms[i]), int(patterns[i])
    return best_value, Assignment.from_pattern(best_pattern, obj.n)


def threshold_assignment(prior_m: ProposalPosterior, p_t: float) -> Assignment:
    """Foreground iff the prior probability reaches ``p_t``.

    May return the all-background assignment; check ``.in_B``.
    """
    if not 0.0 < p_t < 1.0:
        raise ValueError(f"p_t must lie in (0, 1), got {p_t}")
    return Assignment(tuple(prior_m.fg_prob >= p_t))


def threshold_Q(
    prior_m: ProposalPosterior, model_m: ProposalPosterior, p_t: float, w: LossWeights = LossWeights()
) -> float:
    """Q collapsed onto the single thresholded assignment."""
    t = threshold_assignment(prior_m, p_t)
    coords = prior_m.coord if model_m.coord is not None else None
    return assignment_loglik(t, model_m, coords, w)


def _draw_block(p: np.ndarray, rows: int, rng: np.random.Generator) -> np.ndarray:
    bits = rng.random((rows, p.size)) < p
    return bits[bits.any(axis=1)]


def posterior_samples(
    prior_m: ProposalPosterior,
    count: int,
    rng: np.random.Generator,
    budget: int = REJECTION_BUDGET,
) -> np.ndarray:
    """``count`` exact draws from the posterior on B, as a (count, N) bool array.

    Independent Bernoulli draws with all-background rows rejected. Raises
    ``DegeneratePosteriorError`` if ``budget`` consecutive attempts are all
    rejected.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    p = prior_m.clamped
    accepted = []
    have = 0
    misses = 0
    while have < count:
        need = count - have
        rows = min(max(need + need // 4 + 8, 64), 1 << 20)
        block = _draw_block(p, rows, rng)
        if block.shape[0] == 0:
            misses += rows
            if misses >= budget:
                raise DegeneratePosteriorError(
                    f"no foreground assignment in {misses} Bernoulli draws"
                )
            continue
        misses = 0
        block = block[:need]
        accepted.append(block)
        have += block.shape[0]
    return np.concatenate(accepted)


def posterior_sample(
    prior_m: ProposalPosterior, rng: np.random.Generator, budget: int = REJECTION_BUDGET
) -> Assignment:
    p = prior_m.clamped
    for _ in range(budget):
        bits = rng.random(p.size) < p
        if bits.any():
            return Assignment(tuple(bits))
    raise DegeneratePosteriorError(f"no foreground assignment in {budget} Bernoulli draws")


def mc_Q(
    prior_m: ProposalPosterior,
    model_m: ProposalPosterior,
    b_prime: int,
    rng: np.random.Generator,
    w: LossWeights = LossWeights(),
) -> float:
    """Sample-mean estimate of ``exact_Q`` from ``b_prime`` posterior draws."""
    if b_prime < 1:
        raise ValueError(f"b_prime must be >= 1, got {b_prime}")
    base, slope = _loglik_affine(prior_m, model_m, w)
    bits = posterior_samples(prior_m, b_prime, rng)
    return float(np.mean(base + bits @ slope))


def joint_objective(sup_terms: Sequence[float], weak_Q_terms: Sequence[float], w: LossWeights = LossWeights()) -> float:
    """Supervised log-likelihoods plus the lambda_u-weighted weak-image Q terms."""
    return float(math.fsum(sup_terms) + w.lambda_u * math.fsum(weak_Q_terms))
