import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pseudolabel_kit.errors import DegeneratePosteriorError
from pseudolabel_kit.em_oracle import (
    Assignment,
    LossWeights,
    ProposalPosterior,
    assignment_loglik,
    assignment_prob,
    closed_form_weak_prob,
    enumerate_B,
    exact_Q,
    exact_weak_prob,
    joint_objective,
    max_Q,
    mc_Q,
    posterior_sample,
    posterior_samples,
    posterior_table,
    supervised_loglik,
    threshold_assignment,
    threshold_Q,
)
from pseudolabel_kit.geometry import Box

EPS = 1e-12


def clamp(p):
    return min(max(p, EPS), 1 - EPS)


def brute_terms(prior, model):
    """(bits, posterior, loglik) for every assignment in B, via itertools."""
    n = len(prior)
    rows = []
    for bits in itertools.product((0, 1), repeat=n):
        if not any(bits):
            continue
        pr = math.prod(clamp(p) if b else 1 - clamp(p) for p, b in zip(prior, bits))
        ll = math.fsum(math.log(clamp(q)) if b else math.log(1 - clamp(q)) for q, b in zip(model, bits))
        rows.append((bits, pr, ll))
    z = math.fsum(r[1] for r in rows)
    return [(bits, pr / z, ll) for bits, pr, ll in rows]


def brute_Q(prior, model):
    return math.fsum(post * ll for _, post, ll in brute_terms(prior, model))


def pp(*p):
    return ProposalPosterior(np.array(p, dtype=float))


def test_enumerate_B():
    assert [str(t) for t in enumerate_B(1)] == ["1"]
    assert [str(t) for t in enumerate_B(2)] == ["10", "01", "11"]
    seven = list(enumerate_B(3))
    assert len(seven) == 7 and len(set(seven)) == 7
    assert [t.pattern for t in seven] == list(range(1, 8))
    for bad in (0, 21):
        with pytest.raises(ValueError):
            list(enumerate_B(bad))


def test_assignment_prob_examples():
    assert assignment_prob(Assignment.from_string("10"), pp(0.5, 0.5)) == 0.25
    assert assignment_prob(Assignment.from_string("10"), pp(1.0, 0.0)) == pytest.approx(1.0, abs=1e-11)
    assert assignment_prob(Assignment.from_string("11"), pp(0.2, 0.7)) == pytest.approx(0.14, rel=1e-15)
    with pytest.raises(ValueError):
        assignment_prob(Assignment.from_string("1"), pp(0.2, 0.7))


def test_exact_weak_prob_examples():
    assert exact_weak_prob(pp(0.5, 0.5)) == pytest.approx(0.75, abs=1e-15)
    assert exact_weak_prob(pp(1.0)) == pytest.approx(1.0, abs=1e-11)
    assert exact_weak_prob(pp(0.0, 0.0, 0.0)) == pytest.approx(0.0, abs=1e-11)
    with pytest.raises(ValueError):
        exact_weak_prob(ProposalPosterior(np.full(21, 0.5)))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=12))
def test_weak_prob_identity(p):
    m = ProposalPosterior(np.array(p))
    assert abs(exact_weak_prob(m) - closed_form_weak_prob(m)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.001, 1), min_size=1, max_size=12))
def test_posterior_normalised(p):
    _, post = posterior_table(ProposalPosterior(np.array(p)))
    assert abs(post.sum() - 1) <= 1e-12


def test_supervised_loglik_examples():
    box = Box(0, 0, 10, 10)
    assert supervised_loglik(0.5, box, 1, box) == pytest.approx(-math.log(2), rel=1e-15)
    assert supervised_loglik(EPS, None, 0, None) == pytest.approx(0.0, abs=1e-11)
    shifted = Box(1, 0, 10, 10)
    assert supervised_loglik(1 - EPS, shifted, 1, box) == pytest.approx(-1.0, abs=1e-11)
    w = LossWeights(lambda1=2.0, lambda2=0.5)
    assert supervised_loglik(0.5, shifted, 1, box, w) == pytest.approx(-(2 * math.log(2) + 0.5))
    with pytest.raises(ValueError):
        supervised_loglik(0.5, box, 1, None)


def test_assignment_loglik_examples():
    assert assignment_loglik(Assignment.from_string("11"), pp(0.5, 0.5)) == pytest.approx(2 * math.log(0.5))
    assert assignment_loglik(Assignment.from_string("00"), pp(0, 0)) == pytest.approx(0.0, abs=1e-11)
    box = Box(0, 0, 5, 5)
    m = ProposalPosterior(np.array([0.9]), coord=(box,))
    assert assignment_loglik(Assignment.from_string("1"), m, [box]) == pytest.approx(math.log(0.9))
    off = Box(0, 0, 5, 7)
    assert assignment_loglik(Assignment.from_string("1"), m, [off]) == pytest.approx(math.log(0.9) - 2)
    # background proposals carry no box term
    m2 = ProposalPosterior(np.array([0.9, 0.2]), coord=(box, box))
    assert assignment_loglik(Assignment.from_string("10"), m2, [box, off]) == pytest.approx(
        math.log(0.9) + math.log(0.8)
    )


def test_exact_Q_examples():
    assert exact_Q(pp(1.0), pp(1.0)) == pytest.approx(0.0, abs=1e-11)
    # oracle: three equiprobable assignments, each with loglik 2 ln 1/2
    expected = brute_Q([0.5, 0.5], [0.5, 0.5])
    assert expected == pytest.approx(2 * math.log(0.5), rel=1e-15)
    assert exact_Q(pp(0.5, 0.5), pp(0.5, 0.5)) == pytest.approx(expected, rel=1e-14)
    q = exact_Q(pp(1.0, 1.0), pp(0.0, 0.0))
    assert math.isfinite(q) and q < -50


def test_exact_Q_degenerate_prior():
    with pytest.raises(DegeneratePosteriorError):
        exact_Q(pp(0.0, 0.0), pp(0.5, 0.5))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 9), st.integers(0, 2**32 - 1))
def test_exact_Q_matches_bruteforce(n, seed):
    rng = np.random.default_rng(seed)
    prior, model = rng.uniform(0.01, 1, n), rng.uniform(0, 1, n)
    assert exact_Q(ProposalPosterior(prior), ProposalPosterior(model)) == pytest.approx(
        brute_Q(prior, model), rel=1e-11, abs=1e-12
    )


def test_exact_Q_with_coordinates():
    boxes_prior = (Box(0, 0, 10, 10), Box(20, 20, 30, 30))
    boxes_model = (Box(1, 0, 10, 10), Box(20, 20, 30, 33))
    prior = ProposalPosterior(np.array([0.6, 0.3]), coord=boxes_prior)
    model = ProposalPosterior(np.array([0.7, 0.4]), coord=boxes_model)
    expected = 0.0
    for t in enumerate_B(2):
        post = assignment_prob(t, prior) / exact_weak_prob(prior)
        expected += post * assignment_loglik(t, model, boxes_prior)
    assert exact_Q(prior, model) == pytest.approx(expected, rel=1e-13)


def test_max_Q_matches_independent_scan():
    rng = np.random.default_rng(12)
    for _ in range(20):
        prior, model = rng.uniform(0.05, 1, 4), rng.uniform(0, 1, 4)
        terms = brute_terms(prior, model)
        # brute_terms yields itertools order; rescan in pattern order for ties
        keyed = sorted(terms, key=lambda r: sum(b << j for j, b in enumerate(r[0])))
        best = max(keyed, key=lambda r: r[1] * r[2])
        value, t = max_Q(ProposalPosterior(prior), ProposalPosterior(model))
        assert value == pytest.approx(best[1] * best[2], rel=1e-12)
        assert t.fg_mask == tuple(bool(b) for b in best[0])
        assert all(value >= post * ll - 1e-15 for _, post, ll in terms)


def test_max_Q_singleton():
    value, t = max_Q(pp(0.7), pp(0.4))
    assert str(t) == "1"
    assert value == pytest.approx(1.0 * math.log(0.4))


def test_max_Q_posterior_mode():
    # posteriors 0.72/0.98 (10), 0.02/0.98 (01), 0.18/0.98 (11)
    _, t = max_Q(pp(0.9, 0.2), pp(0.5, 0.5), posterior_only=True)
    assert str(t) == "10"


def test_max_Q_tie_goes_to_smallest_pattern():
    _, t = max_Q(pp(0.5, 0.5), pp(0.5, 0.5))
    assert t.pattern == 1


def test_threshold_assignment():
    t = threshold_assignment(pp(0.95, 0.5), 0.9)
    assert str(t) == "10" and t.in_B
    t = threshold_assignment(pp(0.5, 0.2), 0.9)
    assert str(t) == "00" and not t.in_B
    with pytest.raises(ValueError):
        threshold_assignment(pp(0.5), 1.0)
    assert threshold_Q(pp(0.95, 0.5), pp(0.8, 0.3), 0.9) == pytest.approx(math.log(0.8) + math.log(0.7))


def test_posterior_sample_forced():
    rng = np.random.default_rng(0)
    assert all(str(posterior_sample(pp(1.0), rng)) == "1" for _ in range(50))


def test_posterior_sample_frequencies():
    rng = np.random.default_rng(1)
    bits = posterior_samples(pp(0.5, 0.5), 100_000, rng)
    patterns = bits[:, 0] + 2 * bits[:, 1]
    freq = np.bincount(patterns, minlength=4)[1:] / len(patterns)
    # exact conditional law from enumeration: 1/3 each
    np.testing.assert_allclose(freq, [1 / 3] * 3, atol=4 * math.sqrt(2 / 9 / 100_000))


def test_single_and_batched_samplers_agree_in_law():
    prior = pp(0.3, 0.1, 0.6)
    rng = np.random.default_rng(2)
    single = np.array([posterior_sample(prior, rng).pattern for _ in range(20_000)])
    batch = posterior_samples(prior, 20_000, rng)
    batched = (batch * (1 << np.arange(3))).sum(axis=1)
    pats, post = posterior_table(prior)
    for pat, p in zip(pats, post):
        sd = math.sqrt(p * (1 - p) / 20_000)
        assert abs(np.mean(single == pat) - p) < 5 * sd
        assert abs(np.mean(batched == pat) - p) < 5 * sd


def test_degenerate_prior_sampling():
    rng = np.random.default_rng(0)
    with pytest.raises(DegeneratePosteriorError):
        posterior_sample(pp(0, 0, 0), rng)
    with pytest.raises(DegeneratePosteriorError):
        mc_Q(pp(0, 0, 0), pp(0.5, 0.5, 0.5), 10, rng)


def test_mc_Q_zero_variance_case():
    prior, model = pp(1.0, 1.0), pp(0.3, 0.8)
    exact = exact_Q(prior, model)
    for b in (1, 7, 1000):
        assert mc_Q(prior, model, b, np.random.default_rng(b)) == pytest.approx(exact, rel=1e-14)


def test_mc_Q_single_sample_in_support():
    prior, model = pp(0.4, 0.6, 0.2), pp(0.5, 0.3, 0.9)
    support = {round(ll, 12) for _, _, ll in brute_terms(prior.fg_prob, model.fg_prob)}
    rng = np.random.default_rng(0)
    for _ in range(50):
        assert round(mc_Q(prior, model, 1, rng), 12) in support


def test_mc_Q_converges_on_n8():
    rng = np.random.default_rng(42)
    prior, model = pp(*rng.uniform(0, 1, 8)), pp(*rng.uniform(0, 1, 8))
    exact = exact_Q(prior, model)
    est = mc_Q(prior, model, 100_000, np.random.default_rng(3))
    assert abs(est - exact) / abs(exact) < 0.02


def test_mc_Q_unbiased_across_seeds():
    prior, model = pp(0.2, 0.5, 0.05, 0.7, 0.3), pp(0.6, 0.1, 0.4, 0.9, 0.5)
    exact = exact_Q(prior, model)
    estimates = np.array([mc_Q(prior, model, 1000, np.random.default_rng(s)) for s in range(1000)])
    se = estimates.std(ddof=1) / math.sqrt(len(estimates))
    assert abs(estimates.mean() - exact) < 4 * se


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=10), st.lists(st.floats(0, 1), min_size=10, max_size=10))
def test_everything_finite(prior, model):
    model = model[: len(prior)]
    prior_m, model_m = ProposalPosterior(np.array(prior)), ProposalPosterior(np.array(model))
    if closed_form_weak_prob(prior_m) < 3 * len(prior) * EPS:
        return
    for v in (exact_Q(prior_m, model_m), max_Q(prior_m, model_m)[0], threshold_Q(prior_m, model_m, 0.9)):
        assert math.isfinite(v)


def test_joint_objective():
    assert joint_objective([-1.0, -2.0], [], LossWeights()) == -3.0
    assert joint_objective([-1.0], [-5.0, -7.0], LossWeights(lambda_u=0.0)) == -1.0
    assert LossWeights().lambda_u == 2.0
    assert joint_objective([-1.0], [-0.5], LossWeights()) == -2.0
    with pytest.raises(ValueError):
        LossWeights(lambda_u=-1)
