"""Reconstruction and verification metrics against independent oracles."""

import math

import numpy as np
import pytest

from tselab.errors import DataError, DegenerateSignalError, ShapeError
from tselab.metrics import (TrialScores, cosine_score, eer, min_dcf,
                            operating_points, score_extraction, sdr,
                            sdr_improvement, si_sdr, si_sdr_improvement,
                            summarize_scores)

# ---------------------------------------------------------------------------
# brute-force oracles
# ---------------------------------------------------------------------------


def oracle_points(scores, labels):
    """Naive per-threshold sweep (accept iff score >= threshold)."""
    thresholds = sorted(set(scores)) + [max(scores) + 1.0]
    pos = np.asarray(labels, dtype=bool)
    pts = []
    for th in [-np.inf] + thresholds:
        accept = np.asarray(scores) >= th
        p_fa = np.mean(accept[~pos])
        p_miss = np.mean(~accept[pos])
        pts.append((float(p_fa), float(p_miss)))
    return pts


def oracle_eer(scores, labels):
    """Exhaustive sweep: minimum equal-error value over every diagonal
    crossing achievable by (randomized mixes of) two operating points."""
    pts = oracle_points(scores, labels)
    best = math.inf
    for f1, m1 in pts:
        if abs(m1 - f1) < 1e-15:
            best = min(best, m1)
    for i, (f1, m1) in enumerate(pts):
        for f2, m2 in pts[i + 1:]:
            d1, d2 = m1 - f1, m2 - f2
            if d1 * d2 < 0.0:
                lam = d1 / (d1 - d2)
                best = min(best, m1 + (m2 - m1) * lam)
    return best


def oracle_min_dcf(scores, labels, p_target=0.01, c_miss=1.0, c_fa=1.0):
    pts = oracle_points(scores, labels)
    costs = [c_miss * m * p_target + c_fa * f * (1 - p_target) for f, m in pts]
    return min(costs) / min(c_miss * p_target, c_fa * (1 - p_target))


def random_trials(rng, n=60, separation=0.0):
    labels = rng.random(n) < 0.5
    labels[0], labels[1] = True, False  # both classes present
    scores = rng.standard_normal(n) + separation * labels
    return scores, labels


# ---------------------------------------------------------------------------
# SI-SDR / SDR
# ---------------------------------------------------------------------------


class TestSiSdr:
    def test_exact_reconstruction_is_positive_infinity(self):
        s = np.array([0.3, -0.2, 0.5, -0.6])
        assert si_sdr(s, s.copy()) == math.inf

    def test_orthogonal_estimate_is_negative_infinity(self):
        s = np.array([1.0, 0.0, -1.0, 0.0])
        est = np.array([0.0, 1.0, 0.0, -1.0])
        assert si_sdr(s, est) == -math.inf

    def test_hand_case_without_zero_mean(self):
        # alpha = 1, |alpha s|^2 = 1, residual norm 1 -> 0 dB
        assert abs(si_sdr([1.0, 0.0], [1.0, 1.0], zero_mean=False)) < 1e-12

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        s = rng.standard_normal(4000)
        est = s + 0.3 * rng.standard_normal(4000)
        base = si_sdr(s, est)
        for alpha in (0.01, 0.5, 3.0, 1000.0):
            assert abs(si_sdr(s, alpha * est) - base) < 1e-9

    def test_dc_offset_invariance(self):
        rng = np.random.default_rng(1)
        s = rng.standard_normal(1000)
        est = s + 0.2 * rng.standard_normal(1000)
        assert abs(si_sdr(s, est + 5.0) - si_sdr(s, est)) < 1e-9

    def test_silent_reference_rejected(self):
        with pytest.raises(DegenerateSignalError):
            si_sdr(np.zeros(10), np.ones(10))

    def test_length_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            si_sdr(np.ones(5), np.ones(6))


class TestSdr:
    def test_exact_reconstruction(self):
        s = np.array([0.1, -0.4, 0.2])
        assert sdr(s, s.copy()) == math.inf

    def test_double_scale_gives_zero_db_where_si_sdr_is_inf(self):
        rng = np.random.default_rng(2)
        s = rng.standard_normal(100)
        assert abs(sdr(s, 2.0 * s)) < 1e-12
        assert si_sdr(s, 2.0 * s) == math.inf

    def test_zero_estimate_gives_zero_db(self):
        rng = np.random.default_rng(3)
        s = rng.standard_normal(100)
        assert abs(sdr(s, np.zeros(100))) < 1e-12


class TestImprovements:
    def test_identity_system_is_zero(self):
        rng = np.random.default_rng(4)
        s = rng.standard_normal(500)
        mix = s + rng.standard_normal(500)
        assert si_sdr_improvement(s, mix, mix) == 0.0
        assert sdr_improvement(s, mix, mix) == 0.0

    def test_dataset_mean_matches_direct_summation(self):
        rng = np.random.default_rng(5)
        rows = []
        direct = []
        for _ in range(20):
            s = rng.standard_normal(300)
            mix = s + 0.7 * rng.standard_normal(300)
            est = s + 0.2 * rng.standard_normal(300)
            rows.append(score_extraction(s, est, mix))
            direct.append(si_sdr(s, est) - si_sdr(s, mix))
        summary = summarize_scores(rows)
        assert abs(summary["mean_si_sdri_db"] - np.mean(direct)) < 1e-12
        assert summary["excluded_si_sdri_db"] == 0

    def test_sentinels_excluded_from_means(self):
        rng = np.random.default_rng(6)
        s = rng.standard_normal(100)
        mix = s + rng.standard_normal(100)
        rows = [score_extraction(s, s.copy(), mix),  # +inf si_sdr
                score_extraction(s, mix, mix)]
        summary = summarize_scores(rows)
        assert summary["excluded_si_sdr_db"] == 1
        assert np.isfinite(summary["mean_si_sdr_db"])


# ---------------------------------------------------------------------------
# EER / minDCF
# ---------------------------------------------------------------------------


class TestEer:
    def test_perfect_separation(self):
        trials = TrialScores([0.9, 0.8, 0.2, 0.1], [True, True, False, False])
        assert eer(trials) == 0.0

    def test_four_trial_crossing(self):
        trials = TrialScores([0.9, 0.8, 0.85, 0.1], [True, True, False, False])
        assert abs(eer(trials) - 0.25) < 1e-12

    def test_random_scores_near_half(self):
        rng = np.random.default_rng(7)
        n = 4000
        labels = np.arange(n) % 2 == 0
        scores = rng.standard_normal(n)
        assert abs(eer(TrialScores(scores, labels)) - 0.5) < 0.05

    def test_matches_exhaustive_sweep(self):
        rng = np.random.default_rng(8)
        for k in range(120):
            scores, labels = random_trials(rng, n=40, separation=(k % 4) * 0.7)
            got = eer(TrialScores(scores, labels))
            want = oracle_eer(scores, labels)
            assert abs(got - want) < 1e-12

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(9)
        scores, labels = random_trials(rng, n=50, separation=1.0)
        base = eer(TrialScores(scores, labels))
        for fn in (lambda x: 3 * x + 2, np.tanh, lambda x: np.exp(0.5 * x)):
            assert abs(eer(TrialScores(fn(scores), labels)) - base) < 1e-12

    def test_needs_both_classes(self):
        with pytest.raises(DataError):
            TrialScores([0.1, 0.2], [True, True])


class TestMinDcf:
    def test_perfect_separation(self):
        trials = TrialScores([0.9, 0.8, 0.2, 0.1], [True, True, False, False])
        assert min_dcf(trials) == 0.0

    def test_accept_everything_bound(self):
        # the accept-all operating point costs c_fa*(1-p_t)/norm; the minimum
        # can never exceed it
        rng = np.random.default_rng(10)
        scores, labels = random_trials(rng, n=30)
        p_t, c_m, c_f = 0.01, 1.0, 1.0
        bound = c_f * (1 - p_t) / min(c_m * p_t, c_f * (1 - p_t))
        assert min_dcf(TrialScores(scores, labels), p_t, c_m, c_f) <= bound

    def test_four_trial_value(self):
        scores = [0.9, 0.8, 0.85, 0.1]
        labels = [True, True, False, False]
        got = min_dcf(TrialScores(scores, labels))
        assert abs(got - oracle_min_dcf(scores, labels)) < 1e-12
        assert abs(got - 0.5) < 1e-12  # best point: accept only score 0.9

    def test_matches_exhaustive_sweep(self):
        rng = np.random.default_rng(11)
        for k in range(120):
            scores, labels = random_trials(rng, n=40, separation=(k % 3) * 0.8)
            got = min_dcf(TrialScores(scores, labels), p_target=0.05)
            want = oracle_min_dcf(scores, labels, p_target=0.05)
            assert abs(got - want) < 1e-12

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(12)
        scores, labels = random_trials(rng, n=50, separation=1.0)
        base = min_dcf(TrialScores(scores, labels))
        assert abs(min_dcf(TrialScores(np.tanh(scores), labels)) - base) < 1e-12


class TestOperatingPoints:
    def test_endpoints_present(self):
        trials = TrialScores([0.3, 0.7, 0.5], [False, True, False])
        p_fa, p_miss = operating_points(trials)
        assert (p_fa[0], p_miss[0]) == (0.0, 1.0)
        assert (p_fa[-1], p_miss[-1]) == (1.0, 0.0)

    def test_ties_share_one_point(self):
        trials = TrialScores([0.5, 0.5, 0.1], [True, False, False])
        p_fa, p_miss = operating_points(trials)
        assert len(p_fa) == 3  # reject-all, {0.5 ties}, accept-all


class TestCosine:
    def test_parallel_and_orthogonal(self):
        assert abs(cosine_score([1.0, 0.0], [2.0, 0.0]) - 1.0) < 1e-12
        assert abs(cosine_score([1.0, 0.0], [0.0, 5.0])) < 1e-12
