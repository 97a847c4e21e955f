"""Signal reconstruction and speaker-verification metrics.

Reconstruction: SI-SDR (scale-invariant, zero-mean by default) and plain
energy-ratio SDR, plus their improvements over the unprocessed mixture.
Exact-zero residuals / projections return ``inf`` / ``-inf`` sentinels, which
dataset summaries exclude from means (with a count).

Verification: EER and minDCF from a trial score list.  Both sweep every
achievable threshold; EER is read off the convex frontier of the swept
(false-accept, miss) operating points, linearly interpolated between the two
frontier points straddling the equal-error diagonal.  Both metrics depend on
scores only through their ordering, so they are invariant under strictly
increasing score transforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DegenerateSignalError, ShapeError


def _samples(x) -> np.ndarray:
    arr = getattr(x, "samples", x)
    return np.asarray(arr, dtype=np.float64)


# ---------------------------------------------------------------------------
# reconstruction metrics
# ---------------------------------------------------------------------------

def si_sdr(reference, estimate, zero_mean: bool = True) -> float:
    """Scale-invariant SDR in dB: 10*log10(|a s|^2 / |a s - s_hat|^2) with the
    optimal gain a = <s_hat, s>/|s|^2."""
    ref = _samples(reference)
    est = _samples(estimate)
    if ref.shape != est.shape:
        raise ShapeError(f"si_sdr: length mismatch {ref.shape} vs {est.shape}")
    if zero_mean:
        ref = ref - ref.mean()
        est = est - est.mean()
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise DegenerateSignalError("si_sdr: silent reference")
    alpha = float(np.dot(est, ref)) / ref_energy
    projection = alpha * ref
    noise = est - projection
    num = float(np.dot(projection, projection))
    den = float(np.dot(noise, noise))
    if den == 0.0:
        return math.inf
    if num == 0.0:
        return -math.inf
    return 10.0 * math.log10(num / den)


def sdr(reference, estimate, zero_mean: bool = True) -> float:
    """Plain energy-ratio SDR in dB: 10*log10(|s|^2 / |s - s_hat|^2).
    Scale-sensitive by construction (no gain fitting)."""
    ref = _samples(reference)
    est = _samples(estimate)
    if ref.shape != est.shape:
        raise ShapeError(f"sdr: length mismatch {ref.shape} vs {est.shape}")
    if zero_mean:
        ref = ref - ref.mean()
        est = est - est.mean()
    num = float(np.dot(ref, ref))
    if num == 0.0:
        raise DegenerateSignalError("sdr: silent reference")
    resid = ref - est
    den = float(np.dot(resid, resid))
    if den == 0.0:
        return math.inf
    return 10.0 * math.log10(num / den)


def _improvement(metric_est: float, metric_mix: float) -> float:
    if math.isinf(metric_est) and math.isinf(metric_mix) and metric_est == metric_mix:
        return 0.0
    return metric_est - metric_mix


def si_sdr_improvement(reference, estimate, mixture) -> float:
    return _improvement(si_sdr(reference, estimate), si_sdr(reference, mixture))


def sdr_improvement(reference, estimate, mixture) -> float:
    return _improvement(sdr(reference, estimate), sdr(reference, mixture))


@dataclass
class UtteranceScores:
    si_sdr_db: float
    si_sdri_db: float
    sdr_db: float
    sdri_db: float

    def as_dict(self) -> dict:
        return {"si_sdr_db": self.si_sdr_db, "si_sdri_db": self.si_sdri_db,
                "sdr_db": self.sdr_db, "sdri_db": self.sdri_db}


def score_extraction(reference, estimate, mixture) -> UtteranceScores:
    return UtteranceScores(
        si_sdr_db=si_sdr(reference, estimate),
        si_sdri_db=si_sdr_improvement(reference, estimate, mixture),
        sdr_db=sdr(reference, estimate),
        sdri_db=sdr_improvement(reference, estimate, mixture),
    )


def summarize_scores(rows: list[UtteranceScores]) -> dict:
    """Dataset means; non-finite sentinels are excluded, with counts."""
    summary: dict = {"n_utterances": len(rows)}
    for key in ("si_sdr_db", "si_sdri_db", "sdr_db", "sdri_db"):
        values = np.array([getattr(r, key) for r in rows])
        finite = values[np.isfinite(values)]
        summary[f"mean_{key}"] = float(finite.mean()) if len(finite) else None
        summary[f"excluded_{key}"] = int(len(values) - len(finite))
    return summary


def cosine_score(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0.0:
        raise DegenerateSignalError("cosine_score: zero-norm vector")
    return float(np.dot(a, b) / denom)


# ---------------------------------------------------------------------------
# verification metrics
# ---------------------------------------------------------------------------

@dataclass
class TrialScores:
    """Scores with boolean same-speaker labels (True = target trial)."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=bool)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise DataError(f"trial scores/labels must be equal-length 1-D, got "
                            f"{self.scores.shape} and {self.labels.shape}")
        if not self.labels.any():
            raise DataError("trial set has no positive (same-speaker) trials")
        if self.labels.all():
            raise DataError("trial set has no negative (different-speaker) trials")


def operating_points(trials: TrialScores) -> tuple[np.ndarray, np.ndarray]:
    """(P_fa, P_miss) at every achievable accept-if-score>=threshold point,
    from reject-all to accept-all.  Tied scores share one operating point."""
    order = np.argsort(-trials.scores, kind="stable")
    scores = trials.scores[order]
    labels = trials.labels[order]
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    cum_pos = np.cumsum(labels)
    cum_neg = np.cumsum(~labels)
    # k accepted = prefix sizes at score boundaries (cannot split ties)
    boundary = np.nonzero(np.diff(scores) != 0.0)[0] + 1
    ks = np.concatenate([[0], boundary, [len(scores)]])
    p_fa = np.concatenate([[0.0], cum_neg[ks[1:] - 1] / n_neg])
    p_miss = np.concatenate([[1.0], 1.0 - cum_pos[ks[1:] - 1] / n_pos])
    return p_fa, p_miss


def _lower_hull(p_fa: np.ndarray, p_miss: np.ndarray) -> list[tuple[float, float]]:
    """Convex lower frontier of the swept operating points in (P_fa, P_miss):
    every point on it is achievable by (randomized) thresholding."""
    order = np.lexsort((p_miss, p_fa))
    pts: list[tuple[float, float]] = []
    for i in order:
        x, y = float(p_fa[i]), float(p_miss[i])
        if pts and pts[-1][0] == x:
            continue  # keep only the best P_miss at each P_fa
        pts.append((x, y))

    hull: list[tuple[float, float]] = []
    for p in pts:
        while len(hull) >= 2:
            (ox, oy), (ax, ay) = hull[-2], hull[-1]
            if (ax - ox) * (p[1] - oy) - (ay - oy) * (p[0] - ox) <= 0.0:
                hull.pop()
            else:
                break
        hull.append(p)
    return hull


def eer(trials: TrialScores) -> float:
    """Equal error rate: the P_fa == P_miss crossing of the operating
    frontier, linearly interpolated between adjacent operating points."""
    hull = _lower_hull(*operating_points(trials))
    prev_fa, prev_miss = hull[0]
    prev_d = prev_miss - prev_fa
    if prev_d <= 0.0:  # frontier starts at or below the diagonal
        return prev_miss
    for fa, miss in hull[1:]:
        d = miss - fa
        if d <= 0.0:
            lam = prev_d / (prev_d - d)
            return prev_miss + (miss - prev_miss) * lam
        prev_fa, prev_miss, prev_d = fa, miss, d
    return prev_miss  # unreachable for valid trial sets


def min_dcf(trials: TrialScores, p_target: float = 0.01,
            c_miss: float = 1.0, c_fa: float = 1.0) -> float:
    """Minimum normalized detection cost over all swept thresholds."""
    if not 0.0 < p_target < 1.0:
        raise DataError(f"p_target must be in (0, 1), got {p_target}")
    p_fa, p_miss = operating_points(trials)
    cost = c_miss * p_miss * p_target + c_fa * p_fa * (1.0 - p_target)
    norm = min(c_miss * p_target, c_fa * (1.0 - p_target))
    return float(np.min(cost) / norm)
