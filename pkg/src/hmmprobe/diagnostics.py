"""Acoustic-score statistics, the score-variance hypothesis test, and
correlation analyses.

The acoustic score of a frame against a diagonal-normal state is half its
squared Mahalanobis distance plus half the log-variance sum. Under the model
twice the centered score is chi-squared with d degrees of freedom, so the
per-state score variance has null value d/2: occupancy-weighted score means
match the closed form at any Baum-Welch fixed point regardless of the data,
while the score variance does not, which is what makes it a usable test of
the emission assumption.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus
from .dists import DiagonalGaussian, RandomSource
from .hmm import HmmModel
from .regions import partition_regions
from .util import DataError

log = logging.getLogger(__name__)

MIN_OCCUPANCY = 1e-6


def frame_score(model: HmmModel, tied_id: int, x) -> float:
    """V_j(x): half squared standardized distance plus half log-variance sum."""
    dist = model.outputs[int(tied_id)]
    if not isinstance(dist, DiagonalGaussian):
        raise DataError("acoustic scores are defined for diagonal normal outputs")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != dist.dim:
        raise DataError("dimension mismatch")
    quad = ((x - dist.mean) ** 2 / dist.variance).sum(axis=-1)
    out = 0.5 * quad + 0.5 * np.log(dist.variance).sum()
    return float(out) if np.ndim(out) == 0 else out


def score_frames(model: HmmModel, tied_track, frames: np.ndarray) -> np.ndarray:
    """Score each frame against its aligned tied state."""
    tied_track = np.asarray(tied_track)
    out = np.empty(len(tied_track))
    for tid in np.unique(tied_track):
        mask = tied_track == tid
        out[mask] = frame_score(model, int(tid), frames[mask])
    return out


def expected_score(model: HmmModel, tied_id: int) -> float:
    """Closed-form occupancy-weighted score mean at a Baum-Welch fixed
    point: d/2 plus half the log-variance sum."""
    dist = model.outputs[int(tied_id)]
    if not isinstance(dist, DiagonalGaussian):
        raise DataError("expected score defined for diagonal normal outputs")
    return 0.5 * dist.dim + 0.5 * float(np.log(dist.variance).sum())


# ---------------------------------------------------------------------------
# Occupancy-weighted score statistics
# ---------------------------------------------------------------------------

@dataclass
class ScoreStats:
    dim: int
    tied_ids: list[int]
    occupancy: np.ndarray
    mean: np.ndarray
    variance: np.ndarray

    def as_dict(self) -> dict[int, tuple[float, float, float]]:
        return {tid: (float(self.occupancy[i]), float(self.mean[i]),
                      float(self.variance[i]))
                for i, tid in enumerate(self.tied_ids)}


def score_stats(model: HmmModel, corpus: Corpus, alignments: dict) -> ScoreStats:
    """Occupancy-weighted per-state score mean and variance.

    alignments maps utterance id to an Alignment; fractional alignments use
    their posterior occupancies, hard ones count each frame once. States
    with (near-)zero total occupancy are omitted with a warning.
    """
    tied_index = model.tied_index()
    tids = model.tied_ids
    t_count = len(tids)
    occ = np.zeros(t_count)
    s1 = np.zeros(t_count)
    s2 = np.zeros(t_count)
    for utt in corpus:
        align = alignments.get(utt.utt_id)
        if align is None:
            raise DataError(f"{utt.utt_id}: missing alignment")
        occ_t = align.tied_occupancy(tied_index)
        scores = np.empty((utt.n_frames, t_count))
        active = np.flatnonzero(occ_t.sum(axis=0) > 0.0)
        scores[:, :] = 0.0
        for i in active:
            scores[:, i] = frame_score(model, tids[i], utt.frames)
        occ += occ_t.sum(axis=0)
        s1 += (occ_t * scores).sum(axis=0)
        s2 += (occ_t * scores ** 2).sum(axis=0)
    keep = occ > MIN_OCCUPANCY
    dropped = [tids[i] for i in np.flatnonzero(~keep)]
    if dropped:
        log.warning("omitting %d zero-occupancy states from score stats: %s",
                    len(dropped), dropped)
    mean = s1[keep] / occ[keep]
    var = s2[keep] / occ[keep] - mean ** 2
    return ScoreStats(model.dim, [tids[i] for i in np.flatnonzero(keep)],
                      occ[keep], mean, np.maximum(var, 0.0))


def identity_gap(model: HmmModel, stats: ScoreStats) -> dict[int, float]:
    """Relative gap between measured score means and their fixed-point
    closed form, per state."""
    gaps = {}
    for i, tid in enumerate(stats.tied_ids):
        rhs = expected_score(model, tid)
        gaps[tid] = abs(stats.mean[i] - rhs) / max(1.0, abs(rhs))
    return gaps


# ---------------------------------------------------------------------------
# Variance test
# ---------------------------------------------------------------------------

@dataclass
class VarianceVerdict:
    tied_id: int
    occupancy: float
    observed: float
    lower: float
    upper: float

    @property
    def verdict(self) -> str:
        if self.observed > self.upper:
            return "high"
        if self.observed < self.lower:
            return "low"
        return "ok"


@dataclass
class VarianceTestReport:
    null_value: float
    level: float
    verdicts: list[VarianceVerdict]
    summary: dict = field(default_factory=dict)


def variance_test(stats: ScoreStats, d: int | None = None, null_draws: int = 400,
                  rng: RandomSource | None = None, level: float = 0.99,
                  min_occupancy: float = 100.0) -> VarianceTestReport:
    """Per-state score-variance verdicts against Monte-Carlo null envelopes.

    The null value is d/2. For a state with occupancy n the envelope is the
    central `level` interval of the sampling distribution of the variance of
    n independent draws of one half a chi-squared with d degrees of freedom,
    estimated from `null_draws` replicates.
    """
    if d is None:
        d = stats.dim
    if rng is None:
        rng = RandomSource(0, "variance-test-null")
    alpha = 1.0 - level
    null_value = d / 2.0
    cache: dict[int, tuple[float, float]] = {}
    verdicts = []
    for i, tid in enumerate(stats.tied_ids):
        occ = float(stats.occupancy[i])
        if occ < min_occupancy:
            continue
        n_eff = int(round(occ))
        if n_eff not in cache:
            draws = rng.split(f"n{n_eff}").gen.chisquare(d, size=(null_draws, n_eff)) / 2.0
            variances = draws.var(axis=1)
            cache[n_eff] = (float(np.quantile(variances, alpha / 2)),
                            float(np.quantile(variances, 1.0 - alpha / 2)))
        lo, hi = cache[n_eff]
        verdicts.append(VarianceVerdict(tid, occ, float(stats.variance[i]), lo, hi))
    if not verdicts:
        raise DataError("no state meets the occupancy threshold")
    observed = np.array([v.observed for v in verdicts])
    uppers = np.array([v.upper for v in verdicts])
    n_high = sum(v.verdict == "high" for v in verdicts)
    summary = {
        "null_value": null_value,
        "n_states": len(verdicts),
        "median_observed": float(np.median(observed)),
        "min_observed": float(observed.min()),
        "median_upper": float(np.median(uppers)),
        "frac_high": n_high / len(verdicts),
        "frac_outside": sum(v.verdict != "ok" for v in verdicts) / len(verdicts),
        "departure": bool(np.median(observed) > np.median(uppers)),
    }
    return VarianceTestReport(null_value, level, verdicts, summary)


# ---------------------------------------------------------------------------
# Correlation estimators
# ---------------------------------------------------------------------------

def _clamp(rho: float, context: str) -> float:
    if rho > 1.0 or rho < -1.0:
        warnings.warn(f"correlation estimate {rho:.4f} outside [-1, 1] "
                      f"({context}); clamping", stacklevel=3)
        return max(-1.0, min(1.0, rho))
    return rho


def lag1_correlation(series, reference_mean: float | None = None) -> float:
    """Adjacent-score correlation relative to a list or supplied mean.

    numerator: mean over the n-1 adjacent products of centered values;
    denominator: mean of the n centered squares. The ratio can leave [-1,1]
    on short series; such values are clamped with a warning.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1 or len(x) < 3:
        raise DataError("series must be one-dimensional with length >= 3")
    mu = float(x.mean()) if reference_mean is None else float(reference_mean)
    c = x - mu
    den = float((c ** 2).mean())
    if den <= 0.0:
        raise DataError("constant series: correlation undefined")
    num = float((c[:-1] * c[1:]).sum() / (len(x) - 1))
    return _clamp(num / den, "lag-1")


def _pooled_lag1(lists, mean: float, context: str) -> float | None:
    """Lag-1 correlation pooled over several lists with a common mean;
    adjacent pairs never cross list boundaries."""
    num = 0.0
    n_pairs = 0
    den = 0.0
    n_vals = 0
    for xs in lists:
        c = np.asarray(xs, dtype=np.float64) - mean
        den += float((c ** 2).sum())
        n_vals += len(c)
        if len(c) >= 2:
            num += float((c[:-1] * c[1:]).sum())
            n_pairs += len(c) - 1
    if n_pairs == 0 or den <= 0.0:
        return None
    return _clamp((num / n_pairs) / (den / n_vals), context)


@dataclass
class CorrelationReport:
    # speaker -> (lead-score count, rho)
    between: dict[str, tuple[int, float]]
    # speaker -> shuffled-baseline rho relative to the global mean
    shuffled: dict[str, float]
    # tied state -> (pair count, rho)
    within: dict[int, tuple[int, float]]

    def within_values(self) -> np.ndarray:
        return np.array([rho for _n, rho in self.within.values()])


def correlation_report(model: HmmModel, corpus: Corpus, tracks: dict,
                       rng: RandomSource | None = None,
                       min_pairs: int = 20) -> CorrelationReport:
    """Score-correlation structure of a corpus under forced-alignment tracks.

    Between-region: per speaker, the lag-1 correlation of the scores of
    region lead frames, adjacency confined to utterances, relative to the
    speaker's own mean. Shuffled baseline: the same lists permuted within
    speaker and correlated relative to the mean over all speakers, which
    isolates constant speaker offsets from temporal structure. Within-region:
    per tied state, lag-1 correlation of adjacent same-region scores
    relative to that state's overall score mean, for states with at least
    min_pairs adjacent pairs.
    """
    if rng is None:
        rng = RandomSource(0, "corr-shuffle")
    by_speaker: dict[str, list[np.ndarray]] = {}
    state_scores: dict[int, list[float]] = {}
    state_runs: dict[int, list[np.ndarray]] = {}

    for utt in corpus:
        states, tied = tracks[utt.utt_id]
        scores = score_frames(model, tied, utt.frames)
        regions = partition_regions(states)
        leads = np.array([scores[r.start] for r in regions])
        by_speaker.setdefault(utt.speaker, []).append(leads)
        for r in regions:
            tid = int(tied[r.start])
            run = scores[r.start:r.stop]
            state_scores.setdefault(tid, []).extend(float(v) for v in run)
            if len(run) >= 2:
                state_runs.setdefault(tid, []).append(run)

    between: dict[str, tuple[int, float]] = {}
    shuffled: dict[str, float] = {}
    all_leads = np.concatenate([np.concatenate(v) for v in by_speaker.values()])
    global_mean = float(all_leads.mean())
    for spk in sorted(by_speaker):
        lists = by_speaker[spk]
        pooled = np.concatenate(lists)
        rho = _pooled_lag1(lists, float(pooled.mean()), f"between/{spk}")
        if rho is not None:
            between[spk] = (len(pooled), rho)
        perm = rng.split(f"shuffle/{spk}").gen.permutation(len(pooled))
        rho_s = _pooled_lag1([pooled[perm]], global_mean, f"speaker/{spk}")
        if rho_s is not None:
            shuffled[spk] = rho_s

    within: dict[int, tuple[int, float]] = {}
    for tid in sorted(state_runs):
        runs = state_runs[tid]
        n_pairs = sum(len(r) - 1 for r in runs)
        if n_pairs < min_pairs:
            continue
        mean = float(np.mean(state_scores[tid]))
        rho = _pooled_lag1(runs, mean, f"within/{tid}")
        if rho is not None:
            within[tid] = (n_pairs, rho)
    return CorrelationReport(between, shuffled, within)


# ---------------------------------------------------------------------------
# Distribution comparison helpers
# ---------------------------------------------------------------------------

def ks_two_sample(x, y) -> tuple[float, float]:
    """Two-sample Kolmogorov-Smirnov statistic and its 1% critical value."""
    xs = np.sort(np.asarray(x, dtype=np.float64))
    ys = np.sort(np.asarray(y, dtype=np.float64))
    m, n = len(xs), len(ys)
    if m == 0 or n == 0:
        raise DataError("KS test needs non-empty samples")
    grid = np.unique(np.concatenate([xs, ys]))
    f1 = np.searchsorted(xs, grid, side="right") / m
    f2 = np.searchsorted(ys, grid, side="right") / n
    d = float(np.abs(f1 - f2).max())
    crit = 1.6276 * math.sqrt((m + n) / (m * n))
    return d, crit
