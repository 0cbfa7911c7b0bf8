"""State-region partitioning and the six frame-rearrangement operations.

A state region is a maximal run of consecutive frames carrying the same
state id. The operations rebuild an utterance region by region from two
aligned frame streams, a "real" one and a resampled one, choosing per code
which stream supplies each position and whether the region's lead frame is
repeated.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Utterance
from .hmm import Alignment
from .util import DataError

REGION_CODES = ("r1r2r3", "r1r1r1", "s1s2s3", "s1s1s1", "r1s2s3", "r1s1s1")


@dataclass(frozen=True)
class StateRegion:
    state_id: int
    start: int  # inclusive
    stop: int   # exclusive

    def __len__(self):
        return self.stop - self.start


def _states_of(alignment) -> np.ndarray:
    if isinstance(alignment, Alignment):
        return np.asarray(alignment.state_track())
    return np.asarray(alignment)


def partition_regions(alignment) -> list[StateRegion]:
    """Maximal constant-state runs of a hard alignment (or raw id track)."""
    states = _states_of(alignment)
    if states.ndim != 1 or len(states) == 0:
        raise DataError("alignment must be a non-empty id sequence")
    bounds = np.flatnonzero(np.r_[True, states[1:] != states[:-1]])
    stops = np.r_[bounds[1:], len(states)]
    return [StateRegion(int(states[b]), int(b), int(e)) for b, e in zip(bounds, stops)]


def region_stats(region_lists) -> dict:
    """Totals across utterances: frames, regions, mean region length."""
    n_frames = sum(sum(len(r) for r in regions) for regions in region_lists)
    n_regions = sum(len(regions) for regions in region_lists)
    return {
        "total_frames": n_frames,
        "region_count": n_regions,
        "mean_region_length": n_frames / n_regions if n_regions else float("nan"),
    }


def apply_region_code(real: Utterance, resampled: Utterance, regions,
                      code: str) -> Utterance:
    """Rebuild the utterance per the region operation code.

    Per region spanning positions i..j:
      r1r2r3  real frames unchanged
      r1r1r1  real lead frame repeated through the region
      s1s2s3  resampled frames unchanged
      s1s1s1  resampled lead frame repeated
      r1s2s3  real lead frame, then the resampled frames from position 2 on
      r1s1s1  real lead frame, then the region's lead resampled frame repeated
    """
    if code not in REGION_CODES:
        raise DataError(f"unknown region code {code!r}")
    if real.n_frames != resampled.n_frames:
        raise DataError(f"{real.utt_id}: real and resampled lengths differ")
    n = real.n_frames
    if sum(len(r) for r in regions) != n:
        raise DataError(f"{real.utt_id}: regions do not tile the utterance")
    rf = real.frames
    sf = resampled.frames
    out = np.empty_like(rf)
    for reg in regions:
        b, e = reg.start, reg.stop
        if code == "r1r2r3":
            out[b:e] = rf[b:e]
        elif code == "r1r1r1":
            out[b:e] = rf[b]
        elif code == "s1s2s3":
            out[b:e] = sf[b:e]
        elif code == "s1s1s1":
            out[b:e] = sf[b]
        elif code == "r1s2s3":
            out[b] = rf[b]
            out[b + 1:e] = sf[b + 1:e]
        else:  # r1s1s1
            out[b] = rf[b]
            out[b + 1:e] = sf[b]
    return Utterance(real.utt_id, real.speaker, real.words, out, truth=real.truth)


def changed_frames(code: str, regions) -> int:
    """Positions where the code's output may differ from the real stream.

    For r1s2s3 this is exactly (total frames - region count): every position
    except each region's lead frame.
    """
    if code == "r1r2r3":
        return 0
    total = sum(len(r) for r in regions)
    leads = len(regions)
    if code in ("s1s2s3", "s1s1s1"):
        return total
    if code in ("r1s2s3", "r1s1s1", "r1r1r1"):
        return total - leads
    raise DataError(f"unknown region code {code!r}")
