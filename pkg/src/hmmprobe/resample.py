"""Urn construction and bootstrap resampling of corpora.

Each tied state (optionally per speaker) owns a weighted urn of frame
references into a source corpus. Pseudo utterances draw frames with
replacement from the urn matching each position of a state sequence, which
preserves marginal per-state frame distributions while destroying temporal
dependence.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, TruthInfo, Utterance
from .dists import RandomSource
from .hmm import Alignment
from .util import DataError

MAGIC = b"HMPU"
VERSION = 1
OCCUPANCY_CUTOFF = 1e-8  # fractional entries below this are dropped


@dataclass
class Urn:
    """Weighted frame references for one (tied state[, speaker])."""

    tied_id: int
    speaker: str | None
    utt_idx: np.ndarray
    frame_idx: np.ndarray
    weights: np.ndarray
    cumulative: np.ndarray = field(default=None)

    def __post_init__(self):
        self.utt_idx = np.asarray(self.utt_idx, dtype=np.uint32)
        self.frame_idx = np.asarray(self.frame_idx, dtype=np.uint32)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if len(self.weights) == 0:
            raise DataError(f"urn for state {self.tied_id} is empty")
        if not np.all(self.weights > 0.0):
            raise DataError(f"urn for state {self.tied_id} has non-positive weights")
        if self.cumulative is None:
            self.cumulative = np.cumsum(self.weights)
        else:
            self.cumulative = np.asarray(self.cumulative, dtype=np.float64)
            if len(self.cumulative) != len(self.weights) or np.any(
                    np.abs(np.diff(self.cumulative) - self.weights[1:]) > 1e-9):
                raise DataError(f"urn for state {self.tied_id}: bad cumulative table")

    def __len__(self):
        return len(self.weights)

    @property
    def total_weight(self) -> float:
        return float(self.cumulative[-1])

    def draw(self, u: float) -> int:
        """Entry index for a uniform draw; interval j gets mass w_j/total."""
        return int(np.searchsorted(self.cumulative, u * self.total_weight,
                                   side="right").clip(0, len(self.weights) - 1))


@dataclass
class UrnSet:
    mode: str  # "si" | "sd"
    count_mode: str  # "hard" | "fractional"
    urns: dict
    source: Corpus
    source_hash: str

    def key(self, state: int, speaker: str | None = None):
        return (int(state), speaker) if self.mode == "sd" else int(state)

    def get(self, state: int, speaker: str | None = None) -> Urn:
        key = self.key(state, speaker)
        urn = self.urns.get(key)
        if urn is None:
            raise DataError(f"no urn for state {state}"
                            + (f", speaker {speaker}" if self.mode == "sd" else ""))
        return urn

    def frame(self, urn: Urn, entry: int) -> np.ndarray:
        src = self.source[int(urn.utt_idx[entry])]
        return src.frames[int(urn.frame_idx[entry])]


def _normalize_mode(mode: str) -> str:
    m = {"si": "si", "speaker-independent": "si",
         "sd": "sd", "speaker-dependent": "sd"}.get(mode)
    if m is None:
        raise DataError(f"unknown resampling mode {mode!r}")
    return m


def build_urns(corpus: Corpus, alignments, mode: str = "si",
               count_mode: str = "hard") -> UrnSet:
    """Fill urns from aligned frames.

    Hard counting puts weight one on each frame's aligned state; fractional
    counting uses forward-backward occupancies (entries under the cutoff are
    dropped). alignments maps utterance id to an Alignment, or is None to
    use simulation truth (hard only).
    """
    mode = _normalize_mode(mode)
    if count_mode not in ("hard", "fractional"):
        raise DataError(f"unknown count mode {count_mode!r}")
    acc: dict = {}

    def add(state: int, speaker: str, ui: int, fi: int, w: float):
        key = (state, speaker) if mode == "sd" else state
        bucket = acc.setdefault(key, ([], [], []))
        bucket[0].append(ui)
        bucket[1].append(fi)
        bucket[2].append(w)

    for ui, utt in enumerate(corpus):
        if alignments is None:
            if utt.truth is None:
                raise DataError(f"{utt.utt_id}: no alignment and no truth metadata")
            if count_mode != "hard":
                raise DataError("fractional counting needs forward-backward alignments")
            for fi, tid in enumerate(utt.truth.tied_ids):
                add(int(tid), utt.speaker, ui, fi, 1.0)
            continue
        align = alignments.get(utt.utt_id)
        if align is None:
            raise DataError(f"{utt.utt_id}: missing alignment")
        if count_mode == "hard":
            if not align.is_hard:
                raise DataError(f"{utt.utt_id}: hard counting needs a hard alignment")
            for fi, tid in enumerate(align.tied_track()):
                add(int(tid), utt.speaker, ui, fi, 1.0)
        else:
            if align.is_hard:
                raise DataError(f"{utt.utt_id}: fractional counting needs occupancies")
            tied = align.graph.node_tied
            for fi in range(align.n_frames):
                gamma = align.gamma[fi]
                occ: dict[int, float] = {}
                for v in np.flatnonzero(gamma > OCCUPANCY_CUTOFF):
                    tid = int(tied[v])
                    occ[tid] = occ.get(tid, 0.0) + float(gamma[v])
                for tid, w in sorted(occ.items()):
                    if w > OCCUPANCY_CUTOFF:
                        add(tid, utt.speaker, ui, fi, w)

    urns = {}
    for key, (uis, fis, ws) in acc.items():
        tied_id = key[0] if mode == "sd" else key
        speaker = key[1] if mode == "sd" else None
        urns[key] = Urn(tied_id, speaker, np.asarray(uis), np.asarray(fis),
                        np.asarray(ws))
    return UrnSet(mode, count_mode, urns, corpus, corpus.content_hash())


def draw_frame(urns: UrnSet, state: int, speaker: str | None,
               rng: RandomSource, fallback: UrnSet | None = None) -> np.ndarray:
    """One frame drawn with replacement from the matching urn.

    With a speaker-independent fallback set, a missing speaker-dependent urn
    backs off instead of raising.
    """
    try:
        urn = urns.get(state, speaker)
    except DataError:
        if fallback is not None:
            urn = fallback.get(state, None)
            return fallback.frame(urn, urn.draw(rng.uniform()))
        raise
    return urns.frame(urn, urn.draw(rng.uniform()))


def resample_utterance(urns: UrnSet, states: np.ndarray, tied: np.ndarray,
                       rng: RandomSource, utt_id: str, speaker: str | None = None,
                       words=(), fallback: UrnSet | None = None) -> Utterance:
    """Pseudo utterance over a fixed state sequence; frames are independent
    draws from the per-state urns given that sequence."""
    if len(states) != len(tied):
        raise DataError(f"{utt_id}: state and tied tracks differ in length")
    frames = np.empty((len(tied), urns.source.dim))
    for t, tid in enumerate(tied):
        frames[t] = draw_frame(urns, int(tid), speaker, rng, fallback)
    truth = TruthInfo((), np.asarray(states, dtype=np.int32).copy(),
                      np.asarray(tied, dtype=np.int32).copy())
    return Utterance(utt_id, speaker or "resampled", tuple(words), frames, truth=truth)


def parallel_resample(urns: UrnSet, corpus: Corpus, tracks, rng: RandomSource,
                      speaker_dependent: bool = False,
                      fallback: UrnSet | None = None) -> Corpus:
    """Resampled twin of a corpus: same ids, lengths, and state sequences."""
    out = []
    for utt in corpus:
        states, tied = tracks[utt.utt_id]
        spk = utt.speaker if speaker_dependent else None
        sub = rng.split(f"utt/{utt.utt_id}")
        new = resample_utterance(urns, states, tied, sub, utt.utt_id,
                                 speaker=spk, words=utt.words, fallback=fallback)
        new.speaker = utt.speaker
        out.append(new)
    return Corpus(corpus.dim, out)


def shuffle_regions(states: np.ndarray, tied: np.ndarray, rng: RandomSource):
    """Randomize a state sequence by permuting its constant-state runs.

    Keeps the duration profile but destroys the ordering structure, the
    sanity device for checking that resampling decorrelates scores.
    """
    states = np.asarray(states)
    tied = np.asarray(tied)
    bounds = np.flatnonzero(np.r_[True, states[1:] != states[:-1]])
    segments = [(int(b), int(e)) for b, e in zip(bounds, np.r_[bounds[1:], len(states)])]
    order = rng.gen.permutation(len(segments))
    new_states, new_tied = [], []
    for i in order:
        b, e = segments[i]
        new_states.extend(states[b:e])
        new_tied.extend(tied[b:e])
    return np.asarray(new_states, dtype=np.int32), np.asarray(new_tied, dtype=np.int32)


# ---------------------------------------------------------------------------
# Binary sidecar
# ---------------------------------------------------------------------------

def save_urns(urns: UrnSet, path) -> None:
    """Little-endian sidecar keyed to the source corpus checksum."""
    parts = [MAGIC, struct.pack("<HBBI", VERSION,
                                0 if urns.mode == "si" else 1,
                                0 if urns.count_mode == "hard" else 1,
                                len(urns.urns)),
             bytes.fromhex(urns.source_hash)]
    for key in sorted(urns.urns, key=lambda k: (k if isinstance(k, tuple) else (k, ""))):
        urn = urns.urns[key]
        spk = (urn.speaker or "").encode("utf-8")
        parts.append(struct.pack("<IH", int(urn.tied_id), len(spk)))
        parts.append(spk)
        parts.append(struct.pack("<I", len(urn)))
        parts.append(urn.utt_idx.astype("<u4").tobytes())
        parts.append(urn.frame_idx.astype("<u4").tobytes())
        parts.append(urn.weights.astype("<f8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_urns(path, corpus: Corpus) -> UrnSet:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise DataError("not an urn sidecar file")
    version, mode_b, count_b, n_urns = struct.unpack_from("<HBBI", data, 4)
    if version != VERSION:
        raise DataError(f"unsupported urn sidecar version {version}")
    source_hash = data[12:44].hex()
    if corpus.content_hash() != source_hash:
        raise DataError("urn sidecar does not match this corpus (checksum differs)")
    mode = "si" if mode_b == 0 else "sd"
    count_mode = "hard" if count_b == 0 else "fractional"
    off = 44
    urns = {}
    for _ in range(n_urns):
        tied_id, spk_len = struct.unpack_from("<IH", data, off)
        off += 6
        speaker = data[off:off + spk_len].decode("utf-8") or None
        off += spk_len
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        ui = np.frombuffer(data, dtype="<u4", count=n, offset=off).copy()
        off += 4 * n
        fi = np.frombuffer(data, dtype="<u4", count=n, offset=off).copy()
        off += 4 * n
        w = np.frombuffer(data, dtype="<f8", count=n, offset=off).copy()
        off += 8 * n
        urn = Urn(int(tied_id), speaker, ui, fi, w)
        urns[(int(tied_id), speaker) if mode == "sd" else int(tied_id)] = urn
    if off != len(data):
        raise DataError("urn sidecar has trailing bytes")
    return UrnSet(mode, count_mode, urns, corpus, source_hash)
