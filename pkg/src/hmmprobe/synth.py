"""Pseudo-utterance simulation, ground-truth corpus generation, controlled
dependence injection, and feature-space transforms.

Simulation walks the generative story of the model exactly: pronunciation
and silence choices, geometric state durations from the transition models,
then one inverse-CDF draw per frame from the tied output distribution. The
dependence injector rewrites emission residuals as a first-order
autoregressive process with separate within-region and boundary-carry
coefficients, preserving per-state marginal moments so that dependence is
the only manipulated variable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, TruthInfo, Utterance
from .decoder import SILENCE_PRIOR, BigramLm, Lexicon, START, END
from .dists import (
    DiagonalGaussian,
    DiagonalLaplace,
    FullGaussian,
    RandomSource,
    laplace_from_normal,
    normal_quantile,
    sample_discrete,
)
from .hmm import Alignment, HmmModel, make_unit
from .util import DataError

SILENCE = "sil"


# ---------------------------------------------------------------------------
# State-sequence and utterance simulation
# ---------------------------------------------------------------------------

@dataclass
class StateSequence:
    """Expanded chain of visited states with per-frame positions.

    chain lists one entry per visited emitting state (unit label, state
    index, tied id); frame_pos indexes into it, so equal consecutive values
    delimit exactly one state region.
    """

    chain: list[tuple[str, int, int]]
    frame_pos: np.ndarray

    @property
    def n_frames(self) -> int:
        return len(self.frame_pos)

    def tied_ids(self) -> np.ndarray:
        tied = np.asarray([c[2] for c in self.chain], dtype=np.int32)
        return tied[self.frame_pos]

    def display_ids(self) -> list[int]:
        """1-based ids as conventionally printed, e.g. 1 1 2 2 3 4."""
        return [int(p) + 1 for p in self.frame_pos]


def _duration(p_exit: float, rng: RandomSource) -> int:
    """Waiting time for the exit transition; one uniform per dwelt frame."""
    n = 1
    while rng.uniform() >= p_exit:
        n += 1
    return n


def simulate_state_sequence(model: HmmModel, unit_labels, rng: RandomSource) -> StateSequence:
    """Walk the transition models of the given units in order.

    Per-state durations are geometric waiting times; a tee arc may skip a
    unit entirely. Every non-skipped emitting state is visited in order.
    """
    chain: list[tuple[str, int, int]] = []
    frame_pos: list[int] = []
    for label in unit_labels:
        unit = model.units.get(label)
        if unit is None:
            raise DataError(f"unit {label!r} not in model inventory")
        t = unit.trans
        if unit.tee_prob > 0.0:
            entry = sample_discrete((t[0, 1], unit.tee_prob), rng.uniform())
            if entry == 2:
                continue
        for k in range(1, unit.n_states + 1):
            p_exit = float(t[k, k + 1])
            if p_exit <= 0.0:
                raise DataError(f"unit {label!r} state {k} can never exit")
            dur = _duration(p_exit, rng)
            pos = len(chain)
            chain.append((label, k - 1, model.tied_of(label, k - 1)))
            frame_pos.extend([pos] * dur)
    return StateSequence(chain, np.asarray(frame_pos, dtype=np.int32))


def units_from_alignment(align: Alignment) -> list[str]:
    """Unit-instance sequence (pronunciation and silence choices) of a hard
    alignment, time information discarded."""
    nodes = align.state_track()
    graph = align.graph
    units = []
    prev_inst = -1
    for v in nodes:
        inst = int(graph.node_instance[v])
        if inst != prev_inst:
            units.append(graph.node_unit[int(v)])
            prev_inst = inst
    return units


def _choose_units(words, lexicon: Lexicon, model: HmmModel, rng: RandomSource,
                  silence: bool) -> list[str]:
    units: list[str] = []
    use_sil = silence and model.silence_label is not None
    for word in words:
        if use_sil and rng.uniform() < SILENCE_PRIOR:
            units.append(model.silence_label)
        alts = lexicon.units_for(word)
        pick = 0
        if len(alts) > 1:
            pick = sample_discrete([1.0 / len(alts)] * len(alts), rng.uniform()) - 1
        units.extend(alts[pick])
    if use_sil and rng.uniform() < SILENCE_PRIOR:
        units.append(model.silence_label)
    return units


def simulate_utterance(model: HmmModel, words, lexicon: Lexicon, rng: RandomSource,
                       pronunciation_source: str = "random",
                       alignment: Alignment | None = None,
                       utt_id: str = "sim-0", speaker: str = "spk00",
                       silence: bool = True) -> Utterance:
    """Simulate one utterance from the model.

    "random" draws pronunciation/silence choices from their priors;
    "from-alignment" reuses the unit sequence of a supplied alignment so the
    pseudo utterance shares the underlying unit sequence with its original.
    """
    words = tuple(words)
    if pronunciation_source == "random":
        units = _choose_units(words, lexicon, model, rng, silence)
    elif pronunciation_source == "from-alignment":
        if alignment is None:
            raise DataError("from-alignment mode needs an alignment")
        units = units_from_alignment(alignment)
    else:
        raise DataError(f"unknown pronunciation source {pronunciation_source!r}")

    seq = simulate_state_sequence(model, units, rng)
    frames = np.empty((seq.n_frames, model.dim))
    for t, pos in enumerate(seq.frame_pos):
        dist = model.outputs[seq.chain[pos][2]]
        frames[t] = dist.sample(rng)
    truth = TruthInfo(tuple(units), seq.frame_pos.copy(), seq.tied_ids())
    return Utterance(utt_id, speaker, words, frames, truth=truth)


# ---------------------------------------------------------------------------
# Ground-truth corpus generation
# ---------------------------------------------------------------------------

@dataclass
class GroundTruthSpec:
    """Knobs for a fully known generating model and its corpora."""

    n_phones: int = 8
    n_words: int = 8
    pron_len: tuple[int, int] = (2, 3)
    dim: int = 13
    states_per_phone: int = 3
    separation: float = 4.0
    self_loop: float = 0.6
    sil_self_loop: float = 0.6
    n_speakers: int = 4
    speaker_offset: float = 0.0
    silence: bool = True
    avg_len: float = 3.0
    max_len: int = 6
    lm_concentration: float = 0.5
    vocab: dict | None = None  # explicit word -> [pron, ...] overrides

    def __post_init__(self):
        if not (0.0 < self.self_loop < 1.0 and 0.0 < self.sil_self_loop < 1.0):
            raise DataError("self-loop probabilities must lie in (0, 1)")
        if self.separation <= 0.0:
            raise DataError("separation scale must be positive")
        if self.speaker_offset < 0.0:
            raise DataError("speaker offset scale must be non-negative")


@dataclass
class World:
    """A generating model with everything simulated from it."""

    spec: GroundTruthSpec
    model: HmmModel
    lexicon: Lexicon
    lm: BigramLm
    train: Corpus
    test: Corpus
    speaker_offsets: dict[str, np.ndarray] = field(default_factory=dict)


def _sphere_point(dim: int, rng: RandomSource) -> np.ndarray:
    v = normal_quantile(rng.uniforms(dim))
    norm = float(np.linalg.norm(v))
    while norm < 1e-12:  # vanishing draw, try again
        v = normal_quantile(rng.uniforms(dim))
        norm = float(np.linalg.norm(v))
    return v / norm


def random_bigram(vocab, rng: RandomSource, avg_len: float = 3.0,
                  concentration: float = 0.5) -> BigramLm:
    """Random row-stochastic bigram with a fixed sentence-end hazard."""
    vocab = tuple(sorted(vocab))
    p_end = 1.0 / max(avg_len, 1.0)
    table: dict[str, dict[str, float]] = {}
    for hist in (START, *vocab):
        w = rng.gen.gamma(concentration, 1.0, size=len(vocab)) + 1e-9
        w /= w.sum()
        row: dict[str, float] = {}
        if hist == START:
            row[END] = -math.inf
            for word, p in zip(vocab, w):
                row[word] = math.log(p)
        else:
            row[END] = math.log(p_end)
            for word, p in zip(vocab, w):
                row[word] = math.log((1.0 - p_end) * p)
        table[hist] = row
    return BigramLm(vocab, table)


def sample_transcript(lm: BigramLm, rng: RandomSource, max_len: int) -> tuple[str, ...]:
    symbols = (*lm.vocab, END)
    words: list[str] = []
    prev = START
    while len(words) < max_len:
        probs = np.array([math.exp(lm.table[prev][s]) for s in symbols])
        keep = probs > 0.0
        idxs = np.flatnonzero(keep)
        p = probs[keep] / probs[keep].sum()
        pick = symbols[idxs[sample_discrete(p, rng.uniform()) - 1]]
        if pick == END:
            break
        words.append(pick)
        prev = pick
    if not words:  # end drawn immediately; shortest legal sentence instead
        probs = np.array([math.exp(lm.table[START][w]) for w in lm.vocab])
        words.append(lm.vocab[sample_discrete(probs / probs.sum(), rng.uniform()) - 1])
    return tuple(words)


def _random_lexicon(spec: GroundTruthSpec, phones, rng: RandomSource) -> Lexicon:
    if spec.vocab is not None:
        return Lexicon({w: tuple(tuple(p) for p in ps) for w, ps in spec.vocab.items()})
    lo, hi = spec.pron_len
    prons: dict[str, tuple] = {}
    seen: set[tuple] = set()
    for i in range(spec.n_words):
        for _attempt in range(1000):
            k = lo + (sample_discrete([1.0 / (hi - lo + 1)] * (hi - lo + 1), rng.uniform()) - 1)
            pron = tuple(phones[sample_discrete([1.0 / len(phones)] * len(phones),
                                                rng.uniform()) - 1]
                         for _ in range(k))
            if pron not in seen:
                seen.add(pron)
                break
        else:
            raise DataError("could not draw distinct pronunciations; enlarge inventory")
        prons[f"w{i:02d}"] = (pron,)
    return Lexicon(prons)


def build_ground_truth_model(spec: GroundTruthSpec, rng: RandomSource) -> HmmModel:
    """Units with tied-state means placed uniformly on a hypersphere of the
    separation scale and unit variances."""
    phones = [f"p{i:02d}" for i in range(spec.n_phones)]
    units, tying, outputs = {}, {}, {}
    tid = 0
    labels = phones + ([SILENCE] if spec.silence else [])
    for label in labels:
        loop = spec.sil_self_loop if label == SILENCE else spec.self_loop
        units[label] = make_unit(label, spec.states_per_phone, loop)
        for k in range(spec.states_per_phone):
            mean = spec.separation * _sphere_point(spec.dim, rng.split(f"mean/{label}/{k}"))
            outputs[tid] = DiagonalGaussian(mean, np.ones(spec.dim))
            tying[(label, k)] = tid
            tid += 1
    return HmmModel(spec.dim, units, tying, outputs,
                    silence_label=SILENCE if spec.silence else None)


def generate_corpus(spec: GroundTruthSpec, n_train: int, n_test: int,
                    rng: RandomSource | int) -> World:
    """Fully known generating model plus train/test corpora simulated from
    it; transcripts drawn from a random bigram."""
    if isinstance(rng, int):
        rng = RandomSource(rng, "gen-corpus")
    model = build_ground_truth_model(spec, rng.split("model"))
    phones = [f"p{i:02d}" for i in range(spec.n_phones)]
    lexicon = _random_lexicon(spec, phones, rng.split("lexicon"))
    lexicon.validate_against(model)
    lm = random_bigram(lexicon.vocab, rng.split("lm"), spec.avg_len, spec.lm_concentration)

    speakers = [f"spk{i:02d}" for i in range(spec.n_speakers)]
    offsets = {}
    for spk in speakers:
        if spec.speaker_offset > 0.0:
            off = spec.speaker_offset * normal_quantile(
                rng.split(f"speaker/{spk}").uniforms(spec.dim))
        else:
            off = np.zeros(spec.dim)
        offsets[spk] = off

    def simulate_split(name: str, count: int) -> Corpus:
        utts = []
        for i in range(count):
            utt_id = f"{name}-{i:04d}"
            sub = rng.split(f"{name}/{utt_id}")
            words = sample_transcript(lm, sub.split("words"), spec.max_len)
            spk = speakers[i % len(speakers)]
            utt = simulate_utterance(model, words, lexicon, sub.split("frames"),
                                     utt_id=utt_id, speaker=spk,
                                     silence=spec.silence)
            if spec.speaker_offset > 0.0:
                utt.frames = utt.frames + offsets[spk]
            utts.append(utt)
        return Corpus(spec.dim, utts)

    return World(spec, model, lexicon, lm,
                 simulate_split("train", n_train), simulate_split("test", n_test),
                 speaker_offsets=offsets)


def convert_outputs(model: HmmModel, family: str) -> HmmModel:
    """Swap the emission family while keeping locations and spreads."""
    if family == "normal":
        return model
    outputs = {}
    for tid, dist in model.outputs.items():
        if not isinstance(dist, DiagonalGaussian):
            raise DataError("family conversion expects diagonal normal outputs")
        if family == "laplace":
            outputs[tid] = laplace_from_normal(dist)
        else:
            raise DataError(f"unknown output family {family!r}")
    return model.with_outputs(outputs)


# ---------------------------------------------------------------------------
# Dependence injection
# ---------------------------------------------------------------------------

@dataclass
class DependenceConfig:
    """AR(1) dependence knobs: within-region coefficient, cross-boundary
    carry, and a constant per-speaker offset scale."""

    rho_within: float = 0.0
    rho_between: float = 0.0
    speaker_offset: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.rho_within < 1.0 and 0.0 <= self.rho_between < 1.0):
            raise DataError("AR coefficients must lie in [0, 1)")
        if self.speaker_offset < 0.0:
            raise DataError("speaker offset scale must be non-negative")


def state_tracks(corpus: Corpus, alignments: dict[str, Alignment] | None = None):
    """(region-state ids, tied ids) per utterance, from alignments when
    given, otherwise from simulation truth."""
    tracks = {}
    for utt in corpus:
        if alignments is not None:
            align = alignments.get(utt.utt_id)
            if align is None:
                raise DataError(f"{utt.utt_id}: missing alignment")
            tracks[utt.utt_id] = (align.state_track(), align.tied_track())
        else:
            if utt.truth is None:
                raise DataError(f"{utt.utt_id}: no truth metadata and no alignment")
            tracks[utt.utt_id] = (utt.truth.state_ids, utt.truth.tied_ids)
    return tracks


def _tied_moments(corpus: Corpus, tracks) -> tuple[dict, dict]:
    """Empirical per-tied-state mean and standard deviation."""
    sums: dict[int, np.ndarray] = {}
    sqs: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for utt in corpus:
        _, tied = tracks[utt.utt_id]
        for tid in np.unique(tied):
            mask = tied == tid
            tid = int(tid)
            if tid not in sums:
                sums[tid] = np.zeros(utt.dim)
                sqs[tid] = np.zeros(utt.dim)
                counts[tid] = 0
            sums[tid] += utt.frames[mask].sum(axis=0)
            sqs[tid] += (utt.frames[mask] ** 2).sum(axis=0)
            counts[tid] += int(mask.sum())
    means, stds = {}, {}
    for tid, c in counts.items():
        m = sums[tid] / c
        v = np.maximum(sqs[tid] / c - m ** 2, 1e-12)
        means[tid] = m
        stds[tid] = np.sqrt(v)
    return means, stds


def inject_dependence(corpus: Corpus, alignments, cfg: DependenceConfig,
                      rng: RandomSource) -> Corpus:
    """Replace emission residuals with a unit-variance AR(1) process.

    The standardized process w satisfies w_t = rho w_{t-1} + sqrt(1-rho^2) z_t
    with rho switching between the within-region and boundary coefficients,
    so every frame keeps exactly the per-state marginal moments measured on
    the input corpus; only the temporal wiring changes. A fixed per-speaker
    offset is added on top when configured.
    """
    tracks = state_tracks(corpus, alignments)
    means, stds = _tied_moments(corpus, tracks)
    offsets = {}
    for spk in corpus.speakers():
        if cfg.speaker_offset > 0.0:
            offsets[spk] = cfg.speaker_offset * normal_quantile(
                rng.split(f"speaker/{spk}").uniforms(corpus.dim))
        else:
            offsets[spk] = np.zeros(corpus.dim)

    out = []
    for utt in corpus:
        states, tied = tracks[utt.utt_id]
        n, d = utt.frames.shape
        z = normal_quantile(rng.split(f"utt/{utt.utt_id}").uniforms(n * d)).reshape(n, d)
        w = np.empty((n, d))
        w[0] = z[0]
        for t in range(1, n):
            rho = cfg.rho_within if states[t] == states[t - 1] else cfg.rho_between
            w[t] = rho * w[t - 1] + math.sqrt(1.0 - rho * rho) * z[t]
        frames = np.empty_like(utt.frames)
        for t in range(n):
            tid = int(tied[t])
            frames[t] = means[tid] + stds[tid] * w[t]
        frames += offsets[utt.speaker]
        out.append(Utterance(utt.utt_id, utt.speaker, utt.words, frames, truth=utt.truth))
    return Corpus(corpus.dim, out)


# ---------------------------------------------------------------------------
# Feature transforms
# ---------------------------------------------------------------------------

def _delta(frames: np.ndarray) -> np.ndarray:
    """Symmetric first difference with replicated edges (window 1)."""
    padded = np.vstack([frames[:1], frames, frames[-1:]])
    return 0.5 * (padded[2:] - padded[:-2])


def append_deltas(corpus: Corpus) -> Corpus:
    """Static features plus first and second differences, tripling d.

    Simulated data deliberately gains nothing here: the differences of
    independently drawn statics carry no consistent dynamics, exactly the
    structural mismatch this transform exists to study.
    """
    out = []
    for utt in corpus:
        d1 = _delta(utt.frames)
        d2 = _delta(d1)
        frames = np.hstack([utt.frames, d1, d2])
        out.append(Utterance(utt.utt_id, utt.speaker, utt.words, frames, truth=utt.truth))
    return Corpus(3 * corpus.dim, out)


def project_corpus(corpus: Corpus, dims: int) -> Corpus:
    if dims > corpus.dim:
        raise DataError("projection cannot add dimensions")
    out = [Utterance(u.utt_id, u.speaker, u.words, u.frames[:, :dims].copy(), truth=u.truth)
           for u in corpus]
    return Corpus(dims, out)


def project_model(model: HmmModel, dims: int) -> HmmModel:
    """Keep the leading coordinates of every output distribution."""
    if dims > model.dim:
        raise DataError("projection cannot add dimensions")
    outputs = {}
    for tid, dist in model.outputs.items():
        if isinstance(dist, DiagonalGaussian):
            outputs[tid] = DiagonalGaussian(dist.mean[:dims], dist.variance[:dims])
        elif isinstance(dist, FullGaussian):
            outputs[tid] = FullGaussian(dist.mean[:dims],
                                        dist.covariance[:dims, :dims].copy())
        elif isinstance(dist, DiagonalLaplace):
            outputs[tid] = DiagonalLaplace(dist.location[:dims], dist.scale[:dims])
        else:
            raise DataError(f"cannot project output {type(dist).__name__}")
    new = HmmModel(dims, dict(model.units), dict(model.tying), outputs,
                   model.silence_label)
    return new


def feature_transform(obj, action: str, dims: int | None = None):
    """Spec-level dispatcher over corpora and models."""
    if action == "append-deltas":
        if isinstance(obj, Corpus):
            return append_deltas(obj)
        raise DataError("append-deltas applies to corpora only")
    if action == "project-subspace":
        if dims is None:
            raise DataError("project-subspace needs dims")
        if isinstance(obj, Corpus):
            return project_corpus(obj, dims)
        if isinstance(obj, HmmModel):
            return project_model(obj, dims)
        raise DataError("project-subspace applies to corpora and models")
    raise DataError(f"unknown transform {action!r}")
