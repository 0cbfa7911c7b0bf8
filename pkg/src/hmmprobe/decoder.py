"""Lexicon and graph construction, bigram recognition, N-best lattice
generation, and word-error-rate scoring.

Decoding is exact Viterbi over the fully composed graph: at this scale no
pruning is needed, which removes search error as a confound. Language model
log-probabilities ride on arcs unscaled and are weighted by kappa only when
a search runs, so one graph serves every scale setting.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import Utterance
from .hmm import (
    CompositeGraph,
    GraphBuilder,
    HmmModel,
    emission_matrix,
    _viterbi_nodes,
)
from .util import DataError

SILENCE_PRIOR = 0.5  # prior probability of an optional silence at a word boundary

START = "<s>"
END = "</s>"


class DecodeError(DataError):
    """No complete hypothesis survives decoding."""


# ---------------------------------------------------------------------------
# Lexicon
# ---------------------------------------------------------------------------

def expand_triphones(phones: tuple[str, ...]) -> tuple[str, ...]:
    """Word-internal triphone labels: left-context "-", right-context "+"."""
    k = len(phones)
    if k == 1:
        return (phones[0],)
    out = []
    for i, p in enumerate(phones):
        left = f"{phones[i - 1]}-" if i > 0 else ""
        right = f"+{phones[i + 1]}" if i < k - 1 else ""
        out.append(f"{left}{p}{right}")
    return tuple(out)


@dataclass
class Lexicon:
    """Word pronunciations plus the context-expansion mode."""

    prons: dict[str, tuple[tuple[str, ...], ...]]
    mode: str = "monophone"

    def __post_init__(self):
        if self.mode not in ("monophone", "word-internal-triphone"):
            raise DataError(f"unknown context-expansion mode {self.mode!r}")
        self.prons = {w: tuple(tuple(p) for p in ps) for w, ps in self.prons.items()}

    @property
    def vocab(self) -> tuple[str, ...]:
        return tuple(sorted(self.prons))

    def units_for(self, word: str) -> tuple[tuple[str, ...], ...]:
        """Unit-label sequences for each pronunciation of the word."""
        ps = self.prons.get(word)
        if ps is None:
            raise DataError(f"word {word!r} not in lexicon")
        if self.mode == "monophone":
            return ps
        return tuple(expand_triphones(p) for p in ps)

    def validate_against(self, model: HmmModel) -> None:
        for word in self.prons:
            for units in self.units_for(word):
                for label in units:
                    if label not in model.units:
                        raise DataError(
                            f"unit {label!r} (word {word!r}) missing from model")

    def to_json(self) -> dict:
        return {"mode": self.mode,
                "prons": {w: [list(p) for p in ps] for w, ps in sorted(self.prons.items())}}

    @classmethod
    def from_json(cls, obj: dict) -> "Lexicon":
        return cls({w: tuple(tuple(p) for p in ps) for w, ps in obj["prons"].items()},
                   obj.get("mode", "monophone"))

    def save(self, path) -> None:
        with open(path, "w", newline="\n") as f:
            json.dump(self.to_json(), f, sort_keys=True, indent=1)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "Lexicon":
        with open(path) as f:
            return cls.from_json(json.load(f))


# ---------------------------------------------------------------------------
# Bigram language model
# ---------------------------------------------------------------------------

@dataclass
class BigramLm:
    """log p(w'|w) over the vocabulary plus sentence start/end symbols.

    Every history row is a proper distribution over vocab + </s>; unseen
    successors receive a uniform floor mass at estimation time.
    """

    vocab: tuple[str, ...]
    table: dict[str, dict[str, float]]

    def __post_init__(self):
        self.vocab = tuple(self.vocab)
        targets = set(self.vocab) | {END}
        for hist, row in self.table.items():
            if set(row) - targets:
                raise DataError(f"bigram row {hist!r} has out-of-vocabulary targets")
            total = math.fsum(math.exp(v) for v in row.values())
            if abs(total - 1.0) > 1e-9:
                raise DataError(f"bigram row {hist!r} sums to {total}, not 1")
        for hist in (START, *self.vocab):
            if hist not in self.table:
                raise DataError(f"bigram table missing history {hist!r}")

    def logp(self, prev: str, word: str) -> float:
        return self.table[prev][word]

    def log_end(self, prev: str) -> float:
        return self.table[prev][END]

    def sentence_logp(self, words) -> float:
        prev = START
        total = 0.0
        for w in words:
            total += self.logp(prev, w)
            prev = w
        return total + self.log_end(prev)

    def to_json(self) -> dict:
        return {"vocab": list(self.vocab),
                "table": {h: dict(sorted(row.items())) for h, row in sorted(self.table.items())}}

    @classmethod
    def from_json(cls, obj: dict) -> "BigramLm":
        return cls(tuple(obj["vocab"]), {h: dict(r) for h, r in obj["table"].items()})

    def save(self, path) -> None:
        with open(path, "w", newline="\n") as f:
            json.dump(self.to_json(), f, sort_keys=True, indent=1)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "BigramLm":
        with open(path) as f:
            return cls.from_json(json.load(f))


def estimate_bigram(transcripts, vocab, cutoff: int = 8) -> BigramLm:
    """Count-based bigram keeping pairs with at least `cutoff` examples;
    dropped and unseen pairs share a uniform floor, then rows renormalize."""
    vocab = tuple(sorted(vocab))
    counts: dict[str, dict[str, int]] = {h: {} for h in (START, *vocab)}
    for words in transcripts:
        prev = START
        for w in words:
            counts[prev][w] = counts[prev].get(w, 0) + 1
            prev = w
        counts[prev][END] = counts[prev].get(END, 0) + 1
    targets = (*vocab, END)
    table = {}
    for hist, row in counts.items():
        kept = {w: c for w, c in row.items() if c >= cutoff}
        total = sum(kept.values())
        floor = 1.0 / len(targets)
        if total == 0:
            table[hist] = {w: math.log(floor) for w in targets}
            continue
        # kept mass 0.9, floor mass 0.1 spread uniformly
        probs = {w: 0.1 * floor for w in targets}
        for w, c in kept.items():
            probs[w] += 0.9 * c / total
        norm = math.fsum(probs.values())
        table[hist] = {w: math.log(p / norm) for w, p in probs.items()}
    return BigramLm(vocab, table)


# ---------------------------------------------------------------------------
# Graph construction
# ---------------------------------------------------------------------------

def _add_word(b: GraphBuilder, lexicon: Lexicon, word: str, tag) -> tuple[int, int]:
    """Pronunciation alternatives of one word between two fresh junctions."""
    j_in = b.add_junction()
    j_out = b.add_junction()
    alts = lexicon.units_for(word)
    prior = math.log(1.0 / len(alts))
    for units in alts:
        j = b.add_junction()
        b.add_eps(j_in, j, prior)
        for label in units:
            u_in, u_out = b.add_unit(label, word=tag)
            b.add_eps(j, u_in)
            j = u_out
        b.add_eps(j, j_out)
    return j_in, j_out


def _add_optional_silence(b: GraphBuilder, model: HmmModel, j_from: int, j_to: int) -> None:
    """Silence-or-skip between two junctions with the fixed prior."""
    if model.silence_label is None:
        b.add_eps(j_from, j_to)
        return
    b.add_eps(j_from, j_to, math.log(1.0 - SILENCE_PRIOR))
    s_in, s_out = b.add_unit(model.silence_label, word=None)
    b.add_eps(j_from, s_in, math.log(SILENCE_PRIOR))
    b.add_eps(s_out, j_to)


def build_graph(model: HmmModel, lexicon: Lexicon, words=None, lm: BigramLm | None = None,
                silence: bool = True) -> CompositeGraph:
    """Forced graph for a transcription, or the full-vocabulary loop graph
    when words is None (a bigram LM is then required).

    Paths are exactly the state sequences compatible with some pronunciation
    choice, with an optional silence before each word and at the end.
    """
    b = GraphBuilder(model)
    use_sil = silence and model.silence_label is not None

    if words is None:
        if lm is None:
            raise DataError("loop graph needs a language model")
        j_start = b.add_junction()
        b.set_start(j_start)
        j_end = b.add_junction()
        b.set_end(j_end)
        entries, exits = {}, {}
        for word in lexicon.vocab:
            j_w = b.add_junction()
            j_in, j_out = _add_word(b, lexicon, word, tag=word)
            if use_sil:
                _add_optional_silence(b, model, j_w, j_in)
            else:
                b.add_eps(j_w, j_in)
            entries[word] = j_w
            exits[word] = j_out
        for word in lexicon.vocab:
            b.add_eps(j_start, entries[word], lm=lm.logp(START, word), word=word)
        j_fin = b.add_junction()
        for word in lexicon.vocab:
            for nxt in lexicon.vocab:
                b.add_eps(exits[word], entries[nxt], lm=lm.logp(word, nxt), word=nxt)
            b.add_eps(exits[word], j_fin, lm=lm.log_end(word))
        if use_sil:
            _add_optional_silence(b, model, j_fin, j_end)
        else:
            b.add_eps(j_fin, j_end)
        return b.compile()

    words = tuple(words)
    j = b.add_junction()
    b.set_start(j)
    prev = START
    for pos, word in enumerate(words):
        j_w = b.add_junction()
        lm_w = lm.logp(prev, word) if lm is not None else 0.0
        b.add_eps(j, j_w, lm=lm_w, word=word)
        j_in, j_out = _add_word(b, lexicon, word, tag=(word, pos))
        if use_sil:
            _add_optional_silence(b, model, j_w, j_in)
        else:
            b.add_eps(j_w, j_in)
        j = j_out
        prev = word
    j_fin = b.add_junction()
    b.add_eps(j, j_fin, lm=lm.log_end(prev) if lm is not None else 0.0)
    j_end = b.add_junction()
    if use_sil:
        _add_optional_silence(b, model, j_fin, j_end)
    else:
        b.add_eps(j_fin, j_end)
    b.set_end(j_end)
    return b.compile()


# ---------------------------------------------------------------------------
# Viterbi decode over a graph
# ---------------------------------------------------------------------------

def _trace_words(graph: CompositeGraph, trace) -> tuple[str, ...]:
    start_pos, arcs, order, _end_i = trace
    words = []
    w0 = graph.start_word[start_pos]
    if w0 is not None:
        words.append(w0)
    for t in range(1, len(arcs)):
        w = graph.arc_word[order[arcs[t]]]
        if w is not None:
            words.append(w)
    return tuple(words)


def recognize(model: HmmModel, lm: BigramLm, kappa: float, utt: Utterance,
              lexicon: Lexicon, silence: bool = True,
              graph: CompositeGraph | None = None) -> tuple[str, ...]:
    """Word sequence maximizing acoustic log-score + kappa * LM log-score."""
    if utt.n_frames == 0:
        raise DecodeError(f"{utt.utt_id}: empty utterance")
    if graph is None:
        graph = build_graph(model, lexicon, words=None, lm=lm, silence=silence)
    emis = emission_matrix(model, graph, utt.frames)
    score, nodes, trace = _viterbi_nodes(graph, emis, kappa)
    if nodes is None:
        raise DecodeError(f"{utt.utt_id}: no complete hypothesis")
    raw = _trace_words(graph, trace)
    return tuple(w if isinstance(w, str) else w[0] for w in raw)


class Decoder:
    """Reusable recognizer: composes the loop graph once."""

    def __init__(self, model: HmmModel, lexicon: Lexicon, lm: BigramLm,
                 silence: bool = True):
        lexicon.validate_against(model)
        self.model = model
        self.lexicon = lexicon
        self.lm = lm
        self.silence = silence
        self.graph = build_graph(model, lexicon, words=None, lm=lm, silence=silence)

    def recognize(self, utt: Utterance, kappa: float = 1.0) -> tuple[str, ...]:
        return recognize(self.model, self.lm, kappa, utt, self.lexicon,
                         graph=self.graph)

    def nbest(self, utt: Utterance, kappa: float, n: int,
              tokens_per_node: int | None = None) -> list[tuple[tuple[str, ...], float]]:
        """Top-n distinct word sequences by token passing.

        Tokens carry full word histories; per node only the best
        `tokens_per_node` distinct histories survive each frame.
        """
        if n < 1:
            raise DataError("n must be at least 1")
        k = tokens_per_node or max(8, 2 * n)
        g = self.graph
        emis = emission_matrix(self.model, g, utt.frames)
        n_frames = utt.n_frames

        # hypothesis trie: id -> (parent, word)
        hyp_parent = [(-1, None)]
        trie: dict[tuple[int, str], int] = {}

        def extend_hyp(h: int, word) -> int:
            if word is None:
                return h
            key = (h, word)
            got = trie.get(key)
            if got is None:
                got = len(hyp_parent)
                hyp_parent.append((h, word))
                trie[key] = got
            return got

        def hyp_words(h: int) -> tuple[str, ...]:
            out = []
            while h > 0:
                h, w = hyp_parent[h]
                out.append(w)
            return tuple(reversed(out))

        arcs_into: list[list[tuple[int, float, str | None]]] = [[] for _ in range(g.n_nodes)]
        for i in range(g.n_arcs):
            w = float(g.arc_logp[i] + kappa * g.arc_lm[i])
            arcs_into[int(g.arc_dst[i])].append((int(g.arc_src[i]), w, g.arc_word[i]))

        def top_k(cands: dict[int, float]) -> dict[int, float]:
            if len(cands) <= k:
                return cands
            kept = sorted(cands.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
            return dict(kept)

        tokens: list[dict[int, float]] = [dict() for _ in range(g.n_nodes)]
        for i in range(len(g.start_dst)):
            d = int(g.start_dst[i])
            sc = float(g.start_logp[i] + kappa * g.start_lm[i] + emis[0, d])
            h = extend_hyp(0, g.start_word[i])
            if sc > tokens[d].get(h, -math.inf):
                tokens[d][h] = sc

        for t in range(1, n_frames):
            new_tokens: list[dict[int, float]] = [dict() for _ in range(g.n_nodes)]
            for dst in range(g.n_nodes):
                e = float(emis[t, dst])
                cands = new_tokens[dst]
                for src, w, word in arcs_into[dst]:
                    src_toks = tokens[src]
                    if not src_toks:
                        continue
                    for h, sc in src_toks.items():
                        h2 = extend_hyp(h, word)
                        s2 = sc + w + e
                        if s2 > cands.get(h2, -math.inf):
                            cands[h2] = s2
                new_tokens[dst] = top_k(cands)
            tokens = new_tokens

        finals: dict[int, float] = {}
        for i in range(len(g.end_src)):
            src = int(g.end_src[i])
            w = float(g.end_logp[i] + kappa * g.end_lm[i])
            for h, sc in tokens[src].items():
                s2 = sc + w
                if s2 > finals.get(h, -math.inf):
                    finals[h] = s2
        if not finals:
            raise DecodeError(f"{utt.utt_id}: no complete hypothesis")
        ranked = sorted(finals.items(), key=lambda kv: (-kv[1], kv[0]))[:n]
        return [(hyp_words(h), sc) for h, sc in ranked]


# ---------------------------------------------------------------------------
# Lattices
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LatticeArc:
    src: int
    dst: int
    word: str | None
    phones: tuple[tuple[str, int, int], ...]  # (unit label, start, end-exclusive)
    acoustic: float  # alignment-time acoustic score (transitions + emissions + priors)
    lm: float

    @property
    def start(self) -> int:
        return self.phones[0][1]

    @property
    def end(self) -> int:
        return self.phones[-1][2]


@dataclass
class Lattice:
    """Time-marked hypothesis graph kept in union-of-paths form."""

    utt_id: str
    n_frames: int
    node_times: list[int]
    arcs: list[LatticeArc]
    paths: list[tuple[int, ...]] = field(default_factory=list)

    def __post_init__(self):
        if not self.paths:
            raise DataError(f"{self.utt_id}: lattice has no complete path")
        for path in self.paths:
            for i in self.arcs_of(path):
                a = self.arcs[i]
                if not (self.node_times[a.src] == a.start and self.node_times[a.dst] == a.end):
                    raise DataError(f"{self.utt_id}: arc span escapes its node times")

    @staticmethod
    def arcs_of(path) -> tuple[int, ...]:
        return tuple(path)

    def words_of(self, path) -> tuple[str, ...]:
        return tuple(self.arcs[i].word for i in path if self.arcs[i].word is not None)

    def path_lm(self, path) -> float:
        return math.fsum(self.arcs[i].lm for i in path)

    def path_acoustic(self, path) -> float:
        return math.fsum(self.arcs[i].acoustic for i in path)

    def to_json(self) -> dict:
        return {
            "utt_id": self.utt_id,
            "n_frames": self.n_frames,
            "node_times": list(self.node_times),
            "arcs": [
                {"src": a.src, "dst": a.dst, "word": a.word,
                 "phones": [list(p) for p in a.phones],
                 "acoustic": a.acoustic, "lm": a.lm}
                for a in self.arcs
            ],
            "paths": [list(p) for p in self.paths],
        }

    @classmethod
    def from_json(cls, obj) -> "Lattice":
        arcs = [LatticeArc(r["src"], r["dst"], r["word"],
                           tuple(tuple(p) for p in r["phones"]),
                           float(r["acoustic"]), float(r["lm"]))
                for r in obj["arcs"]]
        return cls(obj["utt_id"], int(obj["n_frames"]), list(obj["node_times"]),
                   arcs, [tuple(p) for p in obj["paths"]])


def _segment_path(graph: CompositeGraph, emis: np.ndarray, kappa: float,
                  nodes: np.ndarray, trace) -> list[dict]:
    """Split a Viterbi path into word/silence segments with per-phone spans
    and exact acoustic/LM decompositions. Boundary weights attach to the
    segment they enter; the end weight attaches to the last segment."""
    start_pos, arcs, order, end_i = trace
    n = len(nodes)
    logp_in = np.empty(n)
    lm_in = np.empty(n)
    word_in: list = [None] * n
    logp_in[0] = graph.start_logp[start_pos]
    lm_in[0] = graph.start_lm[start_pos]
    word_in[0] = graph.start_word[start_pos]
    for t in range(1, n):
        i = order[arcs[t]]
        logp_in[t] = graph.arc_logp[i]
        lm_in[t] = graph.arc_lm[i]
        word_in[t] = graph.arc_word[i]

    segments: list[dict] = []
    for t in range(n):
        v = int(nodes[t])
        tag = graph.node_word[v]
        inst = int(graph.node_instance[v])
        new_word = word_in[t] is not None
        if not segments or new_word or (tag is None and segments[-1]["tag"] is not None):
            segments.append({"tag": tag if not new_word else word_in[t],
                             "is_word": new_word or tag is not None,
                             "phones": [], "acoustic": 0.0, "lm": 0.0})
        seg = segments[-1]
        if not seg["phones"] or seg["phones"][-1][0] != inst:
            seg["phones"].append([inst, graph.node_unit[v], t, t + 1])
        else:
            seg["phones"][-1][3] = t + 1
        seg["acoustic"] += float(logp_in[t] + emis[t, v])
        seg["lm"] += float(lm_in[t])
    segments[-1]["acoustic"] += float(graph.end_logp[end_i])
    segments[-1]["lm"] += float(graph.end_lm[end_i])
    return segments


def _word_of_tag(tag):
    if tag is None:
        return None
    return tag if isinstance(tag, str) else tag[0]


def hypothesis_lattice_path(model: HmmModel, lexicon: Lexicon, lm: BigramLm | None,
                            utt: Utterance, words, silence: bool = True):
    """Force-align one word sequence; returns (arcs, score) where arcs are
    LatticeArc drafts spanning the whole utterance."""
    graph = build_graph(model, lexicon, words=tuple(words), lm=lm, silence=silence)
    emis = emission_matrix(model, graph, utt.frames)
    score, nodes, trace = _viterbi_nodes(graph, emis, 1.0)
    if nodes is None:
        raise DecodeError(f"{utt.utt_id}: cannot align {' '.join(words)!r}")
    segments = _segment_path(graph, emis, 1.0, nodes, trace)
    arcs = []
    for seg in segments:
        phones = tuple((label, s, e) for _inst, label, s, e in seg["phones"])
        arcs.append(LatticeArc(0, 0, _word_of_tag(seg["tag"]), phones,
                               seg["acoustic"], seg["lm"]))
    return arcs, float(score)


def _assemble(utt_id: str, n_frames: int, path_arcs: list[list[LatticeArc]]) -> Lattice:
    """Union-of-paths lattice; nodes are created at segment boundaries."""
    node_times: list[int] = [0, n_frames]
    arcs: list[LatticeArc] = []
    paths: list[tuple[int, ...]] = []
    for draft in path_arcs:
        path = []
        prev_node = 0
        for j, a in enumerate(draft):
            if j == len(draft) - 1:
                dst = 1
            else:
                node_times.append(a.end)
                dst = len(node_times) - 1
            arcs.append(LatticeArc(prev_node, dst, a.word, a.phones, a.acoustic, a.lm))
            path.append(len(arcs) - 1)
            prev_node = dst
        paths.append(tuple(path))
    return Lattice(utt_id, n_frames, node_times, arcs, paths)


def nbest_lattice(model: HmmModel, lm: BigramLm, kappa: float, utt: Utterance,
                  n: int, lexicon: Lexicon, silence: bool = True,
                  decoder: Decoder | None = None) -> Lattice:
    """Lattice of the top-n distinct word sequences, phone-marked from each
    hypothesis's own alignment."""
    dec = decoder or Decoder(model, lexicon, lm, silence=silence)
    hyps = dec.nbest(utt, kappa, n)
    drafts = []
    for words, _score in hyps:
        arcs, _ = hypothesis_lattice_path(model, lexicon, lm, utt, words, silence)
        drafts.append(arcs)
    return _assemble(utt.utt_id, utt.n_frames, drafts)


def reference_lattice(model: HmmModel, lm: BigramLm | None, utt: Utterance,
                      words, lexicon: Lexicon, silence: bool = True) -> Lattice:
    """Single-path lattice for the reference transcription."""
    arcs, _ = hypothesis_lattice_path(model, lexicon, lm, utt, tuple(words), silence)
    return _assemble(utt.utt_id, utt.n_frames, [arcs])


def merge_lattices(a: Lattice, b: Lattice) -> Lattice:
    """Union of paths, deduplicated by word sequence (first wins)."""
    if a.utt_id != b.utt_id or a.n_frames != b.n_frames:
        raise DataError("cannot merge lattices of different utterances")
    drafts = []
    seen = set()
    for lat in (a, b):
        for path in lat.paths:
            words = lat.words_of(path)
            if words in seen:
                continue
            seen.add(words)
            drafts.append([lat.arcs[i] for i in path])
    return _assemble(a.utt_id, a.n_frames, drafts)


# ---------------------------------------------------------------------------
# Word error rate
# ---------------------------------------------------------------------------

@dataclass
class WerCounts:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    n_ref: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def rate(self) -> float:
        if self.n_ref == 0:
            raise DataError("WER undefined: empty reference")
        return self.errors / self.n_ref

    def __add__(self, other: "WerCounts") -> "WerCounts":
        return WerCounts(self.substitutions + other.substitutions,
                         self.insertions + other.insertions,
                         self.deletions + other.deletions,
                         self.n_ref + other.n_ref)


def wer(ref, hyp) -> WerCounts:
    """Minimum-edit-distance alignment with unit costs.

    Ties in the backtrace prefer substitution over insertion over deletion,
    so counts are deterministic.
    """
    ref = list(ref)
    hyp = list(hyp)
    nr, nh = len(ref), len(hyp)
    dist = np.zeros((nr + 1, nh + 1), dtype=np.int64)
    dist[:, 0] = np.arange(nr + 1)
    dist[0, :] = np.arange(nh + 1)
    for i in range(1, nr + 1):
        for j in range(1, nh + 1):
            sub = dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            ins = dist[i, j - 1] + 1
            dele = dist[i - 1, j] + 1
            dist[i, j] = min(sub, ins, dele)
    counts = WerCounts(n_ref=nr)
    i, j = nr, nh
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            if ref[i - 1] != hyp[j - 1]:
                counts.substitutions += 1
            i -= 1
            j -= 1
        elif j > 0 and dist[i, j] == dist[i, j - 1] + 1:
            counts.insertions += 1
            j -= 1
        else:
            counts.deletions += 1
            i -= 1
    return counts


def wer_corpus(refs: dict[str, tuple], hyps: dict[str, tuple]) -> WerCounts:
    """Micro-averaged WER over matching utterance ids."""
    total = WerCounts()
    for utt_id in sorted(refs):
        if utt_id not in hyps:
            raise DataError(f"hypothesis missing for {utt_id}")
        total = total + wer(refs[utt_id], hyps[utt_id])
    return total
