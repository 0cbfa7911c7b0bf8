"""Model structure, composite state graphs, forward-backward, Viterbi,
and maximum-likelihood Baum-Welch training.

Units are linear no-skip chains of emitting states bracketed by non-emitting
entry/exit states. Utterance-level graphs are assembled from unit instances
joined through non-emitting junctions, then compiled down to arcs between
emitting nodes so the recursions run over flat arrays. All probability
arithmetic is in the log domain.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, Utterance
from .dists import (
    VARIANCE_FLOOR,
    DiagonalGaussian,
    DiagonalLaplace,
    FullGaussian,
    OutputDistribution,
)
from .util import DataError, parallel_map

log = logging.getLogger(__name__)

TRANSITION_FLOOR = 1e-8
NEG_INF = -np.inf


class AlignmentError(DataError):
    """The graph admits no state path of the utterance's length."""


# ---------------------------------------------------------------------------
# Units and models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HmmUnit:
    """A linear no-skip chain of emitting states with entry/exit states.

    Transition row/column 0 is the entry state, 1..n the emitting states,
    n+1 the exit. An entry->exit arc (the "tee" arc) is the only permitted
    skip; emitting states allow only self-loops and next-state moves.
    """

    label: str
    n_states: int
    trans: np.ndarray

    def __post_init__(self):
        t = np.array(self.trans, dtype=np.float64)
        t.setflags(write=False)
        object.__setattr__(self, "trans", t)
        n = self.n_states
        if n < 1 or t.shape != (n + 2, n + 2):
            raise DataError(f"unit {self.label}: bad transition shape")
        if np.any(t < 0.0):
            raise DataError(f"unit {self.label}: negative transition")
        for i in range(n + 1):
            if abs(t[i].sum() - 1.0) > 1e-12:
                raise DataError(f"unit {self.label}: row {i} does not sum to 1")
        allowed = np.zeros_like(t, dtype=bool)
        allowed[0, 1] = allowed[0, n + 1] = True
        for i in range(1, n + 1):
            allowed[i, i] = True
            allowed[i, i + 1] = True
        if np.any(t[~allowed] != 0.0):
            raise DataError(f"unit {self.label}: arc outside linear no-skip topology")
        if np.any(t[n + 1] != 0.0):
            raise DataError(f"unit {self.label}: exit state must have no outgoing arcs")

    @property
    def tee_prob(self) -> float:
        return float(self.trans[0, self.n_states + 1])


def make_unit(label: str, n_states: int, self_loop, tee_prob: float = 0.0) -> HmmUnit:
    """Linear unit from per-state self-loop probabilities (scalar or list)."""
    loops = np.broadcast_to(np.asarray(self_loop, dtype=np.float64), (n_states,))
    t = np.zeros((n_states + 2, n_states + 2))
    t[0, 1] = 1.0 - tee_prob
    t[0, n_states + 1] = tee_prob
    for i in range(1, n_states + 1):
        t[i, i] = loops[i - 1]
        t[i, i + 1] = 1.0 - loops[i - 1]
    return HmmUnit(label, n_states, t)


@dataclass
class HmmModel:
    """Units plus a tying map from (unit, emitting state) to output ids."""

    dim: int
    units: dict[str, HmmUnit]
    tying: dict[tuple[str, int], int]
    outputs: dict[int, OutputDistribution]
    silence_label: str | None = None

    def __post_init__(self):
        for (label, k), tid in self.tying.items():
            unit = self.units.get(label)
            if unit is None or not (0 <= k < unit.n_states):
                raise DataError(f"tying refers to unknown state ({label}, {k})")
            if tid not in self.outputs:
                raise DataError(f"tying refers to unknown output {tid}")
        for label, unit in self.units.items():
            for k in range(unit.n_states):
                if (label, k) not in self.tying:
                    raise DataError(f"state ({label}, {k}) has no tied output")
        for tid, dist in self.outputs.items():
            if dist.dim != self.dim:
                raise DataError(f"output {tid} has dimension {dist.dim}, expected {self.dim}")
        if self.silence_label is not None and self.silence_label not in self.units:
            raise DataError(f"silence unit {self.silence_label!r} not in inventory")

    def tied_of(self, label: str, k: int) -> int:
        return self.tying[(label, k)]

    @property
    def tied_ids(self) -> list[int]:
        return sorted(self.outputs)

    def tied_index(self) -> dict[int, int]:
        return {tid: i for i, tid in enumerate(self.tied_ids)}

    def with_outputs(self, outputs: dict[int, OutputDistribution],
                     units: dict[str, HmmUnit] | None = None) -> "HmmModel":
        return HmmModel(self.dim, dict(units or self.units), dict(self.tying),
                        outputs, self.silence_label)

    # -- serialization ------------------------------------------------------

    def to_json(self) -> dict:
        def enc_dist(d):
            if isinstance(d, DiagonalGaussian):
                return {"kind": "diag_gaussian", "mean": d.mean.tolist(),
                        "variance": d.variance.tolist()}
            if isinstance(d, FullGaussian):
                return {"kind": "full_gaussian", "mean": d.mean.tolist(),
                        "covariance": d.covariance.tolist()}
            if isinstance(d, DiagonalLaplace):
                return {"kind": "diag_laplace", "location": d.location.tolist(),
                        "scale": d.scale.tolist()}
            raise DataError(f"cannot serialize output {type(d).__name__}")

        return {
            "d": self.dim,
            "units": [
                {"label": u.label, "n_states": u.n_states, "trans": u.trans.tolist()}
                for u in self.units.values()
            ],
            "tying": {f"{label}/{k}": tid for (label, k), tid in sorted(self.tying.items())},
            "outputs": {str(tid): enc_dist(d) for tid, d in sorted(self.outputs.items())},
            "silence": self.silence_label,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "HmmModel":
        def dec_dist(rec):
            kind = rec.get("kind")
            if kind == "diag_gaussian":
                return DiagonalGaussian(rec["mean"], rec["variance"])
            if kind == "full_gaussian":
                return FullGaussian(rec["mean"], np.asarray(rec["covariance"]))
            if kind == "diag_laplace":
                return DiagonalLaplace(rec["location"], rec["scale"])
            raise DataError(f"unknown output kind {kind!r}")

        units = {}
        for rec in obj["units"]:
            units[rec["label"]] = HmmUnit(rec["label"], rec["n_states"],
                                          np.asarray(rec["trans"]))
        tying = {}
        for key, tid in obj["tying"].items():
            label, k = key.rsplit("/", 1)
            tying[(label, int(k))] = int(tid)
        outputs = {int(t): dec_dist(rec) for t, rec in obj["outputs"].items()}
        return cls(int(obj["d"]), units, tying, outputs, obj.get("silence"))

    def save(self, path) -> None:
        with open(path, "w", newline="\n") as f:
            json.dump(self.to_json(), f, sort_keys=True, indent=1)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "HmmModel":
        with open(path) as f:
            return cls.from_json(json.load(f))


# ---------------------------------------------------------------------------
# Composite graphs
# ---------------------------------------------------------------------------

@dataclass
class CompositeGraph:
    """Flat arc-form of an utterance graph over emitting nodes.

    Arcs carry a transition log-probability, a separately stored language
    model log-probability (scaled only at decode time), the word emitted on
    entering the arc's destination (if any), and the list of unit-level
    transitions the arc traverses, for transition re-estimation.
    """

    node_unit: list[str]
    node_state: np.ndarray
    node_tied: np.ndarray
    node_instance: np.ndarray
    node_word: list
    arc_src: np.ndarray
    arc_dst: np.ndarray
    arc_logp: np.ndarray
    arc_lm: np.ndarray
    arc_word: list
    arc_prov: list
    start_dst: np.ndarray
    start_logp: np.ndarray
    start_lm: np.ndarray
    start_word: list
    start_prov: list
    end_src: np.ndarray
    end_logp: np.ndarray
    end_lm: np.ndarray
    end_prov: list
    _groups: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.node_unit)

    @property
    def n_arcs(self) -> int:
        return len(self.arc_src)

    def _grouped(self, key: str):
        """Arc order and segment starts for reduceat over src or dst."""
        cached = self._groups.get(key)
        if cached is not None:
            return cached
        col = self.arc_dst if key == "dst" else self.arc_src
        order = np.argsort(col, kind="stable")
        sorted_col = col[order]
        starts = np.flatnonzero(np.r_[True, sorted_col[1:] != sorted_col[:-1]])
        uniq = sorted_col[starts]
        out = (order, starts, uniq)
        self._groups[key] = out
        return out


class GraphBuilder:
    """Assembles unit instances and junctions, then compiles to arc form."""

    def __init__(self, model: HmmModel):
        self.model = model
        self.node_unit: list[str] = []
        self.node_state: list[int] = []
        self.node_tied: list[int] = []
        self.node_instance: list[int] = []
        self.node_word: list = []
        self._instances = 0
        self._junctions = 0
        # junction -> [(kind, target, logp, lm, word, prov)], kind "J" or "E"
        self._jout: dict[int, list] = {}
        # emitting node exits: node -> (junction, logp, prov)
        self._exits: list[tuple[int, int, float, tuple]] = []
        self._emit_arcs: list[tuple[int, int, float, tuple]] = []
        self._start: int | None = None
        self._end: int | None = None

    def add_junction(self) -> int:
        j = self._junctions
        self._junctions += 1
        self._jout[j] = []
        return j

    def add_eps(self, src: int, dst: int, logp: float = 0.0, lm: float = 0.0,
                word=None) -> None:
        self._jout[src].append(("J", dst, logp, lm, word, ()))

    def add_unit(self, label: str, word=None) -> tuple[int, int]:
        """Instantiate a unit between fresh entry/exit junctions."""
        unit = self.model.units.get(label)
        if unit is None:
            raise DataError(f"unit {label!r} not in model inventory")
        j_in = self.add_junction()
        j_out = self.add_junction()
        inst = self._instances
        self._instances += 1
        base = len(self.node_unit)
        for k in range(unit.n_states):
            self.node_unit.append(label)
            self.node_state.append(k)
            self.node_tied.append(self.model.tied_of(label, k))
            self.node_instance.append(inst)
            self.node_word.append(word)
        n = unit.n_states
        t = unit.trans
        self._jout[j_in].append(
            ("E", base, math.log(t[0, 1]), 0.0, None, ((label, 0, 1),)))
        if t[0, n + 1] > 0.0:
            self._jout[j_in].append(
                ("J", j_out, math.log(t[0, n + 1]), 0.0, None, ((label, 0, n + 1),)))
        for k in range(1, n + 1):
            node = base + k - 1
            if t[k, k] > 0.0:
                self._emit_arcs.append(
                    (node, node, math.log(t[k, k]), ((label, k, k),)))
            if k < n and t[k, k + 1] > 0.0:
                self._emit_arcs.append(
                    (node, node + 1, math.log(t[k, k + 1]), ((label, k, k + 1),)))
        self._exits.append(
            (base + n - 1, j_out, math.log(t[n, n + 1]), ((label, n, n + 1),)))
        return j_in, j_out

    def set_start(self, j: int) -> None:
        self._start = j

    def set_end(self, j: int) -> None:
        self._end = j

    def _closure(self, j: int, memo: dict, stack: set) -> list:
        """Epsilon-reachable emitting nodes / END from junction j.

        Returns (target, logp, lm, words, prov) tuples where target is an
        emitting node index or -1 for END. The junction subgraph must be
        acyclic; emitting nodes break all legal cycles.
        """
        if j in memo:
            return memo[j]
        if j in stack:
            raise DataError("non-emitting cycle in graph")
        stack.add(j)
        hits = []
        if j == self._end:
            hits.append((-1, 0.0, 0.0, (), ()))
        for kind, target, logp, lm, word, prov in self._jout[j]:
            words = (word,) if word is not None else ()
            if kind == "E":
                hits.append((target, logp, lm, words, prov))
            else:
                for t2, lp2, lm2, w2, pv2 in self._closure(target, memo, stack):
                    hits.append((t2, logp + lp2, lm + lm2, words + w2, prov + pv2))
        stack.remove(j)
        memo[j] = hits
        return hits

    def compile(self) -> CompositeGraph:
        if self._start is None or self._end is None:
            raise DataError("graph needs start and end junctions")
        memo: dict[int, list] = {}

        def word_of(words: tuple) -> str | None:
            if len(words) > 1:
                raise DataError("arc crosses more than one word boundary")
            return words[0] if words else None

        start_dst, start_logp, start_lm, start_word, start_prov = [], [], [], [], []
        for t, lp, lm, words, prov in self._closure(self._start, memo, set()):
            if t < 0:
                continue  # empty path, meaningless for n >= 1 frames
            start_dst.append(t)
            start_logp.append(lp)
            start_lm.append(lm)
            start_word.append(word_of(words))
            start_prov.append(prov)

        a_src, a_dst, a_logp, a_lm, a_word, a_prov = [], [], [], [], [], []
        e_src, e_logp, e_lm, e_prov = [], [], [], []
        for src, dst, lp, prov in self._emit_arcs:
            a_src.append(src)
            a_dst.append(dst)
            a_logp.append(lp)
            a_lm.append(0.0)
            a_word.append(None)
            a_prov.append(prov)
        for node, j_out, lp0, prov0 in self._exits:
            for t, lp, lm, words, prov in self._closure(j_out, memo, set()):
                if t < 0:
                    e_src.append(node)
                    e_logp.append(lp0 + lp)
                    e_lm.append(lm)
                    e_prov.append(prov0 + prov)
                else:
                    a_src.append(node)
                    a_dst.append(t)
                    a_logp.append(lp0 + lp)
                    a_lm.append(lm)
                    a_word.append(word_of(words))
                    a_prov.append(prov0 + prov)

        return CompositeGraph(
            node_unit=self.node_unit,
            node_state=np.asarray(self.node_state, dtype=np.int32),
            node_tied=np.asarray(self.node_tied, dtype=np.int32),
            node_instance=np.asarray(self.node_instance, dtype=np.int32),
            node_word=self.node_word,
            arc_src=np.asarray(a_src, dtype=np.int64),
            arc_dst=np.asarray(a_dst, dtype=np.int64),
            arc_logp=np.asarray(a_logp, dtype=np.float64),
            arc_lm=np.asarray(a_lm, dtype=np.float64),
            arc_word=a_word,
            arc_prov=a_prov,
            start_dst=np.asarray(start_dst, dtype=np.int64),
            start_logp=np.asarray(start_logp, dtype=np.float64),
            start_lm=np.asarray(start_lm, dtype=np.float64),
            start_word=start_word,
            start_prov=start_prov,
            end_src=np.asarray(e_src, dtype=np.int64),
            end_logp=np.asarray(e_logp, dtype=np.float64),
            end_lm=np.asarray(e_lm, dtype=np.float64),
            end_prov=e_prov,
        )


def chain_graph(model: HmmModel, unit_labels) -> CompositeGraph:
    """Linear graph visiting the given units in order, no alternatives."""
    b = GraphBuilder(model)
    j = b.add_junction()
    b.set_start(j)
    for label in unit_labels:
        j_in, j_out = b.add_unit(label)
        b.add_eps(j, j_in)
        j = j_out
    end = b.add_junction()
    b.add_eps(j, end)
    b.set_end(end)
    return b.compile()


# ---------------------------------------------------------------------------
# Emissions and recursions
# ---------------------------------------------------------------------------

def emission_matrix(model: HmmModel, graph: CompositeGraph, frames: np.ndarray) -> np.ndarray:
    """Log emission densities, shape (n_frames, n_nodes)."""
    if frames.shape[1] != model.dim:
        raise DataError("utterance dimension does not match model")
    per_tied = {}
    for tid in np.unique(graph.node_tied):
        per_tied[int(tid)] = model.outputs[int(tid)].log_density(frames)
    emis = np.empty((frames.shape[0], graph.n_nodes))
    for v in range(graph.n_nodes):
        emis[:, v] = per_tied[int(graph.node_tied[v])]
    return emis


def _logsumexp(v: np.ndarray) -> float:
    m = np.max(v) if v.size else NEG_INF
    if not np.isfinite(m):
        return float(m) if v.size else NEG_INF
    return float(m + np.log(np.exp(v - m).sum()))


def _forward(graph: CompositeGraph, emis: np.ndarray, kappa: float):
    n, nn = emis.shape
    order, starts, uniq = graph._grouped("dst")
    src_o = graph.arc_src[order]
    w_o = (graph.arc_logp + kappa * graph.arc_lm)[order]
    alpha = np.full((n, nn), NEG_INF)
    np.logaddexp.at(alpha[0], graph.start_dst,
                    graph.start_logp + kappa * graph.start_lm)
    alpha[0] += emis[0]
    for t in range(1, n):
        contrib = alpha[t - 1, src_o] + w_o
        red = np.logaddexp.reduceat(contrib, starts)
        row = alpha[t]
        row[uniq] = red
        row += emis[t]
    end_w = graph.end_logp + kappa * graph.end_lm
    loglik = _logsumexp(alpha[n - 1, graph.end_src] + end_w)
    return alpha, loglik


def _backward(graph: CompositeGraph, emis: np.ndarray, kappa: float):
    n, nn = emis.shape
    order, starts, uniq = graph._grouped("src")
    dst_o = graph.arc_dst[order]
    w_o = (graph.arc_logp + kappa * graph.arc_lm)[order]
    beta = np.full((n, nn), NEG_INF)
    np.logaddexp.at(beta[n - 1], graph.end_src,
                    graph.end_logp + kappa * graph.end_lm)
    for t in range(n - 2, -1, -1):
        contrib = beta[t + 1, dst_o] + w_o + emis[t + 1, dst_o]
        red = np.logaddexp.reduceat(contrib, starts)
        beta[t, uniq] = red
    return beta


@dataclass
class Alignment:
    """Hard path (node per frame) or full posterior occupancies."""

    utt_id: str
    graph: CompositeGraph
    nodes: np.ndarray | None = None
    gamma: np.ndarray | None = None

    @property
    def is_hard(self) -> bool:
        return self.nodes is not None

    @property
    def n_frames(self) -> int:
        return len(self.nodes) if self.is_hard else self.gamma.shape[0]

    def state_track(self) -> np.ndarray:
        if not self.is_hard:
            raise DataError("state track requires a hard alignment")
        return self.nodes

    def tied_track(self) -> np.ndarray:
        if not self.is_hard:
            raise DataError("tied track requires a hard alignment")
        return self.graph.node_tied[self.nodes]

    def tied_occupancy(self, tied_index: dict[int, int]) -> np.ndarray:
        """Occupancy per (frame, tied id); columns follow tied_index."""
        n_tied = len(tied_index)
        cols = np.asarray([tied_index[int(t)] for t in self.graph.node_tied])
        if self.is_hard:
            occ = np.zeros((self.n_frames, n_tied))
            occ[np.arange(self.n_frames), cols[self.nodes]] = 1.0
            return occ
        ind = np.zeros((self.graph.n_nodes, n_tied))
        ind[np.arange(self.graph.n_nodes), cols] = 1.0
        return self.gamma @ ind


def forward_backward(model: HmmModel, graph: CompositeGraph, utt: Utterance,
                     kappa: float = 1.0) -> tuple[float, Alignment]:
    """Total log-likelihood and exact posterior occupancies."""
    if utt.n_frames == 0:
        raise AlignmentError(f"{utt.utt_id}: empty utterance")
    emis = emission_matrix(model, graph, utt.frames)
    alpha, loglik = _forward(graph, emis, kappa)
    if not np.isfinite(loglik):
        raise AlignmentError(f"{utt.utt_id}: no admissible state path of length {utt.n_frames}")
    beta = _backward(graph, emis, kappa)
    gamma = np.exp(alpha + beta - loglik)
    return loglik, Alignment(utt.utt_id, graph, gamma=gamma)


def viterbi_align(model: HmmModel, graph: CompositeGraph, utt: Utterance,
                  kappa: float = 1.0) -> tuple[float, Alignment]:
    """Best-path score and the corresponding hard alignment."""
    if utt.n_frames == 0:
        raise AlignmentError(f"{utt.utt_id}: empty utterance")
    emis = emission_matrix(model, graph, utt.frames)
    score, nodes, _arcs = _viterbi_nodes(graph, emis, kappa)
    if not np.isfinite(score):
        raise AlignmentError(f"{utt.utt_id}: no admissible state path of length {utt.n_frames}")
    return score, Alignment(utt.utt_id, graph, nodes=nodes)


def _viterbi_nodes(graph: CompositeGraph, emis: np.ndarray, kappa: float):
    """Max-probability path; ties break toward the lowest arc index."""
    n, nn = emis.shape
    order, starts, uniq = graph._grouped("dst")
    src_o = graph.arc_src[order]
    w_o = (graph.arc_logp + kappa * graph.arc_lm)[order]
    arc_pos = np.arange(len(order))

    v = np.full((n, nn), NEG_INF)
    bp = np.full((n, nn), -1, dtype=np.int64)  # winning sorted-arc position
    start_best = np.full(nn, -1, dtype=np.int64)
    sw = graph.start_logp + kappa * graph.start_lm
    for i in np.argsort(graph.start_dst, kind="stable"):
        d = graph.start_dst[i]
        if sw[i] > v[0, d]:
            v[0, d] = sw[i]
            start_best[d] = i
    v[0] += emis[0]

    for t in range(1, n):
        contrib = v[t - 1, src_o] + w_o
        red = np.maximum.reduceat(contrib, starts)
        seg = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, len(contrib)]))
        winner = np.where(contrib == red[seg], arc_pos, len(order))
        first = np.minimum.reduceat(winner, starts)
        row = v[t]
        row[uniq] = red
        bp[t, uniq] = first
        row += emis[t]

    end_w = graph.end_logp + kappa * graph.end_lm
    finals = v[n - 1, graph.end_src] + end_w
    if finals.size == 0 or not np.isfinite(finals.max()):
        return NEG_INF, None, None
    end_i = int(np.argmax(finals))
    score = float(finals[end_i])

    nodes = np.empty(n, dtype=np.int64)
    arcs = np.full(n, -1, dtype=np.int64)  # sorted-arc position used to ENTER frame t
    nodes[n - 1] = graph.end_src[end_i]
    for t in range(n - 1, 0, -1):
        pos = bp[t, nodes[t]]
        arcs[t] = pos
        nodes[t - 1] = src_o[pos]
    return score, nodes, (start_best[nodes[0]], arcs, order, end_i)


def span_forward_backward(model: HmmModel, unit_label: str, frames: np.ndarray):
    """Forward-backward of one unit over a fixed frame span.

    The path must enter at the first frame and leave after the last one.
    Returns (sum log-likelihood, best-path log-likelihood, occupancy matrix
    of shape (span, n_states)). Spans shorter than the state chain have no
    admissible path and raise.
    """
    unit = model.units.get(unit_label)
    if unit is None:
        raise DataError(f"unit {unit_label!r} not in model inventory")
    s = unit.n_states
    n = frames.shape[0]
    if n < s:
        raise AlignmentError(f"span of {n} frames cannot traverse {s} states")
    t = unit.trans
    with np.errstate(divide="ignore"):
        l_entry = math.log(t[0, 1])
        l_self = np.log(t[np.arange(1, s + 1), np.arange(1, s + 1)])
        l_next = np.log(t[np.arange(1, s + 1), np.arange(2, s + 2)])
    emis = np.empty((n, s))
    for k in range(s):
        emis[:, k] = model.outputs[model.tied_of(unit_label, k)].log_density(frames)

    alpha = np.full((n, s), NEG_INF)
    v = np.full((n, s), NEG_INF)
    alpha[0, 0] = l_entry + emis[0, 0]
    v[0, 0] = alpha[0, 0]
    for i in range(1, n):
        stay = alpha[i - 1] + l_self
        move = np.r_[NEG_INF, alpha[i - 1, :-1] + l_next[:-1]]
        alpha[i] = np.logaddexp(stay, move) + emis[i]
        v[i] = np.maximum(v[i - 1] + l_self, np.r_[NEG_INF, v[i - 1, :-1] + l_next[:-1]]) + emis[i]
    ll = float(alpha[n - 1, s - 1] + l_next[s - 1])
    vit = float(v[n - 1, s - 1] + l_next[s - 1])

    beta = np.full((n, s), NEG_INF)
    beta[n - 1, s - 1] = l_next[s - 1]
    for i in range(n - 2, -1, -1):
        stay = beta[i + 1] + l_self + emis[i + 1]
        move = np.r_[beta[i + 1, 1:] + l_next[:-1] + emis[i + 1, 1:], NEG_INF]
        beta[i] = np.logaddexp(stay, move)
    gamma = np.exp(alpha + beta - ll)
    return ll, vit, gamma


# ---------------------------------------------------------------------------
# Baum-Welch
# ---------------------------------------------------------------------------

@dataclass
class SuffStats:
    """Per-pass accumulators keyed by the model's tied index order."""

    occ: np.ndarray
    first: np.ndarray
    second: np.ndarray
    outer: np.ndarray | None
    trans: dict[str, np.ndarray]
    loglik: float


def _utterance_stats(model: HmmModel, graph: CompositeGraph, utt: Utterance,
                     tied_index: dict[int, int], full_cov: bool) -> SuffStats:
    emis = emission_matrix(model, graph, utt.frames)
    alpha, loglik = _forward(graph, emis, 1.0)
    if not np.isfinite(loglik):
        raise AlignmentError(f"{utt.utt_id}: no admissible state path of length {utt.n_frames}")
    beta = _backward(graph, emis, 1.0)
    gamma = np.exp(alpha + beta - loglik)
    align = Alignment(utt.utt_id, graph, gamma=gamma)

    occ_t = align.tied_occupancy(tied_index)
    occ = occ_t.sum(axis=0)
    first = occ_t.T @ utt.frames
    second = occ_t.T @ (utt.frames ** 2)
    outer = None
    if full_cov:
        outer = np.einsum("tj,ti,tk->jik", occ_t, utt.frames, utt.frames)

    trans: dict[str, np.ndarray] = {}

    def bump(prov: tuple, amount: float):
        for label, i, j in prov:
            mat = trans.get(label)
            if mat is None:
                s = model.units[label].n_states
                mat = trans[label] = np.zeros((s + 2, s + 2))
            mat[i, j] += amount

    n = utt.n_frames
    post0 = np.exp(graph.start_logp + emis[0, graph.start_dst]
                   + beta[0, graph.start_dst] - loglik)
    for i, p in enumerate(post0):
        if p > 0.0:
            bump(graph.start_prov[i], p)
    if n > 1:
        mat = (alpha[:-1][:, graph.arc_src] + graph.arc_logp
               + emis[1:][:, graph.arc_dst] + beta[1:][:, graph.arc_dst] - loglik)
        xi = np.exp(mat).sum(axis=0)
        for i, p in enumerate(xi):
            if p > 0.0:
                bump(graph.arc_prov[i], p)
    post_end = np.exp(alpha[n - 1, graph.end_src] + graph.end_logp - loglik)
    for i, p in enumerate(post_end):
        if p > 0.0:
            bump(graph.end_prov[i], p)

    return SuffStats(occ, first, second, outer, trans, float(loglik))


def _reestimate_transitions(model: HmmModel, counts: dict[str, np.ndarray]) -> dict[str, HmmUnit]:
    units = {}
    for label, unit in model.units.items():
        c = counts.get(label)
        if c is None:
            units[label] = unit
            continue
        t = np.array(unit.trans)
        support = t > 0.0
        for i in range(unit.n_states + 1):
            row_total = c[i].sum()
            if row_total <= 0.0:
                continue
            row = np.zeros_like(t[i])
            row[support[i]] = c[i][support[i]] / row_total
            row[support[i]] = np.maximum(row[support[i]], TRANSITION_FLOOR)
            row /= row.sum()
            t[i] = row
        units[label] = HmmUnit(label, unit.n_states, t)
    return units


def baum_welch_pass(model: HmmModel, corpus_graphs,
                    update=("means", "vars", "trans"),
                    full_cov: bool = False,
                    var_floor: float = VARIANCE_FLOOR) -> tuple[HmmModel, float]:
    """One EM pass; returns the updated model and the pass log-likelihood
    (computed with the incoming parameters).

    corpus_graphs is a sequence of (utterance, graph) pairs. Per-utterance
    statistics can be computed in parallel; they are merged in sequence
    order, so totals do not depend on the worker count.
    """
    tied_index = model.tied_index()
    tids = model.tied_ids

    stats_list = parallel_map(
        lambda pair: _utterance_stats(model, pair[1], pair[0], tied_index, full_cov),
        list(corpus_graphs),
    )

    d = model.dim
    occ = np.zeros(len(tids))
    first = np.zeros((len(tids), d))
    second = np.zeros((len(tids), d))
    outer = np.zeros((len(tids), d, d)) if full_cov else None
    trans: dict[str, np.ndarray] = {}
    for st in stats_list:
        occ += st.occ
        first += st.first
        second += st.second
        if full_cov:
            outer += st.outer
        for label, mat in st.trans.items():
            if label in trans:
                trans[label] += mat
            else:
                trans[label] = mat.copy()
    total_loglik = math.fsum(st.loglik for st in stats_list)

    outputs: dict[int, OutputDistribution] = {}
    for idx, tid in enumerate(tids):
        old = model.outputs[tid]
        if occ[idx] <= 1e-10:
            log.warning("tied state %d has no occupancy; keeping parameters", tid)
            outputs[tid] = old
            continue
        old_mean = old.mean if hasattr(old, "mean") else old.location
        mean = first[idx] / occ[idx] if "means" in update else np.asarray(old_mean)
        if full_cov:
            cov = outer[idx] / occ[idx] - np.outer(mean, first[idx] / occ[idx]) \
                - np.outer(first[idx] / occ[idx], mean) + np.outer(mean, mean)
            cov = 0.5 * (cov + cov.T)
            dg = np.diag(cov).copy()
            np.fill_diagonal(cov, np.maximum(dg, var_floor))
            outputs[tid] = FullGaussian(mean, cov)
            continue
        if "vars" in update:
            ex2 = second[idx] / occ[idx]
            ex = first[idx] / occ[idx]
            var = ex2 - 2.0 * mean * ex + mean ** 2
            var = np.maximum(var, var_floor)
        else:
            var = old.variance
        outputs[tid] = DiagonalGaussian(mean, var)

    units = _reestimate_transitions(model, trans) if "trans" in update else dict(model.units)
    return model.with_outputs(outputs, units), total_loglik


def train_ml(model: HmmModel, corpus_graphs, passes: int,
             update=("means", "vars", "trans"), full_cov: bool = False,
             tol: float = 0.0) -> tuple[HmmModel, list[float]]:
    """Run Baum-Welch passes; optionally stop early when the largest
    relative parameter change drops below tol."""
    logliks = []
    for _ in range(passes):
        new_model, ll = baum_welch_pass(model, corpus_graphs,
                                        update=update, full_cov=full_cov)
        logliks.append(ll)
        if tol > 0.0 and max_param_change(model, new_model) < tol:
            model = new_model
            break
        model = new_model
    return model, logliks


def max_param_change(a: HmmModel, b: HmmModel) -> float:
    """Largest relative change across means, variances, and transitions."""
    worst = 0.0
    for tid in a.tied_ids:
        da, db = a.outputs[tid], b.outputs[tid]
        if isinstance(da, DiagonalGaussian) and isinstance(db, DiagonalGaussian):
            scale = np.sqrt(da.variance)
            worst = max(worst, float((np.abs(db.mean - da.mean) / scale).max()))
            worst = max(worst, float(np.abs(db.variance / da.variance - 1.0).max()))
    for label, ua in a.units.items():
        ub = b.units[label]
        worst = max(worst, float(np.abs(ub.trans - ua.trans).max()))
    return worst


# ---------------------------------------------------------------------------
# Alignment files
# ---------------------------------------------------------------------------

def save_alignments(alignments, path, occupancy_floor: float = 1e-12) -> None:
    """JSON lines: hard records carry node ids, fractional ones sparse
    (frame, node, occupancy) triples."""
    with open(path, "w", newline="\n") as f:
        for a in alignments:
            if a.is_hard:
                rec = {"utt_id": a.utt_id, "frames": [int(v) for v in a.nodes]}
            else:
                t_idx, n_idx = np.nonzero(a.gamma > occupancy_floor)
                rec = {
                    "utt_id": a.utt_id,
                    "occ": [[int(t), int(v), float(a.gamma[t, v])]
                            for t, v in zip(t_idx, n_idx)],
                }
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_alignments(path) -> dict[str, dict]:
    """Raw alignment records keyed by utterance id (graphs reattached by
    the caller, which knows how each graph was built)."""
    out = {}
    with open(path) as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out[rec["utt_id"]] = rec
    return out
