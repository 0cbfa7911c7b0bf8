import math

import numpy as np
import pytest

from hmmprobe.corpus import Utterance
from hmmprobe.dists import DiagonalGaussian, RandomSource
from hmmprobe.hmm import (
    AlignmentError,
    GraphBuilder,
    HmmModel,
    HmmUnit,
    baum_welch_pass,
    chain_graph,
    emission_matrix,
    forward_backward,
    make_unit,
    max_param_change,
    viterbi_align,
)

from oracles import brute_force_best, brute_force_loglik, brute_force_occupancy


def toy_model(n_states=3, self_loop=0.5, dim=2, rng_seed=0, n_units=1, separation=3.0):
    rng = np.random.default_rng(rng_seed)
    units, tying, outputs = {}, {}, {}
    tid = 0
    for u in range(n_units):
        label = f"p{u}"
        units[label] = make_unit(label, n_states, self_loop)
        for k in range(n_states):
            tying[(label, k)] = tid
            outputs[tid] = DiagonalGaussian(
                rng.normal(scale=separation, size=dim), rng.uniform(0.5, 2.0, size=dim)
            )
            tid += 1
    return HmmModel(dim, units, tying, outputs)


def utt_from(model, frames, utt_id="u0"):
    return Utterance(utt_id, "spk0", ("w",), np.asarray(frames, dtype=np.float64))


class TestUnitValidation:
    def test_rows_sum_to_one(self):
        t = np.zeros((3, 3))
        t[0, 1] = 0.9
        t[1, 1], t[1, 2] = 0.5, 0.5
        with pytest.raises(Exception):
            HmmUnit("bad", 1, t)

    def test_no_skip_enforced(self):
        t = np.zeros((5, 5))
        t[0, 1] = 1.0
        t[1, 1], t[1, 3] = 0.5, 0.5  # skips state 2
        t[2, 2], t[2, 3] = 0.5, 0.5
        t[3, 3], t[3, 4] = 0.5, 0.5
        with pytest.raises(Exception):
            HmmUnit("bad", 3, t)

    def test_tee_arc_allowed(self):
        u = make_unit("sil", 2, 0.4, tee_prob=0.3)
        assert abs(u.tee_prob - 0.3) < 1e-15

    def test_model_tying_checked(self):
        unit = make_unit("p0", 2, 0.5)
        out = {0: DiagonalGaussian([0.0], [1.0])}
        with pytest.raises(Exception):
            HmmModel(1, {"p0": unit}, {("p0", 0): 0}, out)  # state 1 unmapped


class TestForwardBackward:
    def test_single_state_closed_form(self):
        q = 0.3
        model = toy_model(n_states=1, self_loop=q, dim=2, rng_seed=1)
        graph = chain_graph(model, ["p0"])
        rng = np.random.default_rng(2)
        frames = rng.normal(size=(6, 2))
        utt = utt_from(model, frames)
        ll, align = forward_backward(model, graph, utt)
        dist = model.outputs[0]
        expected = float(dist.log_density(frames).sum()) + 5 * math.log(q) + math.log(1 - q)
        assert abs(ll - expected) < 1e-10
        np.testing.assert_allclose(align.gamma.sum(axis=1), 1.0, atol=1e-9)

    def test_matches_enumeration(self):
        model = toy_model(n_states=3, self_loop=0.5, rng_seed=3)
        graph = chain_graph(model, ["p0"])
        rng = np.random.default_rng(4)
        utt = utt_from(model, rng.normal(size=(5, 2)))
        emis = emission_matrix(model, graph, utt.frames)
        ll, align = forward_backward(model, graph, utt)
        assert abs(ll - brute_force_loglik(graph, emis)) < 1e-8
        occ = brute_force_occupancy(graph, emis)
        np.testing.assert_allclose(align.gamma, occ, atol=1e-9)

    def test_random_instances_against_enumeration(self):
        rng = np.random.default_rng(5)
        for trial in range(25):
            n_states = int(rng.integers(1, 5))
            n_frames = int(rng.integers(n_states, 9))
            model = toy_model(n_states=n_states, self_loop=float(rng.uniform(0.2, 0.8)),
                              rng_seed=trial + 10)
            graph = chain_graph(model, ["p0"])
            utt = utt_from(model, rng.normal(size=(n_frames, 2)))
            emis = emission_matrix(model, graph, utt.frames)
            ll, _ = forward_backward(model, graph, utt)
            assert abs(ll - brute_force_loglik(graph, emis)) < 1e-8

    def test_too_few_frames_raises(self):
        model = toy_model(n_states=3)
        graph = chain_graph(model, ["p0"])
        utt = utt_from(model, np.zeros((2, 2)))
        with pytest.raises(AlignmentError):
            forward_backward(model, graph, utt)

    def test_two_unit_chain(self):
        model = toy_model(n_states=2, n_units=2, rng_seed=6)
        graph = chain_graph(model, ["p0", "p1", "p0"])
        rng = np.random.default_rng(7)
        utt = utt_from(model, rng.normal(size=(8, 2)))
        emis = emission_matrix(model, graph, utt.frames)
        ll, _ = forward_backward(model, graph, utt)
        assert abs(ll - brute_force_loglik(graph, emis)) < 1e-8


class TestViterbi:
    def test_single_path_graph(self):
        model = toy_model(n_states=3, self_loop=0.5)
        graph = chain_graph(model, ["p0"])
        utt = utt_from(model, np.random.default_rng(8).normal(size=(3, 2)))
        score, align = viterbi_align(model, graph, utt)
        np.testing.assert_array_equal(align.nodes, [0, 1, 2])

    def test_matches_enumeration_argmax(self):
        rng = np.random.default_rng(9)
        for trial in range(25):
            n_states = int(rng.integers(1, 5))
            n_frames = int(rng.integers(n_states, 9))
            model = toy_model(n_states=n_states, self_loop=float(rng.uniform(0.2, 0.8)),
                              rng_seed=trial + 40)
            graph = chain_graph(model, ["p0"])
            utt = utt_from(model, rng.normal(size=(n_frames, 2)))
            emis = emission_matrix(model, graph, utt.frames)
            score, align = viterbi_align(model, graph, utt)
            best_lp, best_nodes = brute_force_best(graph, emis)
            assert abs(score - best_lp) < 1e-8
            np.testing.assert_array_equal(align.nodes, best_nodes)

    def test_viterbi_at_most_forward(self):
        rng = np.random.default_rng(11)
        for trial in range(100):
            n_states = int(rng.integers(1, 4))
            n_frames = int(rng.integers(n_states, 8))
            model = toy_model(n_states=n_states, rng_seed=trial + 100)
            graph = chain_graph(model, ["p0"])
            utt = utt_from(model, rng.normal(size=(n_frames, 2)))
            vs, _ = viterbi_align(model, graph, utt)
            fs, _ = forward_backward(model, graph, utt)
            assert vs <= fs + 1e-10


class TestBaumWelch:
    def test_single_state_moments(self):
        model = toy_model(n_states=1, self_loop=0.5, dim=2, rng_seed=12)
        graph = chain_graph(model, ["p0"])
        rng = np.random.default_rng(13)
        frames = rng.normal(size=(40, 2))
        utt = utt_from(model, frames)
        new, _ = baum_welch_pass(model, [(utt, graph)])
        np.testing.assert_allclose(new.outputs[0].mean, frames.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(new.outputs[0].variance, frames.var(axis=0), atol=1e-12)

    def test_two_state_hand_instance(self):
        # Two emitting states, three frames; the only length-3 paths are
        # (1,1,2) and (1,2,2). Posteriors and weighted moments are computed
        # here with explicit scalar arithmetic.
        q1, q2 = 0.25, 0.5
        d1 = DiagonalGaussian([0.0], [1.0])
        d2 = DiagonalGaussian([2.0], [4.0])
        unit = make_unit("p0", 2, [q1, q2])
        model = HmmModel(1, {"p0": unit}, {("p0", 0): 0, ("p0", 1): 1}, {0: d1, 1: d2})
        graph = chain_graph(model, ["p0"])
        x = [0.4, 1.1, 2.3]
        utt = utt_from(model, np.array(x)[:, None])

        def f(dist, v):
            return math.exp(dist.log_density([v]))

        # path probabilities: entry->1 is 1.0, exits multiply (1-q)
        p112 = f(d1, x[0]) * q1 * f(d1, x[1]) * (1 - q1) * f(d2, x[2]) * (1 - q2)
        p122 = f(d1, x[0]) * (1 - q1) * f(d2, x[1]) * q2 * f(d2, x[2]) * (1 - q2)
        total = p112 + p122
        w112, w122 = p112 / total, p122 / total
        # frame occupancies of state 1: frame0 always, frame1 only on (1,1,2)
        g1 = [1.0, w112, 0.0]
        g2 = [0.0, w122, 1.0]
        occ1, occ2 = sum(g1), sum(g2)
        mean1 = sum(g * v for g, v in zip(g1, x)) / occ1
        mean2 = sum(g * v for g, v in zip(g2, x)) / occ2
        var1 = sum(g * (v - mean1) ** 2 for g, v in zip(g1, x)) / occ1
        var2 = sum(g * (v - mean2) ** 2 for g, v in zip(g2, x)) / occ2

        ll, align = forward_backward(model, graph, utt)
        assert abs(ll - math.log(total)) < 1e-12
        new, _ = baum_welch_pass(model, [(utt, graph)])
        assert abs(new.outputs[0].mean[0] - mean1) < 1e-12
        assert abs(new.outputs[1].mean[0] - mean2) < 1e-12
        assert abs(new.outputs[0].variance[0] - var1) < 1e-12
        assert abs(new.outputs[1].variance[0] - var2) < 1e-12
        # transition counts: state1 self-loop expected count w112, moves 1
        t = new.units["p0"].trans
        assert abs(t[1, 1] - w112 / (w112 + 1.0)) < 1e-12

    def test_loglik_nondecreasing(self):
        model = toy_model(n_states=2, dim=2, rng_seed=14, separation=1.0)
        graph = chain_graph(model, ["p0"])
        rng = np.random.default_rng(15)
        pairs = []
        for i in range(12):
            n = int(rng.integers(4, 12))
            pairs.append((utt_from(model, rng.normal(size=(n, 2)), f"u{i}"), graph))
        lls = []
        for _ in range(10):
            model, ll = baum_welch_pass(model, pairs)
            lls.append(ll)
        for a, b in zip(lls, lls[1:]):
            assert b >= a - 1e-8

    def test_zero_occupancy_keeps_params(self, caplog):
        # second unit never appears in any utterance
        model = toy_model(n_states=1, n_units=2, rng_seed=16)
        graph = chain_graph(model, ["p0"])
        utt = utt_from(model, np.random.default_rng(17).normal(size=(5, 2)))
        with caplog.at_level("WARNING"):
            new, _ = baum_welch_pass(model, [(utt, graph)])
        np.testing.assert_array_equal(new.outputs[1].mean, model.outputs[1].mean)

    def test_forward_equals_backward_total(self):
        from hmmprobe.hmm import _backward, _forward, _logsumexp

        model = toy_model(n_states=3, rng_seed=18)
        graph = chain_graph(model, ["p0"])
        rng = np.random.default_rng(19)
        frames = rng.normal(size=(7, 2))
        emis = emission_matrix(model, graph, frames)
        _, ll_f = _forward(graph, emis, 1.0)
        beta = _backward(graph, emis, 1.0)
        ll_b = _logsumexp(graph.start_logp + emis[0, graph.start_dst]
                          + beta[0, graph.start_dst])
        assert abs(ll_f - ll_b) < 1e-8


class TestGraphBuilder:
    def test_branching_paths_counted(self):
        # two alternative units between junctions: path set is the union
        model = toy_model(n_states=1, n_units=2, rng_seed=20, self_loop=0.5)
        b = GraphBuilder(model)
        j0 = b.add_junction()
        b.set_start(j0)
        jin_a, jout_a = b.add_unit("p0")
        jin_b, jout_b = b.add_unit("p1")
        b.add_eps(j0, jin_a, math.log(0.5))
        b.add_eps(j0, jin_b, math.log(0.5))
        end = b.add_junction()
        b.add_eps(jout_a, end)
        b.add_eps(jout_b, end)
        b.set_end(end)
        g = b.compile()
        rng = np.random.default_rng(21)
        frames = rng.normal(size=(3, 2))
        emis = emission_matrix(model, g, frames)
        from oracles import enumerate_paths

        paths = enumerate_paths(g, emis)
        # each alternative contributes exactly one node sequence of length 3
        assert len(paths) == 2
        ll, _ = forward_backward(model, g, utt_from(model, frames))
        assert abs(ll - brute_force_loglik(g, emis)) < 1e-10

    def test_tee_unit_pass_through(self):
        model = toy_model(n_states=1, n_units=2, rng_seed=22)
        units = dict(model.units)
        units["sil"] = make_unit("sil", 1, 0.5, tee_prob=0.4)
        tying = dict(model.tying)
        tying[("sil", 0)] = 0
        model = HmmModel(2, units, tying, model.outputs)
        g = chain_graph(model, ["p0", "sil", "p1"])
        rng = np.random.default_rng(23)
        frames = rng.normal(size=(4, 2))
        emis = emission_matrix(model, g, frames)
        ll, _ = forward_backward(model, g, utt_from(model, frames))
        assert abs(ll - brute_force_loglik(g, emis)) < 1e-10
        # some enumerated path skips silence entirely
        from oracles import enumerate_paths

        paths = enumerate_paths(g, emis)
        units_seen = {tuple(g.node_unit[v] for v in nodes) for nodes, _ in paths}
        assert any("sil" not in seq for seq in units_seen)
        assert any("sil" in seq for seq in units_seen)


class TestModelSerialization:
    def test_roundtrip(self, tmp_path):
        model = toy_model(n_states=2, n_units=2, rng_seed=24)
        path = tmp_path / "model.json"
        model.save(path)
        back = HmmModel.load(path)
        assert back.dim == model.dim
        for tid in model.tied_ids:
            np.testing.assert_allclose(back.outputs[tid].mean, model.outputs[tid].mean)
            np.testing.assert_allclose(back.outputs[tid].variance, model.outputs[tid].variance)
        for label in model.units:
            np.testing.assert_allclose(back.units[label].trans, model.units[label].trans)
        assert max_param_change(model, back) < 1e-15

    def test_deterministic_bytes(self, tmp_path):
        model = toy_model(n_states=2, rng_seed=25)
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        model.save(p1)
        model.save(p2)
        assert p1.read_bytes() == p2.read_bytes()
