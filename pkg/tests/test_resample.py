import math

import numpy as np
import pytest

from hmmprobe.corpus import Corpus, TruthInfo, Utterance
from hmmprobe.decoder import build_graph
from hmmprobe.dists import RandomSource, sample_discrete
from hmmprobe.hmm import forward_backward, viterbi_align
from hmmprobe.resample import (
    Urn,
    build_urns,
    draw_frame,
    load_urns,
    parallel_resample,
    resample_utterance,
    save_urns,
    shuffle_regions,
)
from hmmprobe.synth import GroundTruthSpec, generate_corpus, state_tracks
from hmmprobe.util import DataError


def hand_corpus():
    """Two tiny utterances with hand-written tied tracks."""
    u1 = Utterance("u1", "spkA", ("w",), np.array([[0.0], [1.0], [2.0]]),
                   truth=TruthInfo((), np.array([0, 0, 1]), np.array([10, 10, 11])))
    u2 = Utterance("u2", "spkB", ("w",), np.array([[3.0], [4.0]]),
                   truth=TruthInfo((), np.array([0, 1]), np.array([10, 11])))
    return Corpus(1, [u1, u2])


class TestBuildUrns:
    def test_hand_contents_hard(self):
        corpus = hand_corpus()
        urns = build_urns(corpus, None, mode="si", count_mode="hard")
        u10 = urns.get(10)
        vals = sorted(urns.frame(u10, i)[0] for i in range(len(u10)))
        assert vals == [0.0, 1.0, 3.0]
        u11 = urns.get(11)
        vals = sorted(urns.frame(u11, i)[0] for i in range(len(u11)))
        assert vals == [2.0, 4.0]

    def test_sd_mode_never_mixes_speakers(self):
        corpus = hand_corpus()
        urns = build_urns(corpus, None, mode="sd", count_mode="hard")
        for key, urn in urns.urns.items():
            speakers = {corpus[int(i)].speaker for i in urn.utt_idx}
            assert speakers == {urn.speaker}

    def test_fractional_total_weight_matches_occupancy(self):
        spec = GroundTruthSpec(n_phones=4, n_words=3, dim=3, states_per_phone=2,
                               n_speakers=1)
        world = generate_corpus(spec, 6, 0, rng=31)
        aligns = {}
        occ_totals = {}
        idx = world.model.tied_index()
        for utt in world.train:
            g = build_graph(world.model, world.lexicon, words=utt.words)
            _, a = forward_backward(world.model, g, utt)
            aligns[utt.utt_id] = a
            occ = a.tied_occupancy(idx).sum(axis=0)
            for tid, i in idx.items():
                occ_totals[tid] = occ_totals.get(tid, 0.0) + float(occ[i])
        urns = build_urns(world.train, aligns, mode="si", count_mode="fractional")
        for tid, total in occ_totals.items():
            if total < 1e-9:
                continue
            assert abs(urns.get(tid).total_weight - total) < 1e-6

    def test_missing_alignment_names_utterance(self):
        corpus = hand_corpus()
        with pytest.raises(DataError, match="u1"):
            build_urns(corpus, {}, mode="si")


class TestDrawFrame:
    def test_single_entry_urn_deterministic(self):
        corpus = hand_corpus()
        urns = build_urns(corpus, None, mode="sd", count_mode="hard")
        rng = RandomSource(1, "draw")
        for _ in range(5):
            f = draw_frame(urns, 11, "spkB", rng)
            assert f[0] == 4.0

    def test_weighted_frequencies(self):
        urn = Urn(0, None, np.array([0, 0]), np.array([0, 1]),
                  np.array([1.0, 3.0]))
        n = 100_000
        rng = RandomSource(2, "freq")
        hits = np.zeros(2)
        for _ in range(n):
            hits[urn.draw(rng.uniform())] += 1
        for p, c in zip((0.25, 0.75), hits):
            assert abs(c / n - p) < 3 * math.sqrt(p * (1 - p) / n)

    def test_draw_matches_sample_discrete_partition(self):
        urn = Urn(0, None, np.array([0, 0, 0]), np.array([0, 1, 2]),
                  np.array([0.2, 0.3, 0.5]))
        for u in (0.0, 0.1, 0.2, 0.49999, 0.5, 0.9, 1.0):
            assert urn.draw(u) == sample_discrete((0.2, 0.3, 0.5), u) - 1

    def test_sd_draw_stays_in_speaker(self):
        corpus = hand_corpus()
        urns = build_urns(corpus, None, mode="sd", count_mode="hard")
        rng = RandomSource(3, "sd")
        for _ in range(20):
            f = draw_frame(urns, 10, "spkA", rng)
            assert f[0] in (0.0, 1.0)

    def test_missing_urn_error_and_fallback(self):
        corpus = hand_corpus()
        sd = build_urns(corpus, None, mode="sd", count_mode="hard")
        si = build_urns(corpus, None, mode="si", count_mode="hard")
        rng = RandomSource(4, "fb")
        with pytest.raises(DataError, match="spkC"):
            draw_frame(sd, 10, "spkC", rng)
        f = draw_frame(sd, 10, "spkC", rng, fallback=si)
        assert f[0] in (0.0, 1.0, 3.0)


class TestResampleUtterance:
    def test_single_frame_urns_deterministic(self):
        corpus = hand_corpus()
        urns = build_urns(corpus, None, mode="sd", count_mode="hard")
        rng = RandomSource(5, "det")
        out = resample_utterance(urns, np.array([0, 1]), np.array([10, 11]),
                                 rng, "r0", speaker="spkB")
        np.testing.assert_allclose(out.frames[:, 0], [3.0, 4.0])

    def test_parallel_mode_preserves_lengths(self):
        spec = GroundTruthSpec(n_phones=4, n_words=3, dim=3, states_per_phone=2,
                               n_speakers=2)
        world = generate_corpus(spec, 8, 0, rng=32)
        tracks = state_tracks(world.train)
        urns = build_urns(world.train, None, mode="si", count_mode="hard")
        out = parallel_resample(urns, world.train, tracks, RandomSource(6, "par"))
        for a, b in zip(world.train, out):
            assert a.n_frames == b.n_frames
            np.testing.assert_array_equal(a.truth.state_ids, b.truth.state_ids)

    def test_bootstrap_moments_match_urn(self):
        spec = GroundTruthSpec(n_phones=3, n_words=3, dim=2, states_per_phone=1,
                               n_speakers=1, self_loop=0.7)
        world = generate_corpus(spec, 30, 0, rng=33)
        urns = build_urns(world.train, None, mode="si", count_mode="hard")
        tid = world.model.tied_ids[0]
        urn = urns.get(tid)
        contents = np.array([urns.frame(urn, i) for i in range(len(urn))])
        n = 100_000
        rng = RandomSource(7, "boot")
        draws = np.array([draw_frame(urns, tid, None, rng) for _ in range(n)])
        se = contents.std(axis=0) / math.sqrt(n)
        assert np.all(np.abs(draws.mean(axis=0) - contents.mean(axis=0)) < 4 * se)
        assert np.all(np.abs(draws.var(axis=0) / contents.var(axis=0) - 1) < 0.05)

    def test_two_sample_ks_below_critical(self):
        # marginal per-state distribution preserved under bootstrap draws
        spec = GroundTruthSpec(n_phones=3, n_words=3, dim=2, states_per_phone=1,
                               n_speakers=1, self_loop=0.7)
        world = generate_corpus(spec, 30, 0, rng=34)
        urns = build_urns(world.train, None, mode="si", count_mode="hard")
        tid = world.model.tied_ids[1]
        urn = urns.get(tid)
        contents = np.array([urns.frame(urn, i) for i in range(len(urn))])
        n = 100_000
        rng = RandomSource(8, "ks")
        draws = np.array([draw_frame(urns, tid, None, rng) for _ in range(n)])
        m = len(contents)
        crit = 1.6276 * math.sqrt((m + n) / (m * n))
        for dim in range(2):
            xs = np.sort(contents[:, dim])
            ys = np.sort(draws[:, dim])
            grid = np.unique(np.concatenate([xs, ys]))
            f1 = np.searchsorted(xs, grid, side="right") / m
            f2 = np.searchsorted(ys, grid, side="right") / n
            assert np.abs(f1 - f2).max() < crit


class TestShuffleRegions:
    def test_preserves_multiset_of_regions(self):
        states = np.array([0, 0, 1, 1, 1, 2, 3, 3])
        tied = np.array([5, 5, 6, 6, 6, 7, 8, 8])
        s2, t2 = shuffle_regions(states, tied, RandomSource(9, "shuf"))
        assert sorted(s2.tolist()) == sorted(states.tolist())
        assert sorted(t2.tolist()) == sorted(tied.tolist())
        # region durations preserved as a multiset
        from hmmprobe.regions import partition_regions

        lens_a = sorted(len(r) for r in partition_regions(states))
        lens_b = sorted(len(r) for r in partition_regions(s2))
        assert lens_a == lens_b


class TestSidecar:
    def test_roundtrip_and_checksum(self, tmp_path):
        corpus = hand_corpus()
        urns = build_urns(corpus, None, mode="sd", count_mode="hard")
        path = tmp_path / "urns.bin"
        save_urns(urns, path)
        back = load_urns(path, corpus)
        assert back.mode == "sd" and back.count_mode == "hard"
        assert set(back.urns) == set(urns.urns)
        for key in urns.urns:
            np.testing.assert_array_equal(back.urns[key].utt_idx, urns.urns[key].utt_idx)
            np.testing.assert_allclose(back.urns[key].weights, urns.urns[key].weights)

    def test_foreign_corpus_rejected(self, tmp_path):
        corpus = hand_corpus()
        urns = build_urns(corpus, None, mode="si", count_mode="hard")
        path = tmp_path / "urns.bin"
        save_urns(urns, path)
        other = Corpus(1, [Utterance("x", "s", ("w",), np.zeros((2, 1)),
                                     truth=TruthInfo((), np.array([0, 0]),
                                                     np.array([10, 10])))])
        with pytest.raises(DataError, match="checksum"):
            load_urns(path, other)
