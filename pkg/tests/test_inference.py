import numpy as np
import pytest

import taf.network as nw
from taf.inference import DecodeConfig, segment_video, segmentation_score, viterbi_decode
from taf.types import Transcript, ValidationError

from oracles import brute_force_segmentation


def random_probs(rng, b, k):
    return rng.dirichlet(np.ones(k), size=b)


class TestViterbiExamples:
    def test_hand_example(self):
        probs = np.array([[0.9, 0.1], [0.6, 0.4], [0.2, 0.8]])
        seg = viterbi_decode(probs, [0, 1])
        assert seg.framewise.tolist() == [0, 0, 1]
        # 0.9 * 0.6 * 0.8 = 0.432 beats 0.9 * 0.4 * 0.8 = 0.288
        assert np.exp(segmentation_score(probs, seg.framewise)) == pytest.approx(0.432)

    def test_consistent_one_hot_is_returned(self):
        labels = np.array([2, 2, 0, 0, 0, 1])
        probs = np.eye(3)[labels]
        seg = viterbi_decode(probs, [2, 0, 1])
        assert seg.framewise.tolist() == labels.tolist()
        assert segmentation_score(probs, seg.framewise) == 0.0

    def test_single_action(self, rng):
        seg = viterbi_decode(random_probs(rng, 7, 1), [0])
        assert seg.framewise.tolist() == [0] * 7

    def test_tie_prefers_later_boundary(self):
        probs = np.full((3, 2), 0.5)
        assert viterbi_decode(probs, [0, 1]).framewise.tolist() == [0, 0, 1]

    def test_too_short(self):
        with pytest.raises(ValidationError, match="sequence too short for transcript"):
            viterbi_decode(np.full((2, 3), 1 / 3), [0, 1, 2])
        with pytest.raises(ValidationError, match="sequence too short for transcript"):
            viterbi_decode(np.full((5, 2), 0.5), [0, 1], DecodeConfig(min_seg_frames=3))

    def test_zero_probabilities_are_floored(self):
        probs = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
        assert viterbi_decode(probs, [0, 1]).framewise.tolist() == [0, 0, 1]

    def test_decode_config_validation(self):
        with pytest.raises(ValidationError):
            DecodeConfig(source="fused")
        with pytest.raises(ValidationError):
            DecodeConfig(min_seg_frames=0)


class TestViterbiOracle:
    def test_matches_enumeration(self, rng):
        for _ in range(200):
            k = int(rng.integers(1, 4))
            b = int(rng.integers(k, 11))
            probs = random_probs(rng, b, k)
            t = Transcript(rng.permutation(k))
            seg = viterbi_decode(probs, t)
            _, best = brute_force_segmentation(probs, t)
            assert segmentation_score(probs, seg.framewise) == pytest.approx(best, abs=1e-9)

    @pytest.mark.parametrize("min_len", [2, 3])
    def test_matches_enumeration_with_min_length(self, rng, min_len):
        for _ in range(50):
            k = int(rng.integers(1, 4))
            b = int(rng.integers(k * min_len, 11))
            probs = random_probs(rng, b, k)
            t = Transcript(rng.permutation(k))
            seg = viterbi_decode(probs, t, DecodeConfig(min_seg_frames=min_len))
            labels, best = brute_force_segmentation(probs, t, min_len)
            assert segmentation_score(probs, seg.framewise) == pytest.approx(best, abs=1e-9)
            assert min(end - start + 1 for _, start, end in seg.segments) >= min_len


class TestViterbiProperties:
    def test_order_compliance(self, rng):
        for _ in range(50):
            k = int(rng.integers(1, 6))
            t = Transcript(rng.permutation(k))
            seg = viterbi_decode(random_probs(rng, 30, k), t)
            assert seg.action_order == list(t)

    def test_row_scaling_invariance(self, rng):
        probs = random_probs(rng, 40, 4)
        t = Transcript([3, 1, 0, 2])
        scaled = probs * rng.uniform(0.01, 100.0, size=(40, 1))
        np.testing.assert_array_equal(viterbi_decode(probs, t).framewise,
                                      viterbi_decode(scaled, t).framewise)

    def test_large_input_linear_time(self, rng):
        probs = random_probs(rng, 20000, 10)
        seg = viterbi_decode(probs, Transcript(rng.permutation(10)))
        assert len(seg) == 20000


class TestSegmentVideo:
    def setup_model(self):
        cfg = nw.ModelConfig(input_dim=4, num_actions=3, dim=8)
        return cfg, nw.init_params(cfg, seed=0)

    @pytest.mark.parametrize("source", ["align", "frame"])
    def test_output_follows_estimated_transcript(self, rng, source):
        cfg, params = self.setup_model()
        res = segment_video(rng.normal(size=(25, 4)), params, cfg, DecodeConfig(source=source))
        assert res.segmentation.action_order == list(res.transcript)
        assert len(res.segmentation) == 25
        assert ("P_a" in res.probs) == (source == "align")

    def test_deterministic(self, rng):
        cfg, params = self.setup_model()
        x = rng.normal(size=(25, 4))
        a = segment_video(x, params, cfg)
        b = segment_video(x, params, cfg)
        np.testing.assert_array_equal(a.segmentation.framewise, b.segmentation.framewise)
        np.testing.assert_array_equal(a.probs["P_a"], b.probs["P_a"])
