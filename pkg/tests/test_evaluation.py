import json

import numpy as np
import pytest

from taf.evaluation import (apply_mapping, confusion_matrix, evaluate, f1_at_50, f1_video,
                            hungarian_match, mof)
from taf.types import IGNORE, ValidationError, derive_segments

from oracles import brute_force_assignment


class TestHungarian:
    def test_hand_example(self):
        assert hungarian_match(np.array([[5, 1], [2, 3]])) == {0: 0, 1: 1}

    def test_anti_diagonal(self):
        assert hungarian_match(np.array([[1, 5], [3, 2]])) == {0: 1, 1: 0}

    def test_diagonal_is_identity(self):
        assert hungarian_match(np.diag([4, 7, 1, 2])) == {0: 0, 1: 1, 2: 2, 3: 3}

    def test_row_permutation_equivariance(self, rng):
        conf = rng.integers(0, 50, size=(5, 5))
        perm = rng.permutation(5)
        base = hungarian_match(conf)
        permuted = hungarian_match(conf[perm])
        for new_row, old_row in enumerate(perm):
            assert permuted[new_row] == base[old_row]

    def test_matches_enumeration(self, rng):
        for _ in range(200):
            k = int(rng.integers(1, 7))
            conf = rng.integers(0, 20, size=(k, k))
            mapping = hungarian_match(conf)
            best, _ = brute_force_assignment(conf)
            assert sum(conf[p, g] for p, g in mapping.items()) == best
            assert sorted(mapping.values()) == list(range(k))

    def test_tie_break_is_lexicographic(self):
        # every permutation scores the same
        assert hungarian_match(np.ones((3, 3))) == {0: 0, 1: 1, 2: 2}
        assert hungarian_match(np.array([[1, 1], [1, 1]])) == {0: 0, 1: 1}

    def test_rectangular_padding(self):
        conf = np.array([[0, 9], [4, 0], [1, 1]])  # 3 predicted, 2 gt classes
        mapping = hungarian_match(conf)
        assert mapping == {0: 1, 1: 0}


class TestMof:
    def test_hand_example(self):
        assert mof([[0, 0, 1, 1]], [[0, 1, 1, 1]], {0: 0, 1: 1}) == 0.75

    def test_perfect(self):
        gt = [np.array([2, 2, 0, 1])]
        assert mof(gt, gt, {0: 0, 1: 1, 2: 2}) == 1.0

    def test_ignore_excluded(self):
        assert mof([[0, IGNORE]], [[0, 1]], {0: 0, 1: 1}) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            mof([[0, 1]], [[0, 1, 1]], {0: 0, 1: 1})

    def test_unmatched_prediction_counts_as_wrong(self):
        assert apply_mapping([0, 2], {0: 0}, num_gt=2).tolist() == [0, 4]
        assert mof([[0, 1]], [[0, 2]], {0: 0}, num_gt=2) == 0.5


class TestF1:
    def test_hand_example(self):
        gt = [(0, 0, 4), (1, 5, 9)]
        pred = [(0, 0, 1), (1, 2, 9)]
        # IoU 2/5 = 0.4 (miss), 5/8 = 0.625 (hit) -> P = R = 0.5
        assert f1_video(gt, pred) == pytest.approx(0.5)

    def test_framewise_hand_example(self):
        gt = [0] * 5 + [1] * 5
        pred = [0] * 2 + [1] * 8
        score, per_video = f1_at_50([gt], [pred], {0: 0, 1: 1})
        assert score == pytest.approx(0.5)
        assert per_video == [pytest.approx(0.5)]

    def test_perfect(self):
        segs = [(0, 0, 3), (2, 4, 6), (1, 7, 9)]
        assert f1_video(segs, segs) == 1.0

    def test_empty_prediction(self):
        assert f1_video([(0, 0, 3)], []) == 0.0

    def test_iou_exactly_half_is_not_a_hit(self):
        assert f1_video([(0, 0, 3)], [(0, 0, 1)]) == 0.0

    def test_class_must_match(self):
        assert f1_video([(0, 0, 9)], [(1, 0, 9)]) == 0.0


class TestEvaluate:
    def test_relabeling_invariance(self, rng):
        gt = [np.repeat(rng.permutation(4), rng.integers(3, 9, size=4)) for _ in range(5)]
        pred = [np.where(rng.random(len(g)) < 0.2, rng.integers(0, 4, len(g)), g) for g in gt]
        perm = rng.permutation(4)
        a = evaluate(gt, pred, num_actions=4)
        b = evaluate(gt, [perm[p] for p in pred], num_actions=4)
        assert a.mof == pytest.approx(b.mof)
        assert a.f1 == pytest.approx(b.f1)

    def test_bounds(self, rng):
        for _ in range(20):
            gt = [rng.integers(0, 3, size=15) for _ in range(3)]
            pred = [rng.integers(0, 3, size=15) for _ in range(3)]
            rep = evaluate(gt, pred)
            assert 0.0 <= rep.mof <= 1.0 and 0.0 <= rep.f1 <= 1.0

    def test_pred_equals_gt(self):
        gt = [np.array([1, 1, 0, 0, 2]), np.array([0, 2, 2, 1])]
        rep = evaluate(gt, gt)
        assert rep.mof == 1.0 and rep.f1 == 1.0

    def test_activities_are_averaged(self):
        gt = [np.array([0, 0, 1, 1]), np.array([0, 0, 0, 0, 0, 0, 0, 0, 1, 1])]
        pred = [np.array([0, 1, 1, 1]), np.array([0, 0, 0, 0, 0, 0, 0, 0, 1, 1])]
        rep = evaluate(gt, pred, activities=["a", "b"])
        assert rep.per_activity["a"]["mof"] == 0.75
        assert rep.per_activity["b"]["mof"] == 1.0
        assert rep.mof == pytest.approx(0.875)

    def test_pooling_within_activity(self):
        gt = [np.array([0, 0, 1, 1]), np.array([0, 0, 0, 0, 0, 0, 0, 0, 1, 1])]
        pred = [np.array([0, 1, 1, 1]), np.array([0, 0, 0, 0, 0, 0, 0, 0, 1, 1])]
        assert evaluate(gt, pred).mof == pytest.approx(13 / 14)

    def test_confusion_and_json(self):
        gt = [np.array([0, 0, 1, IGNORE])]
        pred = [np.array([1, 1, 0, 0])]
        conf = confusion_matrix(gt, pred, 2, 2)
        assert conf.tolist() == [[0, 1], [2, 0]]
        rep = evaluate(gt, pred, num_actions=2)
        assert rep.mapping == {0: 1, 1: 0}
        assert rep.mof == 1.0
        data = json.loads(rep.to_json())
        assert data["mapping"] == {"0": 1, "1": 0}

    def test_count_mismatch(self):
        with pytest.raises(ValidationError):
            evaluate([np.zeros(3, int)], [])

    def test_ignore_frames_split_segments(self):
        gt = np.array([0, 0, IGNORE, IGNORE, 1, 1])
        pred = np.array([0, 0, 0, 1, 1, 1])
        _, per_video = f1_at_50([gt], [pred], {0: 0, 1: 1})
        assert derive_segments(gt) == [(0, 0, 1), (1, 4, 5)]
        assert per_video == [1.0]
