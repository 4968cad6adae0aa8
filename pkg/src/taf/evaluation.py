"""Activity-level Hungarian matching, MOF and F1@50."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .types import IGNORE, ValidationError, derive_segments


def confusion_matrix(gt_videos, pred_videos, num_pred, num_gt) -> np.ndarray:
    """Frame counts ``[pred_label, gt_label]`` pooled over videos, IGNORE frames skipped."""
    conf = np.zeros((num_pred, num_gt), dtype=np.int64)
    for gt, pred in zip(gt_videos, pred_videos):
        gt = np.asarray(gt, dtype=np.int64)
        pred = np.asarray(pred, dtype=np.int64)
        if gt.shape != pred.shape:
            raise ValidationError(f"length mismatch: gt {gt.size} vs pred {pred.size}")
        keep = gt != IGNORE
        np.add.at(conf, (pred[keep], gt[keep]), 1)
    return conf


def _max_assignment_value(weights) -> float:
    if weights.size == 0:
        return 0.0
    r, c = linear_sum_assignment(weights, maximize=True)
    return float(weights[r, c].sum())


def hungarian_match(confusion) -> dict:
    """Bijection ``pred -> gt`` maximising matched frames.

    Non-square matrices are zero-padded; classes matched to padding are left
    out of the mapping. Among optimal assignments the lexicographically
    smallest (by predicted id, then gt id) is returned.
    """
    conf = np.asarray(confusion, dtype=np.float64)
    n_pred, n_gt = conf.shape
    n = max(n_pred, n_gt)
    w = np.zeros((n, n))
    w[:n_pred, :n_gt] = conf
    best = _max_assignment_value(w)
    # fix rows one by one to the smallest column that keeps the optimum
    rows_left = list(range(n))
    cols_left = list(range(n))
    assignment = {}
    fixed_value = 0.0
    for i in range(n):
        rows_left.remove(i)
        for j in sorted(cols_left):
            rest_cols = [c for c in cols_left if c != j]
            rest = _max_assignment_value(w[np.ix_(rows_left, rest_cols)])
            if fixed_value + w[i, j] + rest >= best - 1e-9:
                assignment[i] = j
                fixed_value += w[i, j]
                cols_left.remove(j)
                break
    return {i: j for i, j in assignment.items() if i < n_pred and j < n_gt}


def apply_mapping(pred, mapping: dict, num_gt: int) -> np.ndarray:
    """Relabel predictions; unmatched predicted classes get ids >= ``num_gt``."""
    pred = np.asarray(pred, dtype=np.int64)
    out = num_gt + pred
    for p, g in mapping.items():
        out[pred == p] = g
    return out


def mof(gt_videos, pred_videos, mapping: dict, num_gt=None) -> float:
    """Fraction of non-IGNORE frames whose mapped prediction equals the ground truth."""
    if num_gt is None:
        num_gt = 1 + max(int(np.max(g)) for g in gt_videos)
    correct = total = 0
    for gt, pred in zip(gt_videos, pred_videos):
        gt = np.asarray(gt, dtype=np.int64)
        pred = np.asarray(pred, dtype=np.int64)
        if gt.shape != pred.shape:
            raise ValidationError(f"length mismatch: gt {gt.size} vs pred {pred.size}")
        keep = gt != IGNORE
        correct += int((apply_mapping(pred, mapping, num_gt)[keep] == gt[keep]).sum())
        total += int(keep.sum())
    return correct / total if total else 0.0


def _iou(a, b) -> float:
    inter = min(a[2], b[2]) - max(a[1], b[1]) + 1
    if inter <= 0:
        return 0.0
    union = max(a[2], b[2]) - min(a[1], b[1]) + 1
    return inter / union


def f1_video(gt_segments, pred_segments, threshold=0.5) -> float:
    """Segment F1 for one video with greedy one-to-one IoU matching."""
    pairs = []
    for pi, p in enumerate(pred_segments):
        for gi, g in enumerate(gt_segments):
            if p[0] == g[0]:
                iou = _iou(p, g)
                if iou > threshold:
                    pairs.append((-iou, pi, gi))
    pairs.sort()
    used_p, used_g = set(), set()
    tp = 0
    for _, pi, gi in pairs:
        if pi in used_p or gi in used_g:
            continue
        used_p.add(pi)
        used_g.add(gi)
        tp += 1
    precision = tp / len(pred_segments) if pred_segments else 0.0
    recall = tp / len(gt_segments) if gt_segments else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def f1_at_50(gt_videos, pred_videos, mapping: dict, num_gt=None) -> tuple:
    """Mean per-video F1@50 and the per-video list.

    Inputs are framewise label sequences; predicted frames that fall on
    IGNORE ground truth are dropped before segments are formed.
    """
    if num_gt is None:
        num_gt = 1 + max(int(np.max(g)) for g in gt_videos)
    scores = []
    for gt, pred in zip(gt_videos, pred_videos):
        gt = np.asarray(gt, dtype=np.int64)
        mapped = apply_mapping(pred, mapping, num_gt)
        mapped[gt == IGNORE] = IGNORE
        scores.append(f1_video(derive_segments(gt), derive_segments(mapped)))
    return (float(np.mean(scores)) if scores else 0.0), scores


@dataclass
class EvalReport:
    mof: float
    f1: float
    per_video_f1: list
    mapping: dict
    confusion: np.ndarray
    per_activity: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mof": self.mof,
            "f1": self.f1,
            "per_video_f1": list(self.per_video_f1),
            "mapping": {str(k): v for k, v in self.mapping.items()},
            "confusion": self.confusion.tolist(),
            "per_activity": self.per_activity,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(gt_videos: Sequence, pred_videos: Sequence, activities=None,
             num_actions=None) -> EvalReport:
    """Match labels per activity, then average MOF over activities.

    ``num_actions`` maps activity id to K (or is a single int); defaults to
    the largest label seen. The returned mapping/confusion are those of the
    first activity when there are several.
    """
    if len(gt_videos) != len(pred_videos):
        raise ValidationError("gt and prediction video counts differ")
    if activities is None:
        activities = ["default"] * len(gt_videos)
    groups = {}
    for idx, act in enumerate(activities):
        groups.setdefault(act, []).append(idx)
    per_activity = {}
    per_video_f1 = [0.0] * len(gt_videos)
    first = None
    for act, idxs in groups.items():
        gts = [np.asarray(gt_videos[i], dtype=np.int64) for i in idxs]
        preds = [np.asarray(pred_videos[i], dtype=np.int64) for i in idxs]
        if isinstance(num_actions, dict):
            k = num_actions[act]
        elif num_actions is not None:
            k = int(num_actions)
        else:
            k = 1 + max(int(g.max()) for g in gts)
        k_pred = max(k, 1 + max(int(p.max()) for p in preds))
        conf = confusion_matrix(gts, preds, k_pred, k)
        mapping = hungarian_match(conf)
        act_mof = mof(gts, preds, mapping, k)
        act_f1, scores = f1_at_50(gts, preds, mapping, k)
        for i, s in zip(idxs, scores):
            per_video_f1[i] = s
        per_activity[str(act)] = {"mof": act_mof, "f1": act_f1, "videos": len(idxs)}
        if first is None:
            first = (mapping, conf)
    return EvalReport(
        mof=float(np.mean([a["mof"] for a in per_activity.values()])),
        f1=float(np.mean(per_video_f1)),
        per_video_f1=per_video_f1,
        mapping=first[0],
        confusion=first[1],
        per_activity=per_activity,
    )
