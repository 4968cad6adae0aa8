"""Order-constrained Viterbi decoding and per-video segmentation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import network as nw
from .ot import SinkhornConfig, default_sigma
from .pseudo_labels import estimate_transcript, frame_pseudo_labels
from .types import FeatureSequence, Segmentation, Transcript, ValidationError

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class DecodeConfig:
    source: str = "align"  # "align" (P_a) or "frame" (P_f)
    min_seg_frames: int = 1

    def __post_init__(self):
        if self.source not in ("align", "frame"):
            raise ValidationError("source must be 'align' or 'frame'")
        if self.min_seg_frames < 1:
            raise ValidationError("min_seg_frames must be >= 1")


def viterbi_decode(probs, transcript, cfg: DecodeConfig = DecodeConfig()) -> Segmentation:
    """Best labelling made of exactly one segment per transcript entry, in order.

    Maximises the summed log-probability over all placements of ``K - 1``
    boundaries with every segment at least ``min_seg_frames`` long. Runs in
    O(B K). On ties the later boundary wins.
    """
    probs = np.asarray(probs, dtype=np.float64)
    transcript = Transcript(transcript)
    n_frames, k = probs.shape[0], len(transcript)
    m = cfg.min_seg_frames
    if n_frames < k * m:
        raise ValidationError("sequence too short for transcript")
    if probs.ndim != 2 or probs.shape[1] <= max(transcript):
        raise ValidationError(f"probability matrix {probs.shape} does not cover transcript")
    # emission[i, s]: log-prob of frame i under the s-th transcript action
    emission = np.log(np.maximum(probs[:, list(transcript)], LOG_FLOOR))
    csum = np.vstack([np.zeros((1, k)), np.cumsum(emission, axis=0)])
    score = np.full((n_frames, k), -np.inf)
    # started[i, s]: segment s begins at frame i - m + 1 (as opposed to continuing)
    started = np.zeros((n_frames, k), dtype=bool)
    score[m - 1, 0] = csum[m, 0]
    started[m - 1, 0] = True
    for i in range(m, n_frames):
        block = csum[i + 1] - csum[i + 1 - m]
        stay = score[i - 1] + emission[i]
        enter = np.full(k, -np.inf)
        enter[1:] = score[i - m, :-1] + block[1:]
        take = enter >= stay
        score[i] = np.where(take, enter, stay)
        started[i] = take & np.isfinite(enter)
    labels = np.empty(n_frames, dtype=np.int64)
    i, s = n_frames - 1, k - 1
    if not np.isfinite(score[i, s]):
        raise ValidationError("no feasible segmentation")
    while s >= 0:
        if started[i, s]:
            labels[i - m + 1:i + 1] = transcript[s]
            i -= m
            s -= 1
        else:
            labels[i] = transcript[s]
            i -= 1
    return Segmentation(labels)


def segmentation_score(probs, labels) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    return float(np.log(np.maximum(probs[np.arange(len(labels)), labels], LOG_FLOOR)).sum())


@dataclass
class SegmentResult:
    segmentation: Segmentation
    transcript: Transcript
    probs: dict = field(default_factory=dict)


def segment_video(x, params: dict, model_cfg: nw.ModelConfig, cfg: DecodeConfig = DecodeConfig(),
                  sinkhorn: SinkhornConfig = SinkhornConfig(), sigma=None) -> SegmentResult:
    """Encode, estimate the transcript, align, then decode under that order."""
    frames = x.frames if isinstance(x, FeatureSequence) else np.asarray(x, dtype=np.float64)
    k = model_cfg.num_actions
    sigma = sigma if sigma is not None else default_sigma(k)
    e, _ = nw.encode(frames, params, model_cfg)
    q_f = frame_pseudo_labels(e, params["proto.C"], sinkhorn, sigma)
    transcript = estimate_transcript(q_f)
    p_f = nw.frame_predicted_codes(e, params["proto.C"], model_cfg.tau)
    probs = {"P_f": p_f, "Q_f": q_f.values}
    if cfg.source == "align":
        d, z_s, _ = nw.decode(transcript, e, params, model_cfg)
        probs["P_a"] = nw.align(e, d, transcript, model_cfg)
        probs["P_s"] = np.exp(nw.log_softmax(z_s))
        source = probs["P_a"]
    else:
        source = p_f
    seg = viterbi_decode(source, transcript, cfg)
    return SegmentResult(segmentation=seg, transcript=transcript, probs=probs)
