"""Pseudo-label codes computed from the (detached) encoder output."""

from __future__ import annotations

import numpy as np

from .ot import (SinkhornConfig, build_fixed_order_prior, build_permutation_prior,
                 sinkhorn_with_prior)
from .types import CodeKind, CodeMatrix, Transcript, ValidationError


def l2_normalize(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), eps)


def prototype_similarity(embeddings: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """Cosine similarity between frame embeddings and prototypes (B x K)."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    prototypes = np.asarray(prototypes, dtype=np.float64)
    if embeddings.shape[1] != prototypes.shape[1]:
        raise ValidationError(
            f"embedding dim {embeddings.shape[1]} != prototype dim {prototypes.shape[1]}")
    return l2_normalize(embeddings) @ l2_normalize(prototypes).T


def frame_pseudo_labels(embeddings, prototypes, cfg: SinkhornConfig, sigma: float) -> CodeMatrix:
    sim = prototype_similarity(embeddings, prototypes)
    prior = build_fixed_order_prior(sim.shape[0], sim.shape[1], sigma)
    return sinkhorn_with_prior(sim, prior, cfg, kind=CodeKind.PSEUDO_FRAME)


def estimate_transcript(q_f) -> Transcript:
    """Order actions by the frame where each column of ``q_f`` peaks.

    Ties within a column go to the earliest frame; actions sharing an anchor
    frame are ordered by action id.
    """
    values = q_f.values if isinstance(q_f, CodeMatrix) else np.asarray(q_f, dtype=np.float64)
    anchors = np.argmax(values, axis=0)
    order = np.lexsort((np.arange(values.shape[1]), anchors))
    return Transcript(order)


def segment_pseudo_labels(transcript: Transcript, num_actions: int) -> CodeMatrix:
    transcript = Transcript(transcript)
    if len(transcript) != num_actions:
        raise ValidationError(f"transcript length {len(transcript)} != K={num_actions}")
    q = np.zeros((len(transcript), num_actions))
    q[np.arange(len(transcript)), list(transcript)] = 1.0
    return CodeMatrix(q, CodeKind.PSEUDO_SEGMENT)


def alignment_pseudo_labels(embeddings, prototypes, transcript: Transcript,
                            cfg: SinkhornConfig, sigma: float) -> CodeMatrix:
    sim = prototype_similarity(embeddings, prototypes)
    prior = build_permutation_prior(sim.shape[0], sim.shape[1], sigma, transcript)
    return sinkhorn_with_prior(sim, prior, cfg, kind=CodeKind.PSEUDO_ALIGN)
