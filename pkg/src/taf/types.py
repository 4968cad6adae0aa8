"""Shared value types for frame features, transcripts, code matrices and
segmentations.

Action indices are 0-based. Ground-truth background frames carry the
``IGNORE`` sentinel; predictions never emit it.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

IGNORE = -1


class ValidationError(ValueError):
    """Raised when a value object violates its invariants."""


@dataclass(frozen=True)
class FeatureSequence:
    """Per-video frame features, one row per frame."""

    frames: np.ndarray
    video_id: str = ""
    fps: Optional[float] = None

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2:
            raise ValidationError(f"frames must be 2-D, got shape {frames.shape}")
        if frames.shape[0] < 1 or frames.shape[1] < 1:
            raise ValidationError(f"empty feature matrix {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValidationError("non-finite feature values")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class ActionList:
    num_actions: int
    names: Optional[tuple] = None

    def __post_init__(self):
        if self.num_actions < 2:
            raise ValidationError("an activity needs at least 2 actions")
        if self.names is not None:
            names = tuple(self.names)
            if len(names) != self.num_actions:
                raise ValidationError("names must have one entry per action")
            if len(set(names)) != len(names):
                raise ValidationError("action names must be unique")
            object.__setattr__(self, "names", names)


class Transcript(tuple):
    """Ordered action sequence; always a permutation of ``range(K)``."""

    def __new__(cls, actions: Sequence[int]):
        items = tuple(int(a) for a in actions)
        if sorted(items) != list(range(len(items))):
            raise ValidationError(f"transcript {items} is not a permutation of 0..{len(items) - 1}")
        return super().__new__(cls, items)

    @classmethod
    def identity(cls, k: int) -> "Transcript":
        return cls(range(k))

    @property
    def num_actions(self) -> int:
        return len(self)

    def inverse(self) -> "Transcript":
        """Position of each action id: ``inv[t[p]] == p``."""
        inv = [0] * len(self)
        for p, a in enumerate(self):
            inv[a] = p
        return Transcript(inv)

    def __repr__(self):
        return f"Transcript({list(self)})"


class CodeKind(enum.Enum):
    PREDICTED_FRAME = "P_f"
    PSEUDO_FRAME = "Q_f"
    PREDICTED_SEGMENT = "P_s"
    PSEUDO_SEGMENT = "Q_s"
    PREDICTED_ALIGN = "P_a"
    PSEUDO_ALIGN = "Q_a"

    @property
    def is_transport_plan(self) -> bool:
        return self in (CodeKind.PSEUDO_FRAME, CodeKind.PSEUDO_ALIGN)


@dataclass(frozen=True)
class CodeMatrix:
    values: np.ndarray
    kind: CodeKind

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValidationError("code matrix must be 2-D")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


@dataclass
class CodeReport:
    ok: bool
    max_row_deviation: float
    max_col_deviation: float
    worst_row: int
    worst_col: int
    messages: list = field(default_factory=list)

    def __bool__(self):
        return self.ok


def validate_code_matrix(m: CodeMatrix, tol: float = 1e-9) -> CodeReport:
    """Check the kind-specific marginal invariants of a code matrix.

    Transport plans (``Q_f``, ``Q_a``) must have row sums ``1/R`` and column
    sums ``1/K``; every other kind must be row-stochastic.
    """
    v = m.values
    if not np.all(np.isfinite(v)):
        raise ValidationError("non-finite code")
    rows, cols = v.shape
    msgs = []
    if v.min() < -tol or v.max() > 1 + tol:
        msgs.append(f"entries outside [0, 1]: min={v.min():.3g} max={v.max():.3g}")
    row_sums = v.sum(axis=1)
    col_sums = v.sum(axis=0)
    if m.kind.is_transport_plan:
        row_dev = np.abs(row_sums - 1.0 / rows)
        col_dev = np.abs(col_sums - 1.0 / cols)
    else:
        row_dev = np.abs(row_sums - 1.0)
        col_dev = np.zeros(cols)
    worst_row = int(np.argmax(row_dev))
    worst_col = int(np.argmax(col_dev))
    if row_dev[worst_row] > tol:
        msgs.append(f"row {worst_row} sum deviates by {row_dev[worst_row]:.3g}")
    if col_dev[worst_col] > tol:
        msgs.append(f"column {worst_col} sum deviates by {col_dev[worst_col]:.3g}")
    return CodeReport(
        ok=not msgs,
        max_row_deviation=float(row_dev[worst_row]),
        max_col_deviation=float(col_dev[worst_col]),
        worst_row=worst_row,
        worst_col=worst_col,
        messages=msgs,
    )


Segment = tuple  # (action, start_frame, end_frame_inclusive)


def derive_segments(framewise: Sequence[int]) -> list:
    """Run-length encode a label sequence into ``(action, start, end)`` triples.

    ``end`` is inclusive and runs of ``IGNORE`` are dropped, so an ignored
    frame splits two runs of the same action.

    >>> derive_segments([0, 0, 1, 1, 1])
    [(0, 0, 1), (1, 2, 4)]
    """
    labels = np.asarray(framewise, dtype=np.int64).ravel()
    if labels.size == 0:
        raise ValidationError("empty sequence")
    change = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change - 1, [labels.size - 1]])
    return [
        (int(labels[s]), int(s), int(e))
        for s, e in zip(starts, ends)
        if labels[s] != IGNORE
    ]


def flatten_segments(segments: Sequence[Segment], length: Optional[int] = None) -> np.ndarray:
    """Inverse of :func:`derive_segments`; uncovered frames become ``IGNORE``."""
    if length is None:
        length = max(e for _, _, e in segments) + 1 if segments else 0
    out = np.full(length, IGNORE, dtype=np.int64)
    for action, start, end in segments:
        out[start:end + 1] = action
    return out


@dataclass(frozen=True)
class Segmentation:
    framewise: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.framewise, dtype=np.int64).ravel()
        if labels.size == 0:
            raise ValidationError("empty sequence")
        if np.any(labels < IGNORE):
            raise ValidationError("labels must be >= 0 or IGNORE")
        labels.setflags(write=False)
        object.__setattr__(self, "framewise", labels)

    @property
    def segments(self) -> list:
        return derive_segments(self.framewise)

    @property
    def action_order(self) -> list:
        return [a for a, _, _ in self.segments]

    def __len__(self):
        return self.framewise.size


@dataclass(frozen=True)
class EmbeddingSet:
    encoder_out: np.ndarray
    transcript_emb: np.ndarray
    decoder_out: np.ndarray

    def __post_init__(self):
        for name in ("encoder_out", "transcript_emb", "decoder_out"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValidationError(f"non-finite {name}")
        if self.transcript_emb.shape[0] != self.decoder_out.shape[0]:
            raise ValidationError("transcript and decoder row counts differ")
