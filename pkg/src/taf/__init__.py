"""Permutation-aware unsupervised temporal action segmentation.

Frame embeddings are clustered against learned action prototypes with
prior-regularised optimal transport, a transcript decoder estimates the
action order of each video, and a frame-to-segment alignment head is
trained against order-aware transport codes. Decoding is Viterbi under the
estimated order.
"""

from .estimator import PermutationAwareSegmenter
from .evaluation import EvalReport, evaluate
from .inference import DecodeConfig, segment_video, viterbi_decode
from .network import ModelConfig
from .ot import SinkhornConfig, sinkhorn_with_prior
from .training import TrainConfig, train
from .types import IGNORE, Segmentation, Transcript, ValidationError

__version__ = "0.1.0"

__all__ = [
    "IGNORE",
    "DecodeConfig",
    "EvalReport",
    "ModelConfig",
    "PermutationAwareSegmenter",
    "Segmentation",
    "SinkhornConfig",
    "TrainConfig",
    "Transcript",
    "ValidationError",
    "evaluate",
    "segment_video",
    "sinkhorn_with_prior",
    "train",
    "viterbi_decode",
]
