"""scikit-learn style estimator around the training and decoding pipeline.

``X`` is a list of per-video ``(B_i, d_in)`` feature arrays (or
:class:`~taf.types.FeatureSequence` objects). ``fit`` ignores ``y``;
``score`` uses it as ground-truth framewise labels.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from . import network as nw
from .evaluation import evaluate
from .inference import DecodeConfig, segment_video
from .ot import SinkhornConfig
from .training import TrainConfig, train
from .types import FeatureSequence, ValidationError


def check_sequences(X, input_dim=None, min_frames=1) -> list:
    """Validate a list of per-video feature matrices; returns float64 arrays."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    if len(X) == 0:
        raise ValueError("expected at least one video")
    out = []
    for i, x in enumerate(X):
        if isinstance(x, FeatureSequence):
            x = x.frames
        arr = check_array(x, dtype=np.float64, ensure_min_samples=min_frames,
                          input_name=f"X[{i}]")
        if input_dim is None:
            input_dim = arr.shape[1]
        elif arr.shape[1] != input_dim:
            raise ValueError(f"X[{i}] has {arr.shape[1]} features, expected {input_dim}")
        out.append(arr)
    return out


class PermutationAwareSegmenter(BaseEstimator):
    """Unsupervised action segmentation with transcript-aware self-training.

    Parameters
    ----------
    n_actions : int
        Number of actions K in the activity.
    dim : int
        Width of the attention encoder/decoder.
    stage1_epochs, stage2_epochs : int
        Frame-only warm-up epochs, then epochs on the combined loss.
    rho : float
        Sinkhorn regularisation strength.
    decode_source : {"align", "frame"}
        Probabilities handed to the Viterbi decoder.
    """

    def __init__(self, n_actions=5, dim=30, stage1_epochs=30, stage2_epochs=70, lr=1e-3,
                 weight_decay=1e-5, alpha=1.0, beta=1.0, rho=0.07, sinkhorn_iterations=3,
                 sigma=None, tau=0.1, tau_align=1e-3, encoder_dropout=0.3,
                 decoder_dropout=0.1, segment_order="T", align_order="T",
                 decode_source="align", min_seg_frames=1, random_state=0):
        self.n_actions = n_actions
        self.dim = dim
        self.stage1_epochs = stage1_epochs
        self.stage2_epochs = stage2_epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.alpha = alpha
        self.beta = beta
        self.rho = rho
        self.sinkhorn_iterations = sinkhorn_iterations
        self.sigma = sigma
        self.tau = tau
        self.tau_align = tau_align
        self.encoder_dropout = encoder_dropout
        self.decoder_dropout = decoder_dropout
        self.segment_order = segment_order
        self.align_order = align_order
        self.decode_source = decode_source
        self.min_seg_frames = min_seg_frames
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(
            stage1_epochs=self.stage1_epochs, stage2_epochs=self.stage2_epochs, lr=self.lr,
            weight_decay=self.weight_decay, alpha=self.alpha, beta=self.beta,
            seed=int(self.random_state or 0), rho=self.rho,
            sinkhorn_iterations=self.sinkhorn_iterations, sigma=self.sigma,
            segment_order=self.segment_order, align_order=self.align_order)

    def _decode_config(self):
        source = self.decode_source
        if self.stage2_epochs == 0 and source == "align":
            # no decoder was trained
            source = "frame"
        return DecodeConfig(source=source, min_seg_frames=self.min_seg_frames)

    def fit(self, X, y=None):
        videos = check_sequences(X, min_frames=self.n_actions)
        self.model_config_ = nw.ModelConfig(
            input_dim=videos[0].shape[1], num_actions=self.n_actions, dim=self.dim,
            tau=self.tau, tau_align=self.tau_align, encoder_dropout=self.encoder_dropout,
            decoder_dropout=self.decoder_dropout)
        result = train(videos, self._train_config(), self.model_config_)
        self.params_ = result.params
        self.loss_log_ = result.log
        self.n_features_in_ = videos[0].shape[1]
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("call fit before predicting")

    def segment(self, X) -> list:
        """Full per-video results (segmentation, transcript, probabilities)."""
        self._check_fitted()
        videos = check_sequences(X, input_dim=self.n_features_in_)
        cfg = self._train_config()
        return [segment_video(x, self.params_, self.model_config_, self._decode_config(),
                              SinkhornConfig(rho=self.rho, iterations=self.sinkhorn_iterations),
                              cfg.sigma_for(self.n_actions))
                for x in videos]

    def predict(self, X) -> list:
        return [r.segmentation.framewise.copy() for r in self.segment(X)]

    def predict_proba(self, X) -> list:
        key = "P_a" if self._decode_config().source == "align" else "P_f"
        return [r.probs[key] for r in self.segment(X)]

    def transform(self, X) -> list:
        """Unit-norm frame embeddings from the trained encoder."""
        self._check_fitted()
        return [nw.encode(x, self.params_, self.model_config_)[0]
                for x in check_sequences(X, input_dim=self.n_features_in_)]

    def score(self, X, y) -> float:
        """Activity-level Hungarian-matched MOF."""
        if len(y) != len(check_sequences(X)):
            raise ValidationError("X and y must hold the same number of videos")
        return evaluate(list(y), self.predict(X), num_actions=self.n_actions).mof
