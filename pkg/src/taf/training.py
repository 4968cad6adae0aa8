"""Cross-entropy objectives, Adam with decoupled weight decay, and the
two-stage self-training loop."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import network as nw
from .ot import SinkhornConfig, default_sigma
from .pseudo_labels import (alignment_pseudo_labels, estimate_transcript,
                            frame_pseudo_labels, segment_pseudo_labels)
from .types import FeatureSequence, Transcript, ValidationError

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


def _cross_entropy(p, q, norm):
    p = np.asarray(getattr(p, "values", p), dtype=np.float64)
    q = np.asarray(getattr(q, "values", q), dtype=np.float64)
    if p.shape != q.shape:
        raise ValidationError(f"shape mismatch: predicted {p.shape} vs pseudo-label {q.shape}")
    return -float((q * np.log(np.maximum(p, LOG_FLOOR))).sum()) / norm


def loss_frame(p_f, q_f) -> float:
    """Frame-level cross-entropy, normalised by the number of frames."""
    return _cross_entropy(p_f, q_f, np.shape(getattr(p_f, "values", p_f))[0])


def loss_segment(p_s, q_s) -> float:
    return _cross_entropy(p_s, q_s, np.shape(getattr(p_s, "values", p_s))[0])


def loss_align(p_a, q_a) -> float:
    return _cross_entropy(p_a, q_a, np.shape(getattr(p_a, "values", p_a))[0])


def loss_total(l_f, l_s, l_a, alpha=1.0, beta=1.0) -> float:
    return l_f + alpha * l_s + beta * l_a


class Adam:
    """Adam with decoupled weight decay over a dict of parameter arrays.

    Parameters not present in ``grads`` are left untouched, including their
    weight decay, which is how stage 1 freezes the decoder side. Prototype
    rows are projected back to the unit sphere after every step.
    """

    def __init__(self, lr=1e-3, weight_decay=1e-5, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = {}
        self.v = {}
        self.steps = {}

    def step(self, params: dict, grads: dict) -> None:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {name}")
        for name, g in grads.items():
            p = params[name]
            t = self.steps.get(name, 0) + 1
            self.steps[name] = t
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            if self.weight_decay:
                p *= 1 - self.lr * self.weight_decay
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        if "proto.C" in grads:
            c = params["proto.C"]
            c /= np.linalg.norm(c, axis=1, keepdims=True)


def adam_step(params, grads, state: Optional[Adam] = None, lr=1e-3, wd=0.0):
    """Functional wrapper: one in-place Adam step, returns the optimizer state."""
    if state is None:
        state = Adam(lr=lr, weight_decay=wd)
    state.lr, state.weight_decay = lr, wd
    state.step(params, grads)
    return state


@dataclass
class TrainConfig:
    stage1_epochs: int = 30
    stage2_epochs: int = 70
    lr: float = 1e-3
    weight_decay: float = 1e-5
    alpha: float = 1.0
    beta: float = 1.0
    seed: int = 0
    rho: float = 0.07
    sinkhorn_iterations: int = 3
    sigma: Optional[float] = None
    # "T": estimated transcript; "A": fixed canonical order (ablation)
    segment_order: str = "T"
    align_order: str = "T"

    def __post_init__(self):
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValidationError("epoch counts must be >= 0")
        if self.stage1_epochs + self.stage2_epochs == 0:
            raise ValidationError("at least one training epoch is required")
        if not self.lr > 0:
            raise ValidationError("lr must be > 0")
        if self.sigma is not None and not self.sigma > 0:
            raise ValidationError("sigma must be > 0")
        for name in ("segment_order", "align_order"):
            if getattr(self, name) not in ("T", "A"):
                raise ValidationError(f"{name} must be 'T' or 'A'")

    @property
    def sinkhorn(self) -> SinkhornConfig:
        return SinkhornConfig(rho=self.rho, iterations=self.sinkhorn_iterations)

    def sigma_for(self, num_actions: int) -> float:
        return self.sigma if self.sigma is not None else default_sigma(num_actions)

    def to_dict(self):
        return asdict(self)


@dataclass
class StepRecord:
    epoch: int
    video_id: str
    L_f: float
    L_s: float
    L_a: float
    L: float


@dataclass
class TrainResult:
    params: dict
    model_config: nw.ModelConfig
    log: list = field(default_factory=list)

    def epoch_means(self) -> np.ndarray:
        epochs = sorted({r.epoch for r in self.log})
        return np.array([np.mean([r.L for r in self.log if r.epoch == e]) for e in epochs])


def training_step(params, model_cfg: nw.ModelConfig, cfg: TrainConfig, x: np.ndarray,
                  stage: int, rng: Optional[np.random.Generator] = None):
    """Forward pass with freshly computed pseudo-labels; returns the trace."""
    k = model_cfg.num_actions
    sigma = cfg.sigma_for(k)
    enc_rng = rng if stage == 2 else None
    e, enc = nw.encode(x, params, model_cfg, rng=enc_rng)
    proto = params["proto.C"]
    q_f = frame_pseudo_labels(e, proto, cfg.sinkhorn, sigma)
    if stage == 1:
        return nw.forward_losses(params, model_cfg, enc, q_f, alpha=0.0, beta=0.0)
    t_est = estimate_transcript(q_f)
    fixed = Transcript.identity(k)
    t_seg = t_est if cfg.segment_order == "T" else fixed
    t_align = t_est if cfg.align_order == "T" else fixed
    q_s = segment_pseudo_labels(t_seg, k)
    q_a = alignment_pseudo_labels(e, proto, t_align, cfg.sinkhorn, sigma)
    return nw.forward_losses(params, model_cfg, enc, q_f, transcript=t_seg, q_s=q_s,
                             q_a=q_a, alpha=cfg.alpha, beta=cfg.beta, rng=rng)


def _as_arrays(videos) -> list:
    out = []
    for i, v in enumerate(videos):
        if isinstance(v, FeatureSequence):
            out.append((v.video_id or str(i), v.frames))
        else:
            out.append((str(i), np.asarray(v, dtype=np.float64)))
    return out


def train(videos: Sequence, cfg: TrainConfig, model_cfg: Optional[nw.ModelConfig] = None,
          num_actions: Optional[int] = None, callback=None) -> TrainResult:
    """Two-stage training, one video per step.

    Stage 1 trains the encoder and prototypes on the frame loss only; stage 2
    continues from those weights on the combined loss.
    """
    data = _as_arrays(videos)
    if not data:
        raise ValidationError("empty dataset")
    if model_cfg is None:
        if num_actions is None:
            raise ValidationError("num_actions or model_cfg is required")
        model_cfg = nw.ModelConfig(input_dim=data[0][1].shape[1], num_actions=num_actions)
    for vid, x in data:
        if x.shape[1] != model_cfg.input_dim:
            raise ValidationError(f"video {vid}: feature dim {x.shape[1]} != {model_cfg.input_dim}")
    params = nw.init_params(model_cfg, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(lr=cfg.lr, weight_decay=cfg.weight_decay)
    result = TrainResult(params=params, model_config=model_cfg)
    schedule = [1] * cfg.stage1_epochs + [2] * cfg.stage2_epochs
    stage1_groups = (nw.ENCODER, nw.PROTOTYPES)
    for epoch, stage in enumerate(schedule, start=1):
        for idx in rng.permutation(len(data)):
            vid, x = data[idx]
            trace = training_step(params, model_cfg, cfg, x, stage, rng=rng)
            grads = nw.backward(trace, params, model_cfg)
            if stage == 1:
                grads = {k: g for k, g in grads.items() if k.startswith(stage1_groups)}
            opt.step(params, grads)
            ls = trace.losses
            result.log.append(StepRecord(epoch, vid, ls["L_f"], ls["L_s"], ls["L_a"], ls["L"]))
        if callback is not None:
            callback(epoch, result)
        logger.debug("epoch %d stage %d mean loss %.4f", epoch, stage,
                     np.mean([r.L for r in result.log if r.epoch == epoch]))
    return result
