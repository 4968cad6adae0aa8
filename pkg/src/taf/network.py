"""Attention encoder/decoder with hand-written reverse-mode gradients.

Parameters live in a flat ``dict`` of float64 arrays keyed by dotted names.
Groups by prefix: ``enc.`` (frame encoder), ``emb.`` (transcript embedding),
``dec.`` (decoder), ``head.`` (segment prediction layer), ``proto.``
(prototypes).

Every forward function returns its output together with a trace holding the
activations the matching backward function needs.
"""

from __future__ import annotations

import struct
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .types import Transcript, ValidationError

LN_EPS = 1e-5

ENCODER = "enc."
EMBEDDING = "emb."
DECODER = "dec."
HEAD = "head."
PROTOTYPES = "proto."
GROUPS = (ENCODER, EMBEDDING, DECODER, HEAD, PROTOTYPES)


class NonFiniteActivation(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    num_actions: int
    dim: int = 30
    encoder_layers: int = 2
    decoder_layers: int = 2
    mlp_ratio: int = 4
    tau: float = 0.1
    tau_align: float = 1e-3
    encoder_dropout: float = 0.3
    decoder_dropout: float = 0.1
    pe_span: float = 100.0
    pe_scale: float = 1.0
    encoder_pe: bool = False

    def __post_init__(self):
        if self.dim % 2:
            raise ValidationError("model dim must be even for sinusoidal encodings")
        if self.num_actions < 1 or self.input_dim < 1:
            raise ValidationError("input_dim and num_actions must be positive")
        if not (self.tau > 0 and self.tau_align > 0):
            raise ValidationError("temperatures must be > 0")

    def to_dict(self):
        return asdict(self)


# ----------------------------------------------------------------------------
# parameters


def init_params(cfg: ModelConfig, seed: int = 0) -> dict:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) matrices, unit gains, zero biases."""
    rng = np.random.default_rng(seed)
    d, h = cfg.dim, cfg.dim * cfg.mlp_ratio
    params = {}

    def mat(name, rows, cols):
        bound = 1.0 / np.sqrt(rows)
        params[name] = rng.uniform(-bound, bound, size=(rows, cols))

    def norm(name):
        params[name + ".g"] = np.ones(d)
        params[name + ".b"] = np.zeros(d)

    def attn(prefix):
        for w in ("Wq", "Wk", "Wv", "Wo"):
            mat(f"{prefix}.{w}", d, d)

    def mlp(prefix):
        mat(prefix + ".W1", d, h)
        params[prefix + ".b1"] = np.zeros(h)
        mat(prefix + ".W2", h, d)
        params[prefix + ".b2"] = np.zeros(d)

    mat("enc.in.W", cfg.input_dim, d)
    params["enc.in.b"] = np.zeros(d)
    for layer in range(cfg.encoder_layers):
        p = f"enc.{layer}"
        norm(p + ".ln1")
        attn(p + ".attn")
        norm(p + ".ln2")
        mlp(p + ".mlp")
    # last row is the start-of-transcript token used for teacher forcing
    mat("emb.table", cfg.num_actions + 1, d)
    for layer in range(cfg.decoder_layers):
        p = f"dec.{layer}"
        norm(p + ".ln1")
        attn(p + ".self")
        norm(p + ".ln2")
        attn(p + ".cross")
        norm(p + ".ln3")
        mlp(p + ".mlp")
    mat("head.W", d, cfg.num_actions)
    params["head.b"] = np.zeros(cfg.num_actions)
    protos = rng.normal(size=(cfg.num_actions, d))
    params["proto.C"] = protos / np.linalg.norm(protos, axis=1, keepdims=True)
    return params


def zeros_like_params(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def group_of(name: str) -> str:
    for g in GROUPS:
        if name.startswith(g):
            return g
    raise KeyError(name)


# ----------------------------------------------------------------------------
# positional encoding


def positional_encoding(length: int, dim: int, span: float = 100.0) -> np.ndarray:
    """Sinusoidal encoding of normalised time ``(i + 0.5) / length``.

    Frames and transcript positions share one time axis, so frame ``i`` and
    transcript slot ``p`` get similar codes when ``i / B ~ p / N``.
    """
    pos = (np.arange(length) + 0.5) / length * span
    freq = 1.0 / (10000.0 ** (np.arange(0, dim, 2) / dim))
    pe = np.empty((length, dim))
    pe[:, 0::2] = np.sin(pos[:, None] * freq)
    pe[:, 1::2] = np.cos(pos[:, None] * freq)
    return pe


# ----------------------------------------------------------------------------
# primitive ops


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _softmax_bwd(dy, y):
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _layernorm_bwd(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _l2norm(x):
    n = np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)
    y = x / n
    return y, (y, n)


def _l2norm_bwd(dy, cache):
    y, n = cache
    return (dy - y * (dy * y).sum(axis=-1, keepdims=True)) / n


def _dropout(x, rate, rng):
    if rng is None or rate <= 0:
        return x, None
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def _attention(params, prefix, xq, xkv, causal=False):
    d = xq.shape[1]
    scale = 1.0 / np.sqrt(d)
    Wq, Wk, Wv, Wo = (params[f"{prefix}.{w}"] for w in ("Wq", "Wk", "Wv", "Wo"))
    q, k, v = xq @ Wq, xkv @ Wk, xkv @ Wv
    s = (q @ k.T) * scale
    if causal:
        s = np.where(np.tri(s.shape[0], s.shape[1], dtype=bool), s, -np.inf)
    a = _softmax(s)
    o = a @ v
    return o @ Wo, dict(prefix=prefix, xq=xq, xkv=xkv, q=q, k=k, v=v, a=a, o=o, scale=scale)


def _attention_bwd(params, grads, dy, c):
    p = c["prefix"]
    grads[p + ".Wo"] += c["o"].T @ dy
    do = dy @ params[p + ".Wo"].T
    da = do @ c["v"].T
    dv = c["a"].T @ do
    ds = _softmax_bwd(da, c["a"]) * c["scale"]
    dq = ds @ c["k"]
    dk = ds.T @ c["q"]
    grads[p + ".Wq"] += c["xq"].T @ dq
    grads[p + ".Wk"] += c["xkv"].T @ dk
    grads[p + ".Wv"] += c["xkv"].T @ dv
    dxq = dq @ params[p + ".Wq"].T
    dxkv = dk @ params[p + ".Wk"].T + dv @ params[p + ".Wv"].T
    return dxq, dxkv


def _mlp(params, prefix, x):
    pre = x @ params[prefix + ".W1"] + params[prefix + ".b1"]
    h = np.maximum(pre, 0.0)
    return h @ params[prefix + ".W2"] + params[prefix + ".b2"], (x, pre, h)


def _mlp_bwd(params, grads, prefix, dy, cache):
    x, pre, h = cache
    grads[prefix + ".W2"] += h.T @ dy
    grads[prefix + ".b2"] += dy.sum(axis=0)
    dh = (dy @ params[prefix + ".W2"].T) * (pre > 0)
    grads[prefix + ".W1"] += x.T @ dh
    grads[prefix + ".b1"] += dh.sum(axis=0)
    return dh @ params[prefix + ".W1"].T


def _check_finite(x, where):
    if not np.all(np.isfinite(x)):
        raise NonFiniteActivation(f"non-finite activation in {where}")


# ----------------------------------------------------------------------------
# encoder


@dataclass
class EncoderTrace:
    x: np.ndarray
    layers: list
    norm_cache: tuple
    embeddings: np.ndarray  # E, unit rows

    @property
    def num_frames(self):
        return self.embeddings.shape[0]


def encode(x: np.ndarray, params: dict, cfg: ModelConfig,
           rng: Optional[np.random.Generator] = None):
    """Frame features (B x d_in) -> unit-norm frame embeddings E (B x d)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ValidationError(f"expected (B, {cfg.input_dim}) features, got {x.shape}")
    h = x @ params["enc.in.W"] + params["enc.in.b"]
    if cfg.encoder_pe:
        h = h + cfg.pe_scale * positional_encoding(len(x), cfg.dim, cfg.pe_span)
    layers = []
    for layer in range(cfg.encoder_layers):
        p = f"enc.{layer}"
        a, ln1 = _layernorm(h, params[p + ".ln1.g"], params[p + ".ln1.b"])
        att, att_c = _attention(params, p + ".attn", a, a)
        att, m1 = _dropout(att, cfg.encoder_dropout, rng)
        h = h + att
        a2, ln2 = _layernorm(h, params[p + ".ln2.g"], params[p + ".ln2.b"])
        ff, mlp_c = _mlp(params, p + ".mlp", a2)
        ff, m2 = _dropout(ff, cfg.encoder_dropout, rng)
        h = h + ff
        _check_finite(h, f"encoder layer {layer}")
        layers.append((ln1, att_c, m1, ln2, mlp_c, m2))
    e, norm_cache = _l2norm(h)
    return e, EncoderTrace(x=x, layers=layers, norm_cache=norm_cache, embeddings=e)


def encode_backward(d_e, trace: EncoderTrace, params, cfg, grads):
    dh = _l2norm_bwd(d_e, trace.norm_cache)
    for layer in reversed(range(cfg.encoder_layers)):
        p = f"enc.{layer}"
        ln1, att_c, m1, ln2, mlp_c, m2 = trace.layers[layer]
        dff = dh * m2 if m2 is not None else dh
        da2 = _mlp_bwd(params, grads, p + ".mlp", dff, mlp_c)
        dx, dg, db = _layernorm_bwd(da2, ln2)
        grads[p + ".ln2.g"] += dg
        grads[p + ".ln2.b"] += db
        dh = dh + dx
        datt = dh * m1 if m1 is not None else dh
        dq, dkv = _attention_bwd(params, grads, datt, att_c)
        dx, dg, db = _layernorm_bwd(dq + dkv, ln1)
        grads[p + ".ln1.g"] += dg
        grads[p + ".ln1.b"] += db
        dh = dh + dx
    grads["enc.in.W"] += trace.x.T @ dh
    grads["enc.in.b"] += dh.sum(axis=0)


# ----------------------------------------------------------------------------
# frame-level codes


def frame_logits(e, prototypes, tau):
    c, c_cache = _l2norm(prototypes)
    return (e @ c.T) / tau, (e, c, c_cache, tau)


def frame_logits_backward(dz, cache, grads):
    e, c, c_cache, tau = cache
    dz = dz / tau
    grads["proto.C"] += _l2norm_bwd(dz.T @ e, c_cache)
    return dz @ c


def frame_predicted_codes(e, prototypes, tau):
    """Row-wise softmax of cosine(E, C) / tau."""
    z, _ = frame_logits(np.asarray(e, dtype=np.float64), np.asarray(prototypes, dtype=np.float64), tau)
    return _softmax(z)


# ----------------------------------------------------------------------------
# decoder


@dataclass
class DecoderTrace:
    transcript: Transcript
    tokens: np.ndarray
    memory: np.ndarray
    layers: list
    decoder_out: np.ndarray
    transcript_emb: np.ndarray


def _frame_memory(e, cfg):
    return e + cfg.pe_scale * positional_encoding(len(e), cfg.dim, cfg.pe_span)


def decode(transcript, e, params: dict, cfg: ModelConfig,
           rng: Optional[np.random.Generator] = None):
    """Teacher-forced decoding of a transcript against frame embeddings.

    Slot ``p`` is fed the start token (p = 0) or ``t[p-1]``, and causal
    self-attention keeps row ``p`` of the output independent of ``t[p:]``.
    Returns ``(D, segment_logits, trace)``.
    """
    transcript = Transcript(transcript)
    n = len(transcript)
    if n != cfg.num_actions:
        raise ValidationError(f"transcript length {n} != K={cfg.num_actions}")
    tokens = np.array([cfg.num_actions] + list(transcript[:-1]), dtype=np.int64)
    pe = cfg.pe_scale * positional_encoding(n, cfg.dim, cfg.pe_span)
    s = params["emb.table"][tokens] + pe
    memory = _frame_memory(e, cfg)
    h = s
    layers = []
    for layer in range(cfg.decoder_layers):
        p = f"dec.{layer}"
        a, ln1 = _layernorm(h, params[p + ".ln1.g"], params[p + ".ln1.b"])
        sa, sa_c = _attention(params, p + ".self", a, a, causal=True)
        sa, m1 = _dropout(sa, cfg.decoder_dropout, rng)
        h = h + sa
        a, ln2 = _layernorm(h, params[p + ".ln2.g"], params[p + ".ln2.b"])
        ca, ca_c = _attention(params, p + ".cross", a, memory)
        ca, m2 = _dropout(ca, cfg.decoder_dropout, rng)
        h = h + ca
        a, ln3 = _layernorm(h, params[p + ".ln3.g"], params[p + ".ln3.b"])
        ff, mlp_c = _mlp(params, p + ".mlp", a)
        ff, m3 = _dropout(ff, cfg.decoder_dropout, rng)
        h = h + ff
        _check_finite(h, f"decoder layer {layer}")
        layers.append((ln1, sa_c, m1, ln2, ca_c, m2, ln3, mlp_c, m3))
    logits = h @ params["head.W"] + params["head.b"]
    trace = DecoderTrace(transcript=transcript, tokens=tokens, memory=memory,
                         layers=layers, decoder_out=h, transcript_emb=s)
    return h, logits, trace


def decode_backward(d_dec, d_logits, trace: DecoderTrace, params, cfg, grads):
    """Accumulate decoder gradients; returns dL/dE through the memory path."""
    h = trace.decoder_out
    dh = d_dec.copy() if d_dec is not None else np.zeros_like(h)
    if d_logits is not None:
        grads["head.W"] += h.T @ d_logits
        grads["head.b"] += d_logits.sum(axis=0)
        dh += d_logits @ params["head.W"].T
    dmem = np.zeros_like(trace.memory)
    for layer in reversed(range(cfg.decoder_layers)):
        p = f"dec.{layer}"
        ln1, sa_c, m1, ln2, ca_c, m2, ln3, mlp_c, m3 = trace.layers[layer]
        dff = dh * m3 if m3 is not None else dh
        da = _mlp_bwd(params, grads, p + ".mlp", dff, mlp_c)
        dx, dg, db = _layernorm_bwd(da, ln3)
        grads[p + ".ln3.g"] += dg
        grads[p + ".ln3.b"] += db
        dh = dh + dx
        dca = dh * m2 if m2 is not None else dh
        dq, dkv = _attention_bwd(params, grads, dca, ca_c)
        dmem += dkv
        dx, dg, db = _layernorm_bwd(dq, ln2)
        grads[p + ".ln2.g"] += dg
        grads[p + ".ln2.b"] += db
        dh = dh + dx
        dsa = dh * m1 if m1 is not None else dh
        dq, dkv = _attention_bwd(params, grads, dsa, sa_c)
        dx, dg, db = _layernorm_bwd(dq + dkv, ln1)
        grads[p + ".ln1.g"] += dg
        grads[p + ".ln1.b"] += db
        dh = dh + dx
    np.add.at(grads["emb.table"], trace.tokens, dh)
    return dmem


# ----------------------------------------------------------------------------
# frame-to-segment alignment


def align_logits(e, d, cfg: ModelConfig):
    """Position-indexed alignment logits (B x N) between frames and decoder slots."""
    fe = _frame_memory(e, cfg)
    sd = d + cfg.pe_scale * positional_encoding(len(d), cfg.dim, cfg.pe_span)
    return (fe @ sd.T) / cfg.tau_align, (fe, sd)


def align_logits_backward(dz, cache, cfg):
    fe, sd = cache
    dz = dz / cfg.tau_align
    return dz @ sd, dz.T @ fe  # dE, dD


def scatter_to_actions(pos_matrix, transcript):
    """Move column ``p`` to column ``t[p]``."""
    out = np.empty_like(pos_matrix)
    out[:, list(transcript)] = pos_matrix
    return out


def gather_positions(action_matrix, transcript):
    """Inverse of :func:`scatter_to_actions`."""
    return np.asarray(action_matrix)[:, list(transcript)]


def align(e, d, transcript, cfg: ModelConfig) -> np.ndarray:
    """Action-indexed alignment probabilities P_a (B x K)."""
    z, _ = align_logits(e, d, cfg)
    return scatter_to_actions(_softmax(z), Transcript(transcript))


# ----------------------------------------------------------------------------
# full objective


def soft_cross_entropy(logits, targets, norm):
    """``-(1/norm) * sum(targets * log_softmax(logits))`` and its logit gradient."""
    logp = log_softmax(logits)
    loss = -float((targets * logp).sum()) / norm
    grad = (np.exp(logp) * targets.sum(axis=1, keepdims=True) - targets) / norm
    return loss, grad


@dataclass
class ForwardTrace:
    encoder: EncoderTrace
    frame_cache: tuple
    frame_grad: np.ndarray
    losses: dict
    weights: tuple
    decoder: Optional[DecoderTrace] = None
    segment_grad: Optional[np.ndarray] = None
    align_cache: Optional[tuple] = None
    align_grad: Optional[np.ndarray] = None
    probs: dict = field(default_factory=dict)


def forward_losses(params, cfg: ModelConfig, enc: EncoderTrace, q_f, *,
                   transcript=None, q_s=None, q_a=None, alpha=1.0, beta=1.0,
                   rng=None) -> ForwardTrace:
    """Heads and losses on top of an encoder pass.

    Pseudo-label codes enter as plain arrays; no gradient is ever formed for
    them. The decoder runs only when a transcript is given and at least one
    of ``alpha``/``beta`` is non-zero.
    """
    e = enc.embeddings
    q_f = np.asarray(getattr(q_f, "values", q_f))
    z_f, f_cache = frame_logits(e, params["proto.C"], cfg.tau)
    l_f, g_f = soft_cross_entropy(z_f, q_f, len(e))
    losses = {"L_f": l_f, "L_s": 0.0, "L_a": 0.0}
    trace = ForwardTrace(encoder=enc, frame_cache=f_cache, frame_grad=g_f,
                         losses=losses, weights=(alpha, beta))
    trace.probs["P_f"] = np.exp(log_softmax(z_f))
    if transcript is not None and (alpha or beta):
        transcript = Transcript(transcript)
        d, z_s, dec = decode(transcript, e, params, cfg, rng)
        trace.decoder = dec
        if alpha:
            q_s = np.asarray(getattr(q_s, "values", q_s))
            losses["L_s"], trace.segment_grad = soft_cross_entropy(z_s, q_s, len(transcript))
            trace.segment_grad = alpha * trace.segment_grad
        trace.probs["P_s"] = np.exp(log_softmax(z_s))
        z_a, a_cache = align_logits(e, d, cfg)
        trace.align_cache = a_cache
        if beta:
            q_pos = gather_positions(np.asarray(getattr(q_a, "values", q_a)), transcript)
            losses["L_a"], g_a = soft_cross_entropy(z_a, q_pos, len(e))
            trace.align_grad = beta * g_a
        trace.probs["P_a"] = scatter_to_actions(np.exp(log_softmax(z_a)), transcript)
    losses["L"] = losses["L_f"] + alpha * losses["L_s"] + beta * losses["L_a"]
    return trace


def backward(trace: ForwardTrace, params, cfg: ModelConfig) -> dict:
    """Exact gradients of the weighted loss w.r.t. every parameter."""
    if trace is None or trace.encoder is None:
        raise ValidationError("missing forward trace")
    grads = zeros_like_params(params)
    d_e = frame_logits_backward(trace.frame_grad, trace.frame_cache, grads)
    if trace.decoder is not None:
        d_dec = np.zeros_like(trace.decoder.decoder_out)
        if trace.align_grad is not None:
            de_a, dd_a = align_logits_backward(trace.align_grad, trace.align_cache, cfg)
            d_e = d_e + de_a
            d_dec += dd_a
        d_mem = decode_backward(d_dec, trace.segment_grad, trace.decoder, params, cfg, grads)
        d_e = d_e + d_mem
    encode_backward(d_e, trace.encoder, params, cfg, grads)
    return grads


# ----------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"TAFCKPT\x00"
CKPT_VERSION = 1


def save_checkpoint(path, params: dict, config: dict) -> None:
    """Binary container: magic, version, JSON config echo, named f64 tensors."""
    blob = json.dumps(config, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f8")
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Return ``(params, config)`` from :func:`save_checkpoint` output."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CKPT_MAGIC:
        raise ValidationError(f"{path}: not a checkpoint (bad magic)")
    try:
        off = 8
        version, n = struct.unpack_from("<II", data, off)
        if version != CKPT_VERSION:
            raise ValidationError(f"{path}: unsupported checkpoint version {version}")
        off += 8
        config = json.loads(data[off:off + n])
        off += n
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        params = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + ln].decode()
            off += ln
            (ndim,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            size = int(np.prod(shape)) * 8
            if off + size > len(data):
                raise ValidationError(f"{path}: unexpected EOF")
            params[name] = np.frombuffer(data, dtype="<f8", count=size // 8,
                                         offset=off).reshape(shape).astype(np.float64)
            off += size
    except struct.error as exc:
        raise ValidationError(f"{path}: unexpected EOF") from exc
    return params, config
