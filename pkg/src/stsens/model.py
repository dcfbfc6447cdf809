"""TFT-lite: a small Temporal Fusion Transformer on top of :mod:`stsens.autodiff`.

Parameters live in an ordered ``dict[str, np.ndarray]``.  The forward pass
wraps them as :class:`~stsens.autodiff.Tensor` objects, so the same code path
serves inference (under ``no_grad``) and training (graph recorded).

Data flow for a batch of windows::

    per-feature linear embeddings
      -> static VSN -> four static context vectors
      -> past / future VSNs (conditioned on the selection context)
      -> LSTM encoder over the past, decoder over the future
      -> gated skip + LayerNorm
      -> static enrichment GRN
      -> interpretable multi-head attention (causal, shared values)
      -> gated skip -> position-wise GRN -> gated skip
      -> linear head on the horizon positions
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import ScalerState, WindowBatch



class ShapeError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_static: int
    n_past: int
    n_future: int
    n_targets: int
    d_model: int = 16
    n_heads: int = 4
    dropout: float = 0.2
    past_len: int = 13
    horizon: int = 15
    static_names: list[str] = field(default_factory=list)
    past_names: list[str] = field(default_factory=list)
    future_names: list[str] = field(default_factory=list)
    target_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if min(self.n_static, self.n_past, self.n_future, self.n_targets) < 1:
            raise ValueError("every input role needs at least one feature")

    @property
    def d_attn(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_v(self) -> int:
        return self.d_model

    @property
    def total_len(self) -> int:
        return self.past_len + self.horizon

    @classmethod
    def from_batch(cls, batch: WindowBatch, **kw) -> "ModelConfig":
        return cls(
            n_static=batch.static.shape[1],
            n_past=batch.past.shape[2],
            n_future=batch.future.shape[2],
            n_targets=batch.targets.shape[2],
            past_len=batch.past.shape[1],
            horizon=batch.future.shape[1],
            static_names=list(batch.static_names),
            past_names=list(batch.past_names),
            future_names=list(batch.future_names),
            target_names=list(batch.target_names),
            **kw,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# parameter construction


class _Init:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, np.ndarray] = {}

    def uniform(self, name, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        self.params[name] = self.rng.uniform(-bound, bound, size=shape)

    def const(self, name, shape, value):
        self.params[name] = np.full(shape, float(value))

    def linear(self, name, d_in, d_out, stack=None, bias=True):
        lead = () if stack is None else (stack,)
        self.uniform(f"{name}.W", lead + (d_in, d_out), d_in)
        if bias:
            self.uniform(f"{name}.b", lead + (d_out,), d_in)

    def grn(self, name, d_in, d_hidden, d_out, d_ctx=None, stack=None):
        lead = () if stack is None else (stack,)
        self.linear(f"{name}.fc1", d_in, d_hidden, stack)
        if d_ctx is not None:
            self.linear(f"{name}.ctx", d_ctx, d_hidden, stack, bias=False)
        self.linear(f"{name}.fc2", d_hidden, d_hidden, stack)
        self.linear(f"{name}.gate", d_hidden, d_out, stack)
        self.linear(f"{name}.value", d_hidden, d_out, stack)
        if d_in != d_out:
            self.linear(f"{name}.skip", d_in, d_out, stack)
        self.const(f"{name}.ln.gamma", lead + (d_out,), 1.0)
        self.const(f"{name}.ln.beta", lead + (d_out,), 0.0)

    def glu_norm(self, name, d):
        self.linear(f"{name}.gate", d, d)
        self.linear(f"{name}.value", d, d)
        self.const(f"{name}.ln.gamma", (d,), 1.0)
        self.const(f"{name}.ln.beta", (d,), 0.0)

    def vsn(self, name, n_features, d, with_context):
        self.grn(f"{name}.select", n_features * d, d, n_features, d_ctx=d if with_context else None)
        self.grn(f"{name}.feature", d, d, d, stack=n_features)


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.

    Insertion order of the returned dict is the canonical parameter order used
    by checkpoints.
    """
    D, H = config.d_model, config.n_heads
    it = _Init(np.random.default_rng(seed))
    for role, n in (("static", config.n_static), ("past", config.n_past), ("future", config.n_future)):
        it.uniform(f"embed.{role}.W", (n, D), 1)
        it.uniform(f"embed.{role}.b", (n, D), 1)
    it.vsn("vsn.static", config.n_static, D, with_context=False)
    for ctx in ("select", "enrich", "state_h", "state_c"):
        it.grn(f"static_ctx.{ctx}", D, D, D)
    it.vsn("vsn.past", config.n_past, D, with_context=True)
    it.vsn("vsn.future", config.n_future, D, with_context=True)
    for part in ("encoder", "decoder"):
        it.uniform(f"lstm.{part}.Wx", (D, 4 * D), D)
        it.uniform(f"lstm.{part}.Wh", (D, 4 * D), D)
        it.uniform(f"lstm.{part}.b", (4 * D,), D)
    it.glu_norm("post_lstm", D)
    it.grn("enrich", D, D, D, d_ctx=D)
    it.uniform("attn.WQ", (H, D, config.d_attn), D)
    it.uniform("attn.WK", (H, D, config.d_attn), D)
    it.uniform("attn.WV", (D, config.d_v), D)
    it.uniform("attn.WH", (config.d_v, D), config.d_v)
    it.glu_norm("post_attn", D)
    it.grn("positionwise", D, D, D)
    it.glu_norm("post_decoder", D)
    it.linear("head", D, config.n_targets)
    return it.params


def param_count(params: dict[str, np.ndarray]) -> int:
    return int(sum(p.size for p in params.values()))


# ---------------------------------------------------------------------------
# building blocks (operate on Tensors)


class _Ctx:
    """Per-call state: parameter tensors, train flag, dropout RNG."""

    def __init__(self, P: dict[str, Tensor], config: ModelConfig, train: bool, rng):
        self.P = P
        self.config = config
        self.train = train
        self.rng = rng

    def dropout(self, x: Tensor) -> Tensor:
        rate = self.config.dropout
        if not self.train or rate == 0.0:
            return x
        keep = (self.rng.random(x.shape) >= rate) / (1.0 - rate)
        return ad.mul(x, keep)


def _check(t: Tensor, layer: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite values produced by layer '{layer}'")
    return t


def _linear(x: Tensor, P, name: str) -> Tensor:
    y = ad.matmul(x, P[f"{name}.W"])
    b = P.get(f"{name}.b")
    return y if b is None else ad.add(y, b)


def _glu(x: Tensor, P, name: str) -> Tensor:
    return ad.mul(ad.sigmoid(_linear(x, P, f"{name}.gate")), _linear(x, P, f"{name}.value"))


def _layer_norm(x: Tensor, P, name: str) -> Tensor:
    return ad.layer_norm(x, P[f"{name}.gamma"], P[f"{name}.beta"])


def grn_forward(x: Tensor, ctx: _Ctx, name: str, context: Tensor | None = None) -> Tensor:
    """LayerNorm(skip(x) + GLU(fc2(dropout(ELU(fc1(x) + ctx(context))))))."""
    P = ctx.P
    W1 = P[f"{name}.fc1.W"]
    if x.shape[-1] != W1.shape[0]:
        raise ShapeError(f"{name}: input width {x.shape[-1]} != expected {W1.shape[0]}")
    h = _linear(x, P, f"{name}.fc1")
    if context is not None:
        if f"{name}.ctx.W" not in P:
            raise ShapeError(f"{name}: this GRN takes no context")
        c = ad.matmul(context, P[f"{name}.ctx.W"])
        while c.ndim < h.ndim:
            c = ad.expand_dims(c, 1)
        h = ad.add(h, c)
    h = ctx.dropout(ad.elu(h))
    h = _linear(h, P, f"{name}.fc2")
    gated = _glu(h, P, name)
    skip = _linear(x, P, f"{name}.skip") if f"{name}.skip.W" in P else x
    return _layer_norm(ad.add(skip, gated), P, f"{name}.ln")


def _stacked_linear(x: Tensor, P, name: str) -> Tensor:
    # x [F, N, d_in], W [F, d_in, d_out], b [F, d_out]
    return ad.add(ad.matmul(x, P[f"{name}.W"]), ad.expand_dims(P[f"{name}.b"], 1))


def _stacked_grn(x: Tensor, ctx: _Ctx, name: str) -> Tensor:
    """One independent GRN per feature, evaluated together. ``x`` is [F, N, D]."""
    P = ctx.P
    h = ctx.dropout(ad.elu(_stacked_linear(x, P, f"{name}.fc1")))
    h = _stacked_linear(h, P, f"{name}.fc2")
    gate = ad.sigmoid(_stacked_linear(h, P, f"{name}.gate"))
    gated = ad.mul(gate, _stacked_linear(h, P, f"{name}.value"))
    gamma = ad.expand_dims(P[f"{name}.ln.gamma"], 1)
    beta = ad.expand_dims(P[f"{name}.ln.beta"], 1)
    return ad.layer_norm(ad.add(x, gated), gamma, beta)


def vsn_forward(emb: Tensor, ctx: _Ctx, name: str, context: Tensor | None = None):
    """Variable selection over ``emb`` of shape [..., F, D].

    Returns ``(combined [..., D], weights [..., F])``.
    """
    if emb.ndim < 2 or emb.shape[-2] < 1:
        raise ShapeError(f"{name}: needs at least one feature")
    lead = emb.shape[:-2]
    F, D = emb.shape[-2], emb.shape[-1]
    flat = ad.reshape(emb, lead + (F * D,))
    weights = ad.softmax(grn_forward(flat, ctx, f"{name}.select", context), axis=-1)
    n = int(np.prod(lead)) if lead else 1
    by_feature = ad.transpose(ad.reshape(emb, (n, F, D)), (1, 0, 2))
    per_feature = _stacked_grn(by_feature, ctx, f"{name}.feature")
    per_feature = ad.reshape(ad.transpose(per_feature, (1, 0, 2)), lead + (F, D))
    combined = ad.tsum(ad.mul(ad.expand_dims(weights, -1), per_feature), axis=-2)
    return combined, weights


def causal_mask(n: int) -> np.ndarray:
    """Boolean [n, n]; True where attention is allowed (j <= i)."""
    return np.tril(np.ones((n, n), dtype=bool))


def interpretable_mha(q: Tensor, k: Tensor, v: Tensor, P, mask: np.ndarray, prefix: str = "attn"):
    """Multi-head attention whose heads share one value projection.

    q, k, v are [N, T, D].  Returns ``(output [N, T, D], attention [N, H, T, T])``.
    """
    mask = np.asarray(mask, dtype=bool)
    T = q.shape[-2]
    if mask.shape != (T, T):
        raise ShapeError(f"mask shape {mask.shape} != ({T}, {T})")
    if np.any(np.triu(mask, 1)):
        raise ValueError("attention mask must be causal (no access to later positions)")
    WQ, WK = P[f"{prefix}.WQ"], P[f"{prefix}.WK"]
    H, D, d_attn = WQ.shape
    N = q.shape[0]

    def project(x, W):
        # [N, T, D] @ [D, H*a] -> [N, H, T, a]
        flat = ad.reshape(ad.transpose(W, (1, 0, 2)), (D, H * d_attn))
        return ad.transpose(ad.reshape(ad.matmul(x, flat), (N, T, H, d_attn)), (0, 2, 1, 3))

    qh = project(q, WQ)
    kh = project(k, WK)
    logits = ad.mul(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(d_attn))
    if not np.all(np.diag(mask)):
        raise ValueError("attention mask must let every position see itself")
    # masked logits become exactly -inf; an additive -1e9 leaks once logits grow past 1e9
    logits = ad.add(ad.mul(logits, mask.astype(np.float64)), np.where(mask, 0.0, -np.inf))
    attn = ad.softmax(logits, axis=-1)
    values = ad.expand_dims(ad.matmul(v, P[f"{prefix}.WV"]), 1)  # [N, 1, T, d_v]
    heads = ad.tmean(ad.matmul(attn, values), axis=1)  # [N, T, d_v]
    return ad.matmul(heads, P[f"{prefix}.WH"]), attn


def _gate_add_norm(x: Tensor, skip: Tensor, P, name: str) -> Tensor:
    return _layer_norm(ad.add(skip, _glu(x, P, name)), P, f"{name}.ln")


def _embed(x: np.ndarray, P, role: str) -> Tensor:
    # x [..., F] -> [..., F, D]
    xt = Tensor(x[..., None])
    return ad.add(ad.mul(xt, P[f"embed.{role}.W"]), P[f"embed.{role}.b"])


def _lstm(x: Tensor, ctx: _Ctx, name: str, h: Tensor, c: Tensor):
    """Run an LSTM over ``x`` [N, T, D]; returns (outputs [N, T, D], h, c)."""
    P = ctx.P
    D = h.shape[-1]
    xw = ad.add(ad.matmul(x, P[f"{name}.Wx"]), P[f"{name}.b"])
    outs = []
    for t in range(x.shape[1]):
        z = ad.add(xw[:, t, :], ad.matmul(h, P[f"{name}.Wh"]))
        i = ad.sigmoid(z[:, :D])
        f = ad.sigmoid(z[:, D : 2 * D])
        g = ad.tanh(z[:, 2 * D : 3 * D])
        o = ad.sigmoid(z[:, 3 * D :])
        c = ad.add(ad.mul(f, c), ad.mul(i, g))
        h = ad.mul(o, ad.tanh(c))
        outs.append(h)
    return ad.stack(outs, axis=1), h, c


# ---------------------------------------------------------------------------
# full network


@dataclass
class ForwardOutput:
    predictions: np.ndarray  # [n, s_fut, F_tgt], scaled units
    attention: np.ndarray  # [H, n, d_s, d_s]
    vsn_weights: dict[str, np.ndarray]

    @property
    def attention_mean(self) -> np.ndarray:
        """Attention averaged over heads, [n, d_s, d_s]."""
        return self.attention.mean(axis=0)


def _check_batch(batch: WindowBatch, config: ModelConfig) -> None:
    expect = {
        "static": (batch.static, (config.n_static,), 1),
        "past": (batch.past, (config.past_len, config.n_past), 1),
        "future": (batch.future, (config.horizon, config.n_future), 1),
    }
    for name, (arr, shape, lead) in expect.items():
        if tuple(arr.shape[lead:]) != shape:
            raise ShapeError(f"batch {name} has shape {arr.shape[lead:]}, model expects {shape}")


def forward_graph(batch: WindowBatch, P: dict[str, Tensor], config: ModelConfig, train: bool = False, rng=None):
    """Forward pass returning tensors: (predictions, attention [N,H,T,T], vsn weights)."""
    _check_batch(batch, config)
    if train and config.dropout > 0 and rng is None:
        raise ValueError("train mode with dropout needs an explicit rng")
    ctx = _Ctx(P, config, train, rng)
    sp = config.past_len

    static_emb = _embed(batch.static, P, "static")
    static_vec, w_static = vsn_forward(static_emb, ctx, "vsn.static")
    _check(static_vec, "vsn.static")
    c_select = grn_forward(static_vec, ctx, "static_ctx.select")
    c_enrich = grn_forward(static_vec, ctx, "static_ctx.enrich")
    h0 = grn_forward(static_vec, ctx, "static_ctx.state_h")
    c0 = grn_forward(static_vec, ctx, "static_ctx.state_c")

    past_sel, w_past = vsn_forward(_embed(batch.past, P, "past"), ctx, "vsn.past", c_select)
    fut_sel, w_future = vsn_forward(_embed(batch.future, P, "future"), ctx, "vsn.future", c_select)
    _check(past_sel, "vsn.past")
    _check(fut_sel, "vsn.future")

    enc, h, c = _lstm(past_sel, ctx, "lstm.encoder", h0, c0)
    dec, _, _ = _lstm(fut_sel, ctx, "lstm.decoder", h, c)
    lstm_out = _check(ad.concat([enc, dec], axis=1), "lstm")
    selected = ad.concat([past_sel, fut_sel], axis=1)
    temporal = _gate_add_norm(lstm_out, selected, P, "post_lstm")

    enriched = _check(grn_forward(temporal, ctx, "enrich", c_enrich), "enrich")
    attn_out, attn = interpretable_mha(enriched, enriched, enriched, P, causal_mask(config.total_len))
    _check(attn_out, "attn")
    x = _gate_add_norm(attn_out, enriched, P, "post_attn")
    x = grn_forward(x, ctx, "positionwise")
    x = _gate_add_norm(x, temporal, P, "post_decoder")
    pred = _linear(x[:, sp:, :], P, "head")
    _check(pred, "head")
    return pred, attn, {"static": w_static, "past": w_past, "future": w_future}


def as_tensors(params: dict[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def forward(batch: WindowBatch, params: dict[str, np.ndarray], config: ModelConfig, mode: str = "eval", rng=None) -> ForwardOutput:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    with ad.no_grad():
        pred, attn, w = forward_graph(batch, as_tensors(params), config, mode == "train", rng)
    return ForwardOutput(
        predictions=pred.data,
        attention=np.transpose(attn.data, (1, 0, 2, 3)),
        vsn_weights={k: v.data for k, v in w.items()},
    )


def predict(batch: WindowBatch, params, config: ModelConfig, chunk: int = 512) -> ForwardOutput:
    """Eval-mode forward in chunks of windows; outputs concatenated."""
    outs = [forward(b, params, config) for b in batch.iter_batches(chunk)]
    if not outs:
        raise ValueError("empty batch")
    return ForwardOutput(
        predictions=np.concatenate([o.predictions for o in outs]),
        attention=np.concatenate([o.attention for o in outs], axis=1),
        vsn_weights={k: np.concatenate([o.vsn_weights[k] for o in outs]) for k in outs[0].vsn_weights},
    )


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (all integers little-endian):
#   8 bytes   magic b"STSENSCK"
#   4 bytes   uint32 format version
#   8 bytes   uint64 header length L
#   L bytes   UTF-8 JSON: {"config", "scaler", "params": [[name, shape], ...]}
#   ...       parameter arrays as float64 '<f8', C order, in header order
#   32 bytes  SHA-256 of everything above

MAGIC = b"STSENSCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: dict[str, np.ndarray], config: ModelConfig, scaler: ScalerState | None, path) -> Path:
    path = Path(path)
    header = {
        "config": config.to_dict(),
        "scaler": scaler.to_dict() if scaler is not None else None,
        "params": [[name, list(arr.shape)] for name, arr in params.items()],
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = bytearray(MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes)
    for arr in params.values():
        body += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    body += hashlib.sha256(body).digest()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(body))
    return path


def load_checkpoint(path):
    """Return ``(params, config, scaler)``; the stored config always wins."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: checkpoint not found")
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 12 + 32 or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic or too short)")
    body, digest = raw[:-32], raw[-32:]
    version, hlen = struct.unpack("<IQ", body[len(MAGIC) : len(MAGIC) + 12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    off = len(MAGIC) + 12
    header = json.loads(body[off : off + hlen].decode())
    off += hlen
    params = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape)) if shape else 1
        chunk = body[off : off + 8 * n]
        if len(chunk) != 8 * n:
            raise CheckpointError(f"{path}: parameter {name} truncated")
        params[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(body):
        raise CheckpointError(f"{path}: {len(body) - off} trailing bytes after parameters")
    config = ModelConfig.from_dict(header["config"])
    scaler = ScalerState.from_dict(header["scaler"]) if header["scaler"] else None
    return params, config, scaler
