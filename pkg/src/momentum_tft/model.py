"""Decoder-only Temporal Fusion Transformer and the LSTM momentum baseline.

Both networks map a (batch, T, F) feature window plus a sector index to
positions in (-1, 1) at every timestep.  Everything is causal: the output at
step t never reads inputs after t.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tc
from .market_data import SECTORS
from .tensor import Tensor

CHECKPOINT_VERSION = "momentum-tft/1"


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TFTConfig:
    window: int = 252
    n_heads: int = 4
    d_hidden: int = 32
    n_features: int = 8
    static_vocab_size: int = len(SECTORS)
    dropout_rate: float = 0.1
    use_cpd_features: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if self.n_features < 1:
            raise ValueError("n_features must be >= 1")
        if self.n_heads < 1 or self.d_hidden % self.n_heads:
            raise ValueError(f"d_hidden {self.d_hidden} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")


@dataclass
class ModelInput:
    u_r: np.ndarray  # (T, F) or (B, T, F)
    s_c: int | np.ndarray

    def __post_init__(self):
        self.u_r = np.asarray(self.u_r, dtype=np.float64)
        if not np.all(np.isfinite(self.u_r)):
            raise NumericError("model input contains non-finite values")


@dataclass
class PositionOutput:
    positions: Tensor  # (B, T)
    vsn_weights: np.ndarray | None = None  # (B, T, F)
    attention: np.ndarray | None = None  # (B, H, T_q, T)

    @property
    def x(self) -> np.ndarray:
        return self.positions.data


# parameter allocation

def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class _Allocator:
    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}

    def weight(self, name, shape, fan_in):
        self.params[name] = Tensor(_uniform(self.rng, shape, fan_in), requires_grad=True, name=name)

    def const(self, name, value):
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def linear(self, name, d_in, d_out, bias=True):
        self.weight(f"{name}.w", (d_in, d_out), d_in)
        if bias:
            self.weight(f"{name}.b", (d_out,), d_in)

    def glu(self, name, d_in, d_out):
        self.linear(f"{name}.value", d_in, d_out)
        self.linear(f"{name}.gate", d_in, d_out)

    def norm(self, name, d):
        self.const(f"{name}.gamma", np.ones(d))
        self.const(f"{name}.beta", np.zeros(d))

    def grn(self, name, d_in, d_hidden, d_out, d_context=None):
        if d_in != d_out:
            self.linear(f"{name}.skip", d_in, d_out)
        self.linear(f"{name}.fc1", d_in, d_hidden)
        if d_context is not None:
            self.linear(f"{name}.context", d_context, d_hidden, bias=False)
        self.linear(f"{name}.fc2", d_hidden, d_hidden)
        self.glu(f"{name}.glu", d_hidden, d_out)
        self.norm(f"{name}.norm", d_out)

    def gate_norm(self, name, d):
        self.glu(f"{name}.glu", d, d)
        self.norm(f"{name}.norm", d)

    def lstm(self, name, d_in, d):
        self.weight(f"{name}.w_ih", (d_in, 4 * d), d)
        self.weight(f"{name}.w_hh", (d, 4 * d), d)
        self.weight(f"{name}.b", (4 * d,), d)


def init_tft_params(cfg: TFTConfig, seed: int | None = None) -> dict[str, Tensor]:
    """Uniform(+-1/sqrt(fan_in)) initialization, layer-norm gains at 1."""
    d, f = cfg.d_hidden, cfg.n_features
    a = _Allocator(cfg.seed if seed is None else seed)
    a.weight("static.embedding", (cfg.static_vocab_size, d), 1)
    a.grn("static.ctx_select", d, d, d)
    a.grn("static.ctx_enrich", d, d, d)
    a.weight("vsn.embed.w", (f, d), 1)
    a.weight("vsn.embed.b", (f, d), 1)
    a.grn("vsn.select", f * d, d, f, d_context=d)
    for i in range(f):
        a.grn(f"vsn.feature{i}", d, d, d)
    a.lstm("lstm", d, d)
    a.gate_norm("post_lstm", d)
    a.grn("enrich", d, d, d, d_context=d)
    for p in ("q", "k", "v", "o"):
        a.linear(f"attn.{p}", d, d)
    a.gate_norm("post_attn", d)
    a.grn("decoder", d, d, d)
    a.gate_norm("final", d)
    a.linear("head", d, 1)
    return a.params


def init_lstm_params(cfg: TFTConfig, seed: int | None = None) -> dict[str, Tensor]:
    a = _Allocator(cfg.seed if seed is None else seed)
    a.lstm("lstm", cfg.n_features, cfg.d_hidden)
    a.linear("head", cfg.d_hidden, 1)
    return a.params


def expected_tft_param_count(cfg: TFTConfig) -> int:
    """Closed-form count of learnable scalars for :func:`init_tft_params`."""
    d, f, v = cfg.d_hidden, cfg.n_features, cfg.static_vocab_size
    lin = lambda i, o, bias=True: i * o + (o if bias else 0)
    glu = lambda i, o: 2 * lin(i, o)
    norm = lambda o: 2 * o

    def grn(i, h, o, ctx=0):
        return ((lin(i, o) if i != o else 0) + lin(i, h) + (ctx * h) + lin(h, h)
                + glu(h, o) + norm(o))

    gate_norm = glu(d, d) + norm(d)
    lstm = d * 4 * d + d * 4 * d + 4 * d
    total = v * d + 2 * grn(d, d, d)
    total += 2 * f * d + grn(f * d, d, f, ctx=d) + f * grn(d, d, d)
    total += lstm + gate_norm + grn(d, d, d, ctx=d) + 4 * lin(d, d) + gate_norm
    total += grn(d, d, d) + gate_norm + lin(d, 1)
    return total


def param_count(params: dict[str, Tensor]) -> int:
    return sum(p.size for p in params.values())


# blocks

def _linear(x, params, name, bias=True):
    out = tc.matmul(x, params[f"{name}.w"])
    if bias:
        out = tc.add(out, params[f"{name}.b"])
    return out


def _check(t: Tensor, block: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values after block {block!r}")
    return t


def _affine_norm(x, params, name):
    return tc.add(tc.mul(tc.layer_norm(x), params[f"{name}.gamma"]), params[f"{name}.beta"])


def glu(x, params, name, dropout_rate=0.0, rng=None, train=False):
    """(W1 a + b1) * sigmoid(W2 a + b2)."""
    x = tc.dropout(x, dropout_rate, rng, train)
    return tc.mul(_linear(x, params, f"{name}.value"), tc.sigmoid(_linear(x, params, f"{name}.gate")))


def glu_addnorm(x, residual, params, name, dropout_rate=0.0, rng=None, train=False):
    """layer_norm(residual + GLU(x)), with affine gain/shift."""
    x, residual = tc.as_tensor(x), tc.as_tensor(residual)
    if x.shape[-1] != params[f"{name}.glu.value.w"].shape[0] or residual.shape[-1] != params[f"{name}.norm.gamma"].shape[0]:
        raise tc.DimensionError("glu_addnorm", x.shape, residual.shape)
    gated = glu(x, params, f"{name}.glu", dropout_rate, rng, train)
    return _affine_norm(tc.add(residual, gated), params, f"{name}.norm")


def grn(x, params, name, context=None, dropout_rate=0.0, rng=None, train=False):
    """Gated residual network.

    eta1 = ELU(W_a x + W_c c + b_a); eta2 = W_b eta1 + b_b;
    out = layer_norm(skip(x) + GLU(eta2)).  ``context`` broadcasts over
    every axis between the batch axis and the feature axis.
    """
    x = tc.as_tensor(x)
    w1 = params[f"{name}.fc1.w"]
    if x.shape[-1] != w1.shape[0]:
        raise tc.DimensionError("grn", x.shape, w1.shape)
    skip = _linear(x, params, f"{name}.skip") if f"{name}.skip.w" in params else x
    hidden = _linear(x, params, f"{name}.fc1")
    if context is not None and f"{name}.context.w" in params:
        c = tc.matmul(tc.as_tensor(context), params[f"{name}.context.w"])
        if x.ndim > c.ndim:
            c = tc.reshape(c, c.shape[:1] + (1,) * (x.ndim - c.ndim) + c.shape[1:])
        hidden = tc.add(hidden, c)
    eta1 = tc.elu(hidden)
    eta2 = _linear(eta1, params, f"{name}.fc2")
    gated = glu(eta2, params, f"{name}.glu", dropout_rate, rng, train)
    return _affine_norm(tc.add(skip, gated), params, f"{name}.norm")


def variable_selection(u, params, n_features, context=None, dropout_rate=0.0, rng=None, train=False):
    """Softmax-weighted mix of per-feature GRN outputs.

    ``u`` is (B, T, F) raw scalars.  Returns ((B, T, d) mix, (B, T, F) weights).
    """
    u = tc.as_tensor(u)
    if u.shape[-1] != n_features:
        raise tc.DimensionError("variable_selection", u.shape, (n_features,))
    w_emb, b_emb = params["vsn.embed.w"], params["vsn.embed.b"]
    # (B, T, F, 1) * (F, d) + (F, d)
    emb = tc.add(tc.mul(tc.reshape(u, u.shape + (1,)), w_emb), b_emb)
    flat = tc.reshape(emb, u.shape[:-1] + (n_features * w_emb.shape[1],))
    logits = grn(flat, params, "vsn.select", context, dropout_rate, rng, train)
    weights = tc.softmax(logits)
    per_feature = tc.unstack(emb, axis=-2)
    processed = tc.stack([grn(per_feature[i], params, f"vsn.feature{i}", None, dropout_rate, rng, train)
                          for i in range(n_features)], axis=-2)
    mixed = tc.sum_(tc.mul(processed, tc.reshape(weights, weights.shape + (1,))), axis=-2)
    return mixed, weights


def lstm(x, params, name="lstm"):
    """Single-layer LSTM from zero state.  ``x`` is (B, T, d_in); gate order i, f, g, o."""
    x = tc.as_tensor(x)
    w_ih, w_hh, b = params[f"{name}.w_ih"], params[f"{name}.w_hh"], params[f"{name}.b"]
    if x.shape[-1] != w_ih.shape[0]:
        raise tc.DimensionError("lstm", x.shape, w_ih.shape)
    d = w_hh.shape[0]
    batch, steps = x.shape[0], x.shape[1]
    proj = tc.add(tc.matmul(x, w_ih), b)
    inputs = tc.unstack(proj, axis=1)
    h = Tensor(np.zeros((batch, d)))
    c = Tensor(np.zeros((batch, d)))
    outs = []
    for t in range(steps):
        gates = tc.add(inputs[t], tc.matmul(h, w_hh))
        gi, gf, gg, go = tc.split(gates, 4, axis=-1)
        c = tc.add(tc.mul(tc.sigmoid(gf), c), tc.mul(tc.sigmoid(gi), tc.tanh(gg)))
        h = tc.mul(tc.sigmoid(go), tc.tanh(c))
        outs.append(h)
    return tc.stack(outs, axis=1)


def causal_attention(x, params, n_heads, name="attn", last_only=False):
    """Masked multi-head self-attention over (B, T, d).

    Returns (output, attention weights).  With ``last_only`` only the final
    position is used as a query, giving a (B, 1, d) output.
    """
    x = tc.as_tensor(x)
    batch, steps, d = x.shape
    if d % n_heads:
        raise tc.DimensionError("causal_attention", x.shape, (n_heads,))
    dh = d // n_heads

    def heads(t, length):
        return tc.transpose(tc.reshape(t, (batch, length, n_heads, dh)), (0, 2, 1, 3))

    q_in = tc.slice_(x, (slice(None), slice(steps - 1, steps))) if last_only else x
    n_q = q_in.shape[1]
    q = heads(_linear(q_in, params, f"{name}.q"), n_q)
    k = heads(_linear(x, params, f"{name}.k"), steps)
    v = heads(_linear(x, params, f"{name}.v"), steps)
    scores = tc.mul(tc.matmul(q, tc.swap_last(k)), 1.0 / math.sqrt(dh))
    q_pos = np.arange(steps - n_q, steps)[:, None]
    future = np.arange(steps)[None, :] > q_pos
    weights = tc.softmax(tc.where_mask(scores, future, -np.inf))
    ctx = tc.matmul(weights, v)
    merged = tc.reshape(tc.transpose(ctx, (0, 2, 1, 3)), (batch, n_q, d))
    return _linear(merged, params, f"{name}.o"), weights.data


def _as_batch(inp: ModelInput, cfg: TFTConfig):
    u = inp.u_r
    if u.ndim == 2:
        u = u[None]
    s = np.atleast_1d(np.asarray(inp.s_c, dtype=np.int64))
    if u.ndim != 3 or u.shape[-1] != cfg.n_features:
        raise tc.DimensionError("model_input", u.shape, (cfg.n_features,))
    if s.shape[0] == 1 and u.shape[0] > 1:
        s = np.repeat(s, u.shape[0])
    if s.shape[0] != u.shape[0] or s.min() < 0 or s.max() >= cfg.static_vocab_size:
        raise ValueError("sector index out of range or misaligned with batch")
    return u, s


def tft_select(u: np.ndarray, s: np.ndarray, params: dict[str, Tensor], cfg: TFTConfig, **kw):
    """Static contexts and per-timestep variable selection.

    Everything here acts on each timestep independently, so the selected
    sequence for a date does not depend on which window it sits in.
    Returns ``(selected, vsn_weights, enrichment_context)``.
    """
    p = params
    static = tc.embedding(p["static.embedding"], s)
    ctx_select = grn(static, p, "static.ctx_select", **kw)
    ctx_enrich = grn(static, p, "static.ctx_enrich", **kw)
    selected, vsn_w = variable_selection(Tensor(u), p, cfg.n_features, ctx_select, **kw)
    return _check(selected, "variable_selection"), vsn_w, ctx_enrich


def tft_temporal(selected: Tensor, ctx_enrich: Tensor, params: dict[str, Tensor], cfg: TFTConfig,
                 last_only: bool = False, **kw):
    """LSTM, enrichment, causal attention and the output head.  Returns (positions, attention)."""
    p = params
    encoded = _check(lstm(selected, p), "lstm")
    temporal = _check(glu_addnorm(encoded, selected, p, "post_lstm", **kw), "post_lstm")
    enriched = _check(grn(temporal, p, "enrich", context=ctx_enrich, **kw), "enrich")
    attended, attn = causal_attention(enriched, p, cfg.n_heads, last_only=last_only)
    _check(attended, "attention")
    if last_only:
        steps = enriched.shape[1]
        tail = (slice(None), slice(steps - 1, steps))
        enriched = tc.slice_(enriched, tail)
        temporal = tc.slice_(temporal, tail)
    # post-attention residual: the enriched (pre-attention) sequence
    gated = glu_addnorm(attended, enriched, p, "post_attn", **kw)
    decoded = _check(grn(gated, p, "decoder", **kw), "decoder")
    # final skip reaches back to the gated LSTM output
    final = glu_addnorm(decoded, temporal, p, "final", **kw)
    out = tc.tanh(_linear(final, p, "head"))
    return _check(tc.reshape(out, out.shape[:-1]), "head"), attn


def tft_forward(inp: ModelInput, params: dict[str, Tensor], cfg: TFTConfig, train_mode: bool = False,
                rng: np.random.Generator | None = None, last_only: bool = False) -> PositionOutput:
    u, s = _as_batch(inp, cfg)
    if train_mode and rng is None:
        rng = np.random.default_rng(cfg.seed)
    kw = dict(dropout_rate=cfg.dropout_rate, rng=rng, train=train_mode)
    selected, vsn_w, ctx_enrich = tft_select(u, s, params, cfg, **kw)
    out, attn = tft_temporal(selected, ctx_enrich, params, cfg, last_only=last_only, **kw)
    return PositionOutput(out, vsn_w.data, attn)


def lstm_dmn_forward(inp: ModelInput, params: dict[str, Tensor], cfg: TFTConfig, train_mode: bool = False,
                     rng: np.random.Generator | None = None, last_only: bool = False) -> PositionOutput:
    u, _ = _as_batch(inp, cfg)
    if train_mode and rng is None:
        rng = np.random.default_rng(cfg.seed)
    hidden = _check(lstm(Tensor(u), params), "lstm")
    if last_only:
        steps = hidden.shape[1]
        hidden = tc.slice_(hidden, (slice(None), slice(steps - 1, steps)))
    hidden = tc.dropout(hidden, cfg.dropout_rate, rng, train_mode)
    out = tc.tanh(_linear(hidden, params, "head"))
    return PositionOutput(_check(tc.reshape(out, out.shape[:-1]), "head"))


# checkpoints

def save_checkpoint(path, params: dict[str, Tensor], cfg: TFTConfig, model_kind: str,
                    extra: dict | None = None) -> None:
    meta = {"version": CHECKPOINT_VERSION, "model_kind": model_kind, "config": asdict(cfg),
            "shapes": {k: list(v.shape) for k, v in params.items()}, "extra": extra or {}}
    arrays = {f"param::{k}": v.data for k, v in params.items()}
    with Path(path).open("wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path, cfg: TFTConfig | None = None):
    """Returns (params, config, model_kind, extra); validates shapes against ``cfg``."""
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
        stored = TFTConfig(**meta["config"])
        params = {k.split("::", 1)[1]: Tensor(z[k], requires_grad=True, name=k.split("::", 1)[1])
                  for k in z.files if k.startswith("param::")}
    cfg = cfg or stored
    ref = init_tft_params(cfg) if meta["model_kind"] != "lstm_cpd" else init_lstm_params(cfg)
    if set(ref) != set(params) or any(ref[k].shape != params[k].shape for k in ref):
        raise ValueError(f"{path}: parameter shapes do not match config {cfg}")
    return params, cfg, meta["model_kind"], meta.get("extra", {})
