"""Toy transformer stacks and their plain, masked and projected forward passes.

Activations are laid out feature-major: a batch of ``B`` sequences of
length ``N`` is one ``d x (B*N)`` matrix whose columns are tokens. Attention
is computed on the whole batch at once with an additive bias that blocks
cross-sequence (and, for the pre-norm stack, future) positions.

All forward functions read weights from a name -> array mapping whose
values may be ``autodiff.Var`` handles, so the same code serves inference
and training. A mask name that is absent from the mapping acts as 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError, InputError
from ..masks import MaskSet
from ..numerics import autodiff as ad
from ..numerics import make_rng
from .config import ModelConfig

NORM_EPS = 1e-9
BLOCKED = -1e9


@dataclass
class TransformerModel:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    def copy(self):
        return TransformerModel(self.config, {k: v.copy() for k, v in self.params.items()})


def param_shapes(cfg: ModelConfig) -> dict:
    d, dh = cfg.d, cfg.d_h
    shapes = {
        "emb.tok": (cfg.vocab_size, d),
        "emb.pos": (cfg.max_seq_len, d),
    }
    for i in range(cfg.n_layers):
        for j in range(cfg.n_heads):
            for w in ("W_Q", "W_K", "W_V", "W_O"):
                shapes[f"L{i}.h{j}.{w}"] = (dh, d)
        shapes[f"L{i}.W_U"] = (cfg.d_f, d)
        shapes[f"L{i}.W_D"] = (cfg.d_f, d)
        for b in ("M", "F"):
            shapes[f"L{i}.{b}.gamma"] = (d, 1)
            if cfg.arch == "postln":
                shapes[f"L{i}.{b}.beta"] = (d, 1)
    if cfg.arch == "rmsnorm":
        shapes["final.gamma"] = (d, 1)
    shapes["cls.W"] = (d, cfg.n_classes)
    return shapes


def init_model(cfg: ModelConfig) -> TransformerModel:
    rng = make_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("gamma"):
            params[name] = np.ones(shape)
        elif name.endswith("beta"):
            params[name] = np.zeros(shape)
        elif name.startswith("emb."):
            params[name] = rng.normal(0.0, 1.0, size=shape)
        else:
            params[name] = rng.normal(0.0, 1.0 / math.sqrt(cfg.d), size=shape)
    return TransformerModel(cfg, params)


def check_tokens(tokens, cfg: ModelConfig) -> np.ndarray:
    t = np.asarray(tokens)
    if t.ndim == 1:
        t = t[None, :]
    if t.ndim != 2 or t.shape[1] < 1:
        raise InputError(f"tokens must be a (batch, length) array, got shape {t.shape}")
    if not np.issubdtype(t.dtype, np.integer):
        if not np.all(t == np.round(t)):
            raise InputError("tokens must be integers")
        t = t.astype(np.int64)
    if t.shape[1] > cfg.max_seq_len:
        raise InputError(f"sequence length {t.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    if t.size and (t.min() < 0 or t.max() >= cfg.vocab_size):
        raise InputError(f"token id out of range [0, {cfg.vocab_size})")
    return t


def attention_bias(batch: int, length: int, causal: bool) -> np.ndarray:
    """Additive score bias, rows = keys, columns = queries."""
    seq = np.repeat(np.arange(batch), length)
    pos = np.tile(np.arange(length), batch)
    allowed = seq[:, None] == seq[None, :]
    if causal:
        allowed &= pos[:, None] <= pos[None, :]
    return np.where(allowed, 0.0, BLOCKED)


def pool_matrix(batch: int, length: int) -> np.ndarray:
    return np.kron(np.eye(batch), np.full((length, 1), 1.0 / length))


def embed(p, tokens: np.ndarray):
    b, n = tokens.shape
    tok = ad.take_rows(p["emb.tok"], tokens.ravel())
    pos = ad.take_rows(p["emb.pos"], np.tile(np.arange(n), b))
    return ad.transpose(ad.add(tok, pos))


def attend(q, k, v, bias, d_h: int):
    scores = ad.add(ad.mul(ad.matmul(ad.transpose(k), q), 1.0 / math.sqrt(d_h)), bias)
    return ad.matmul(v, ad.softmax(scores, axis=0))


def classify(p, x, batch: int, length: int):
    pooled = ad.matmul(x, pool_matrix(batch, length))
    return ad.matmul(ad.transpose(p["cls.W"]), pooled)


def _z(p, name):
    return p.get(name, 1.0)


# plain forward ----------------------------------------------------------------------

def _mha(cfg, p, i, x, bias, masked=False):
    out = 0.0
    for j in range(cfg.n_heads):
        h = f"L{i}.h{j}"
        q = ad.matmul(p[f"{h}.W_Q"], x)
        k = ad.matmul(p[f"{h}.W_K"], x)
        v = ad.matmul(p[f"{h}.W_V"], x)
        att = ad.matmul(ad.transpose(p[f"{h}.W_O"]), attend(q, k, v, bias, cfg.d_h))
        if masked:
            att = ad.mul(_z(p, f"mask.{h}.z_head"), att)
        out = ad.add(out, att)
    return out


def _ffn(p, i, x, zf=1.0):
    hidden = ad.mul(zf, ad.gelu(ad.matmul(p[f"L{i}.W_U"], x)))
    return ad.matmul(ad.transpose(p[f"L{i}.W_D"]), hidden)


def forward_params(cfg: ModelConfig, p, tokens, trace=None):
    """Plain forward. ``trace``, if a dict, receives pre-norm features per layer."""
    b, n = tokens.shape
    bias = attention_bias(b, n, causal=cfg.arch == "rmsnorm")
    x = embed(p, tokens)
    for i in range(cfg.n_layers):
        if cfg.arch == "postln":
            heads_in = x
            v = ad.add(x, _mha(cfg, p, i, x, bias))
            x_m = ad.layer_norm(v, p[f"L{i}.M.gamma"], p[f"L{i}.M.beta"], NORM_EPS)
            u = ad.add(x_m, _ffn(p, i, x_m))
            x_new = ad.layer_norm(u, p[f"L{i}.F.gamma"], p[f"L{i}.F.beta"], NORM_EPS)
        else:
            v = x
            heads_in = ad.rms_norm(x, p[f"L{i}.M.gamma"], NORM_EPS)
            x_mid = ad.add(x, _mha(cfg, p, i, heads_in, bias))
            u = x_mid
            x_new = ad.add(x_mid, _ffn(p, i, ad.rms_norm(x_mid, p[f"L{i}.F.gamma"], NORM_EPS)))
        if trace is not None:
            _record_trace(cfg, p, trace, i, ad.value(v), ad.value(u), ad.value(heads_in))
        x = x_new
    if cfg.arch == "rmsnorm":
        x = ad.rms_norm(x, p["final.gamma"], NORM_EPS)
    return classify(p, x, b, n)


def _record_trace(cfg, p, trace, i, x_m, x_f, heads_in):
    trace[f"L{i}.M"] = x_m
    trace[f"L{i}.F"] = x_f
    for j in range(cfg.n_heads):
        h = f"L{i}.h{j}"
        for w in ("Q", "K", "V"):
            trace[f"{h}.{w}"] = ad.value(p[f"{h}.W_{w}"]) @ heads_in


INFER_CHUNK = 64


def chunked(fn, tokens, trace=None, size=INFER_CHUNK):
    """Apply ``fn(tokens, trace)`` in sequence chunks and concatenate along the
    batch axis. Sequences never interact, so this only bounds memory."""
    if len(tokens) <= size:
        return fn(tokens, trace)
    outs, parts = [], {}
    for s in range(0, len(tokens), size):
        tr = {} if trace is not None else None
        outs.append(fn(tokens[s: s + size], tr))
        for k, v in (tr or {}).items():
            parts.setdefault(k, []).append(v)
    if trace is not None:
        trace.update({k: np.concatenate(v, axis=1) for k, v in parts.items()})
    return np.concatenate(outs, axis=1)


def forward(model: TransformerModel, tokens, trace=None) -> np.ndarray:
    """Logits of shape (n_classes, batch)."""
    t = check_tokens(tokens, model.config)
    return chunked(lambda tk, tr: forward_params(model.config, model.params, tk, tr), t, trace)


# masked forward (per-block masks in the original coordinates) ------------------------

def masked_params(cfg, p, tokens):
    b, n = tokens.shape
    bias = attention_bias(b, n, causal=cfg.arch == "rmsnorm")
    x = embed(p, tokens)
    for i in range(cfg.n_layers):
        m = f"mask.L{i}"
        if cfg.arch == "postln":
            a = ad.mul(_z(p, f"{m}.z_MHA"), _mha(cfg, p, i, x, bias, masked=True))
            v = ad.mul(_z(p, f"{m}.z_in_M"), ad.add(x, a))
            x_m = ad.mul(_z(p, f"{m}.z_out_M"),
                         ad.layer_norm(v, p[f"L{i}.M.gamma"], p[f"L{i}.M.beta"], NORM_EPS))
            f = ad.mul(_z(p, f"{m}.z_FFN"), _ffn(p, i, x_m, _z(p, f"{m}.z_f")))
            u = ad.mul(_z(p, f"{m}.z_in_F"), ad.add(x_m, f))
            x = ad.mul(_z(p, f"{m}.z_out_F"),
                       ad.layer_norm(u, p[f"L{i}.F.gamma"], p[f"L{i}.F.beta"], NORM_EPS))
        else:
            n_in = ad.mul(_z(p, f"{m}.z_out_M"),
                          ad.rms_norm(ad.mul(_z(p, f"{m}.z_in_M"), x), p[f"L{i}.M.gamma"], NORM_EPS))
            x = ad.add(x, ad.mul(_z(p, f"{m}.z_MHA"), _mha(cfg, p, i, n_in, bias, masked=True)))
            n_in = ad.mul(_z(p, f"{m}.z_out_F"),
                          ad.rms_norm(ad.mul(_z(p, f"{m}.z_in_F"), x), p[f"L{i}.F.gamma"], NORM_EPS))
            x = ad.add(x, ad.mul(_z(p, f"{m}.z_FFN"), _ffn(p, i, n_in, _z(p, f"{m}.z_f"))))
    if cfg.arch == "rmsnorm":
        x = ad.rms_norm(x, p["final.gamma"], NORM_EPS)
    return classify(p, x, b, n)


def forward_masked(model: TransformerModel, masks: MaskSet, tokens) -> np.ndarray:
    """Mask-based pruning forward without projections (block, head, FFN-filter
    and per-block hidden masks in the model's own coordinates)."""
    cfg = model.config
    if masks.groups is not None:
        raise DimensionError("forward_masked takes per-block (ungrouped) masks")
    masks.check(cfg)
    t = check_tokens(tokens, cfg)
    p = {**model.params, **masks.values}
    return chunked(lambda tk, _: masked_params(cfg, p, tk), t)


# projected forward -----------------------------------------------------------------

def _projected_head(cfg, p, i, j, x, bias):
    h = f"L{i}.h{j}"
    m = f"mask.{h}"
    zqk = ad.mul(_z(p, f"{m}.z_Q"), _z(p, f"{m}.z_K"))
    zvo = ad.mul(_z(p, f"{m}.z_V"), _z(p, f"{m}.z_O"))
    q = ad.mul(zqk, ad.matmul(p[f"proj.{h}.Q"], ad.matmul(p[f"{h}.W_Q"], x)))
    k = ad.matmul(p[f"proj.{h}.K"], ad.matmul(p[f"{h}.W_K"], x))
    v = ad.mul(zvo, ad.matmul(p[f"proj.{h}.V"], ad.matmul(p[f"{h}.W_V"], x)))
    ctx = attend(q, k, v, bias, cfg.d_h)
    out = ad.matmul(ad.transpose(p[f"{h}.W_O"]), ad.matmul(p[f"proj.{h}.O"], ctx))
    return ad.mul(_z(p, f"{m}.z_head"), out)


def _projected_mha(cfg, p, i, x, bias):
    out = 0.0
    for j in range(cfg.n_heads):
        out = ad.add(out, _projected_head(cfg, p, i, j, x, bias))
    return ad.mul(_z(p, f"mask.L{i}.z_MHA"), out)


def _projected_block(p, blk, m, b, v, d):
    """``P_out z_out norm(z_in P_in v) + beta`` for one post-LN block."""
    inner = ad.mul(_z(p, f"{m}.z_in_{b}"), ad.matmul(p[f"proj.{blk}.in"], v))
    normed = ad.mul(_z(p, f"{m}.z_out_{b}"), ad.pure_norm(inner, d, NORM_EPS))
    return ad.add(ad.matmul(p[f"proj.{blk}.out"], normed), p[f"{blk}.beta"])


def projected_params(cfg, p, tokens, groups=None, trace=None):
    b, n = tokens.shape
    bias = attention_bias(b, n, causal=cfg.arch == "rmsnorm")
    x = embed(p, tokens)
    d = cfg.d
    if cfg.arch == "postln":
        for i in range(cfg.n_layers):
            m = f"mask.L{i}"
            v = ad.add(x, _projected_mha(cfg, p, i, x, bias))
            if trace is not None:
                trace[f"L{i}.M"] = ad.value(v)
            x_m = _projected_block(p, f"L{i}.M", m, "M", v, d)
            f = ad.mul(_z(p, f"{m}.z_FFN"), _ffn(p, i, x_m, _z(p, f"{m}.z_f")))
            u = ad.add(x_m, f)
            if trace is not None:
                trace[f"L{i}.F"] = ad.value(u)
            x = _projected_block(p, f"L{i}.F", m, "F", u, d)
        return classify(p, x, b, n)

    # pre-RMSNorm: the residual stream is carried as h = z_g * U_g^T x
    if groups is None:
        groups = list(range(cfg.n_layers))
    if not groups:
        return classify(p, ad.rms_norm(x, p["final.gamma"], NORM_EPS), b, n)
    g0 = groups[0] if groups else 0
    basis = p[f"proj.G{g0}.U"]
    h = ad.mul(_z(p, f"mask.G{g0}.z_hidden"), ad.matmul(ad.transpose(basis), x))
    prev = g0
    for i in range(cfg.n_layers):
        g = groups[i]
        zg = _z(p, f"mask.G{g}.z_hidden")
        if g != prev:
            h = ad.mul(zg, ad.matmul(ad.transpose(p[f"proj.G{g}.U"]), ad.matmul(basis, h)))
            basis = p[f"proj.G{g}.U"]
            prev = g
        m = f"mask.L{i}"
        if trace is not None:
            trace[f"L{i}.M"] = ad.value(h)
        a_in = ad.mul(p[f"L{i}.M.gamma"], ad.matmul(basis, ad.pure_norm(h, d, NORM_EPS)))
        a = _projected_mha(cfg, p, i, a_in, bias)
        h = ad.add(h, ad.mul(zg, ad.matmul(ad.transpose(basis), a)))
        if trace is not None:
            trace[f"L{i}.F"] = ad.value(h)
        f_in = ad.mul(p[f"L{i}.F.gamma"], ad.matmul(basis, ad.pure_norm(h, d, NORM_EPS)))
        f = ad.mul(_z(p, f"{m}.z_FFN"), _ffn(p, i, f_in, _z(p, f"{m}.z_f")))
        h = ad.add(h, ad.mul(zg, ad.matmul(ad.transpose(basis), f)))
    x = ad.mul(p["final.gamma"], ad.matmul(basis, ad.pure_norm(h, d, NORM_EPS)))
    return classify(p, x, b, n)


def forward_projected(model: TransformerModel, projections, masks: MaskSet | None, tokens,
                      trace=None) -> np.ndarray:
    """Forward with projection matrices inserted around every norm and inside
    every attention head. ``masks=None`` means all-ones masks."""
    cfg = model.config
    projections.check(cfg)
    p = {**model.params, **projections.tensors}
    if masks is not None:
        if masks.groups != projections.groups:
            raise DimensionError("mask grouping does not match the projection grouping")
        masks.check(cfg)
        p.update(masks.values)
    t = check_tokens(tokens, cfg)
    return chunked(lambda tk, tr: projected_params(cfg, p, tk, projections.groups, tr), t, trace)
