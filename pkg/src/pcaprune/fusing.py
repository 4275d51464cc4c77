"""Merge binary masks and projections into a structurally smaller model.

Every fused weight is the masked product of projections and original
weights with its zero rows and columns dropped. The dropped indices come
straight from the binary masks, which is what makes query and key share
rows (both are gated by ``z_Q * z_K``) and keeps the count equal to the
expected-sparsity formula.

Post-LN layers carry a state ``s`` in the kept output coordinates of the
previous block; the real residual stream is ``x = A s + beta`` with
``A = P_out[:, keep]``. Pre-RMSNorm stacks carry ``h`` in the kept
coordinates of the group basis.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError
from .masks import MaskSet
from .model.config import ModelConfig
from .model.transformer import (
    NORM_EPS,
    TransformerModel,
    attention_bias,
    check_tokens,
    chunked,
    forward,
    pool_matrix,
)
from .numerics.autodiff import GELU_C
from .projection import ProjectedModel, ProjectionSet, n_groups
from .pruning import total_params

DIM_FIELDS = ("hidden_in", "in_M", "out_M", "in_F", "out_F", "heads", "qk", "vo", "d_f", "group")
COUNTED = ("W_Q", "W_K", "W_V", "W_O", "W_U", "W_D", "W_R")


def prune_zeros(a):
    """Drop exactly-zero rows and columns; returns ``(a', row_keep, col_keep)``."""
    a = np.asarray(a, dtype=np.float64)
    rows = np.flatnonzero(np.any(a != 0.0, axis=1))
    cols = np.flatnonzero(np.any(a != 0.0, axis=0))
    return a[np.ix_(rows, cols)], rows, cols


@dataclass
class FusedModel:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)
    dims: list = field(default_factory=list)  # one dict per layer, keys DIM_FIELDS
    groups: list | None = None

    def __getitem__(self, name):
        return self.tensors[name]

    def param_count(self) -> int:
        return sum(v.size for k, v in self.tensors.items() if k.split(".")[-1] in COUNTED)

    def residual_matrices(self) -> list[str]:
        return sorted(k for k in self.tensors if k.endswith("W_R"))


def _keep(m) -> np.ndarray:
    return np.flatnonzero(np.asarray(m).ravel() != 0.0)


def _on(m) -> bool:
    return float(np.asarray(m).reshape(-1)[0]) != 0.0


def _check_binary(masks: MaskSet, cfg):
    masks.check(cfg)
    if not masks.is_binary():
        raise ContractError("fuse needs binary masks; call binarize first")


def _fuse_heads(cfg, p, pr, masks, i, src, bias_src, dst):
    """Concatenated head weights. ``src`` maps the carried state into the
    head input space (d x n), ``dst`` maps the head output back (n' x d)."""
    qs, ks, vs, os_, bq, bk, bv = [], [], [], [], [], [], []
    qk_off, vo_off = [0], [0]
    heads = 0
    if _on(masks[f"mask.L{i}.z_MHA"]):
        for j in range(cfg.n_heads):
            h, mh = f"L{i}.h{j}", f"mask.L{i}.h{j}"
            if not _on(masks[f"{mh}.z_head"]):
                continue
            heads += 1
            qk = _keep(masks[f"{mh}.z_Q"] * masks[f"{mh}.z_K"])
            vo = _keep(masks[f"{mh}.z_V"] * masks[f"{mh}.z_O"])
            wq = pr[f"proj.{h}.Q"][qk] @ p[f"{h}.W_Q"]
            wk = pr[f"proj.{h}.K"][qk] @ p[f"{h}.W_K"]
            wv = pr[f"proj.{h}.V"][vo] @ p[f"{h}.W_V"]
            qs.append(wq @ src)
            ks.append(wk @ src)
            vs.append(wv @ src)
            if bias_src is not None:
                bq.append(wq @ bias_src)
                bk.append(wk @ bias_src)
                bv.append(wv @ bias_src)
            os_.append(dst @ p[f"{h}.W_O"].T @ pr[f"proj.{h}.O"][:, vo])
            qk_off.append(qk_off[-1] + qk.size)
            vo_off.append(vo_off[-1] + vo.size)
    n_in, n_out = src.shape[1], dst.shape[0]
    t = {
        "W_Q": np.vstack(qs) if qs else np.zeros((0, n_in)),
        "W_K": np.vstack(ks) if ks else np.zeros((0, n_in)),
        "W_V": np.vstack(vs) if vs else np.zeros((0, n_in)),
        "W_O": np.hstack(os_) if os_ else np.zeros((n_out, 0)),
        "qk_off": np.asarray(qk_off, dtype=float).reshape(-1, 1),
        "vo_off": np.asarray(vo_off, dtype=float).reshape(-1, 1),
    }
    if bias_src is not None:
        t["b_Q"] = np.vstack(bq) if bq else np.zeros((0, 1))
        t["b_K"] = np.vstack(bk) if bk else np.zeros((0, 1))
        t["b_V"] = np.vstack(bv) if bv else np.zeros((0, 1))
    return t, heads, qk_off[-1], vo_off[-1]


def _out_sel(keep_in, keep_out) -> np.ndarray:
    """For each kept output dim, its position among the kept input dims (-1: always zero)."""
    pos = {int(k): n for n, k in enumerate(keep_in)}
    return np.asarray([pos.get(int(k), -1) for k in keep_out], dtype=float).reshape(-1, 1)


def _fuse_postln(cfg, p, pr, masks):
    t, dims = {"emb.tok": p["emb.tok"].copy(), "emb.pos": p["emb.pos"].copy()}, []
    d = cfg.d
    a_prev, b_prev = np.eye(d), np.zeros((d, 1))
    for i in range(cfg.n_layers):
        m, L = f"mask.L{i}", f"L{i}"
        k_in_m, k_out_m = _keep(masks[f"{m}.z_in_M"]), _keep(masks[f"{m}.z_out_M"])
        k_in_f, k_out_f = _keep(masks[f"{m}.z_in_F"]), _keep(masks[f"{m}.z_out_F"])
        p_in_m = pr[f"proj.{L}.M.in"][k_in_m]
        heads, n_heads, qk, vo = _fuse_heads(cfg, p, pr, masks, i, a_prev, b_prev, p_in_m)
        for k, v in heads.items():
            t[f"{L}.{k}"] = v
        t[f"{L}.M.W_R"] = p_in_m @ a_prev
        t[f"{L}.M.b_R"] = p_in_m @ b_prev
        t[f"{L}.M.sel"] = _out_sel(k_in_m, k_out_m)
        a_m = pr[f"proj.{L}.M.out"][:, k_out_m]
        b_m = p[f"{L}.M.beta"]
        p_in_f = pr[f"proj.{L}.F.in"][k_in_f]
        kf = _keep(masks[f"{m}.z_f"]) if _on(masks[f"{m}.z_FFN"]) else np.zeros(0, dtype=int)
        if _on(masks[f"{m}.z_FFN"]):
            w_u = p[f"{L}.W_U"][kf]
            t[f"{L}.W_U"] = w_u @ a_m
            t[f"{L}.b_U"] = w_u @ b_m
            t[f"{L}.W_D"] = p_in_f @ p[f"{L}.W_D"][kf].T
        t[f"{L}.F.W_R"] = p_in_f @ a_m
        t[f"{L}.F.b_R"] = p_in_f @ b_m
        t[f"{L}.F.sel"] = _out_sel(k_in_f, k_out_f)
        dims.append(dict(hidden_in=a_prev.shape[1], in_M=k_in_m.size, out_M=k_out_m.size,
                         in_F=k_in_f.size, out_F=k_out_f.size, heads=n_heads, qk=qk, vo=vo,
                         d_f=kf.size, group=-1))
        a_prev = pr[f"proj.{L}.F.out"][:, k_out_f]
        b_prev = p[f"{L}.F.beta"]
    t["cls.W"] = a_prev.T @ p["cls.W"]
    t["cls.b"] = p["cls.W"].T @ b_prev
    return t, dims


def _fuse_rmsnorm(cfg, p, pr, masks, groups):
    t, dims = {}, []
    keep = {g: _keep(masks[f"mask.G{g}.z_hidden"]) for g in range(n_groups(groups))}
    basis = {g: pr[f"proj.G{g}.U"][:, keep[g]] for g in keep}
    g0 = groups[0] if groups else 0
    if groups:
        t["emb.tok"] = p["emb.tok"] @ basis[g0]
        t["emb.pos"] = p["emb.pos"] @ basis[g0]
    prev = g0
    for i in range(cfg.n_layers):
        m, L, g = f"mask.L{i}", f"L{i}", groups[i]
        u = basis[g]
        if g != prev:
            t[f"{L}.W_R"] = u.T @ basis[prev]
            prev = g
        src = p[f"{L}.M.gamma"] * u
        heads, n_heads, qk, vo = _fuse_heads(cfg, p, pr, masks, i, src, None, u.T)
        for k, v in heads.items():
            t[f"{L}.{k}"] = v
        kf = _keep(masks[f"{m}.z_f"]) if _on(masks[f"{m}.z_FFN"]) else np.zeros(0, dtype=int)
        if _on(masks[f"{m}.z_FFN"]):
            t[f"{L}.W_U"] = p[f"{L}.W_U"][kf] @ (p[f"{L}.F.gamma"] * u)
            t[f"{L}.W_D"] = u.T @ p[f"{L}.W_D"][kf].T
        n = keep[g].size
        dims.append(dict(hidden_in=n, in_M=n, out_M=n, in_F=n, out_F=n, heads=n_heads,
                         qk=qk, vo=vo, d_f=kf.size, group=g))
    if groups:
        last = basis[prev]
        t["cls.W"] = (p["final.gamma"] * last).T @ p["cls.W"]
    else:
        t["emb.tok"], t["emb.pos"] = p["emb.tok"].copy(), p["emb.pos"].copy()
        t["cls.W"] = (p["final.gamma"] * np.eye(cfg.d)).T @ p["cls.W"]
    t["cls.b"] = np.zeros((cfg.n_classes, 1))
    return t, dims


def fuse(projected: ProjectedModel | TransformerModel, masks: MaskSet,
         projections: ProjectionSet | None = None) -> FusedModel:
    """Fold binary ``masks`` and the injected projections into a :class:`FusedModel`."""
    if isinstance(projected, ProjectedModel):
        model, projections = projected.model, projected.projections
    else:
        model = projected
        if projections is None:
            raise ContractError("fuse needs projections (inject first)")
    cfg = model.config
    projections.check(cfg)
    if masks.groups != projections.groups:
        raise DimensionError("mask grouping does not match the projection grouping")
    _check_binary(masks, cfg)
    p, pr = model.params, projections.tensors
    if cfg.arch == "postln":
        tensors, dims = _fuse_postln(cfg, p, pr, masks)
    else:
        tensors, dims = _fuse_rmsnorm(cfg, p, pr, masks, projections.groups)
    return FusedModel(cfg, tensors, dims, None if projections.groups is None else list(projections.groups))


# inference -----------------------------------------------------------------------------

def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + 0.044715 * x ** 3)))


def _pure_norm(x, d):
    return x / np.sqrt(np.einsum("ij,ij->j", x, x)[None, :] / d + NORM_EPS)


def _softmax0(s):
    e = np.exp(s - s.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def _select(x, sel):
    sel = sel.ravel().astype(np.intp)
    out = np.zeros((sel.size, x.shape[1]))
    live = sel >= 0
    out[live] = x[sel[live]]
    return out


def _mha(fused, L, s, bias):
    t = fused.tensors
    qk_off = t[f"{L}.qk_off"].ravel().astype(np.intp)
    vo_off = t[f"{L}.vo_off"].ravel().astype(np.intp)
    q = t[f"{L}.W_Q"] @ s + t.get(f"{L}.b_Q", 0.0)
    k = t[f"{L}.W_K"] @ s + t.get(f"{L}.b_K", 0.0)
    v = t[f"{L}.W_V"] @ s + t.get(f"{L}.b_V", 0.0)
    scale = 1.0 / math.sqrt(fused.config.d_h)
    ctx = np.zeros_like(v)
    for a in range(len(qk_off) - 1):
        q0, q1, v0, v1 = qk_off[a], qk_off[a + 1], vo_off[a], vo_off[a + 1]
        scores = k[q0:q1].T @ q[q0:q1] * scale + bias
        ctx[v0:v1] = v[v0:v1] @ _softmax0(scores)
    return t[f"{L}.W_O"] @ ctx


def _check_width(fused, name, width, axis=1):
    if name in fused.tensors and fused.tensors[name].shape[axis] != width:
        raise DimensionError(f"{name} expects width {fused.tensors[name].shape[axis]}, state has {width}")


def fused_forward(fused: FusedModel, tokens) -> np.ndarray:
    """Logits (n_classes, batch) of the compressed model."""
    tokens = check_tokens(tokens, fused.config)
    return chunked(lambda tk, _: _fused_logits(fused, tk), tokens)


def _fused_logits(fused, tokens):
    cfg = fused.config
    t = fused.tensors
    b, n = tokens.shape
    bias = attention_bias(b, n, causal=cfg.arch == "rmsnorm")
    s = (t["emb.tok"][tokens.ravel()] + t["emb.pos"][np.tile(np.arange(n), b)]).T
    d = cfg.d
    for i in range(cfg.n_layers):
        L = f"L{i}"
        if cfg.arch == "postln":
            _check_width(fused, f"{L}.M.W_R", s.shape[0])
            w = t[f"{L}.M.W_R"] @ s + t[f"{L}.M.b_R"] + _mha(fused, L, s, bias)
            s = _select(_pure_norm(w, d), t[f"{L}.M.sel"])
            w = t[f"{L}.F.W_R"] @ s + t[f"{L}.F.b_R"]
            if f"{L}.W_U" in t:
                w = w + t[f"{L}.W_D"] @ _gelu(t[f"{L}.W_U"] @ s + t[f"{L}.b_U"])
            s = _select(_pure_norm(w, d), t[f"{L}.F.sel"])
        else:
            if f"{L}.W_R" in t:
                _check_width(fused, f"{L}.W_R", s.shape[0])
                s = t[f"{L}.W_R"] @ s
            _check_width(fused, f"{L}.W_Q", s.shape[0])
            s = s + _mha(fused, L, _pure_norm(s, d), bias)
            if f"{L}.W_U" in t:
                s = s + t[f"{L}.W_D"] @ _gelu(t[f"{L}.W_U"] @ _pure_norm(s, d))
    if cfg.arch == "rmsnorm":
        s = _pure_norm(s, d)
    _check_width(fused, "cls.W", s.shape[0], axis=0)
    return t["cls.W"].T @ (s @ pool_matrix(b, n)) + t["cls.b"]


# reporting -------------------------------------------------------------------------------

def param_count(fused: FusedModel) -> int:
    return fused.param_count()


def size_report(fused: FusedModel, model: TransformerModel | None = None, tokens=None,
                repeats: int = 5) -> dict:
    """Parameter counts per component and, given the dense model and a batch,
    the wall-clock speed ratio (dense time / fused time, best of ``repeats``)."""
    parts = {"attention": 0, "ffn": 0, "residual": 0}
    for k, v in fused.tensors.items():
        leaf = k.split(".")[-1]
        if leaf in ("W_Q", "W_K", "W_V", "W_O"):
            parts["attention"] += v.size
        elif leaf in ("W_U", "W_D"):
            parts["ffn"] += v.size
        elif leaf == "W_R":
            parts["residual"] += v.size
    total = sum(parts.values())
    dense = total_params(fused.config, fused.groups)
    out = {**parts, "total": total, "dense": dense,
           "ratio": total / dense if dense else 0.0,
           "residual_share": parts["residual"] / total if total else 0.0,
           "n_residual_matrices": len(fused.residual_matrices())}
    if model is not None and tokens is not None:
        tokens = check_tokens(tokens, model.config)
        out["dense_seconds"] = _best_time(lambda: forward(model, tokens), repeats)
        out["fused_seconds"] = _best_time(lambda: fused_forward(fused, tokens), repeats)
        out["speedup"] = out["dense_seconds"] / max(out["fused_seconds"], 1e-12)
    return out


def _best_time(fn, repeats):
    best = math.inf
    for _ in range(max(repeats, 1)):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def dims_table(fused: FusedModel) -> list[dict]:
    return [{"layer": i, **row} for i, row in enumerate(fused.dims)]
