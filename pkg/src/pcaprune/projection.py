"""PCA projection matrices and their injection into a model.

Post-LN blocks get ``P_in = U^T R`` and ``P_out = diag(gamma) U`` where ``U``
holds the principal directions of the (per-token centred) pre-norm
features. Attention heads get a joint query/key factorisation and an
orthogonal value/output pair. Pre-RMSNorm stacks share one basis per
group of consecutive layers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .calibration import CalibrationFeatures
from .errors import ConfigError, ContractError, DimensionError
from .model.transformer import TransformerModel
from .numerics import centering_matrix, pinv_diag, svd_full


@dataclass
class ProjectionSet:
    arch: str
    tensors: dict = field(default_factory=dict)
    groups: list | None = None  # layer -> group id (pre-RMSNorm only)

    def expected_shapes(self, cfg) -> dict:
        d, dh = cfg.d, cfg.d_h
        shapes = {}
        if cfg.arch == "postln":
            for i in range(cfg.n_layers):
                for b in ("M", "F"):
                    shapes[f"proj.L{i}.{b}.in"] = (d, d)
                    shapes[f"proj.L{i}.{b}.out"] = (d, d)
        else:
            for g in range(n_groups(self.groups)):
                shapes[f"proj.G{g}.U"] = (d, d)
        for i in range(cfg.n_layers):
            for j in range(cfg.n_heads):
                for w in ("Q", "K", "V", "O"):
                    shapes[f"proj.L{i}.h{j}.{w}"] = (dh, dh)
        return shapes

    def check(self, cfg):
        if self.arch != cfg.arch:
            raise ConfigError(f"projection set is for {self.arch}, model is {cfg.arch}")
        if cfg.arch == "rmsnorm":
            if self.groups is None or len(self.groups) != cfg.n_layers:
                raise DimensionError("pre-RMSNorm projections need one group id per layer")
        shapes = self.expected_shapes(cfg)
        for name, shape in shapes.items():
            if name not in self.tensors:
                raise DimensionError(f"missing projection {name}")
            if self.tensors[name].shape != shape:
                raise DimensionError(
                    f"projection {name} has shape {self.tensors[name].shape}, expected {shape}")
        return self

    def __getitem__(self, name):
        return self.tensors[name]

    def copy(self):
        return ProjectionSet(self.arch, {k: v.copy() for k, v in self.tensors.items()},
                             None if self.groups is None else list(self.groups))


@dataclass
class ProjectedModel:
    model: TransformerModel
    projections: ProjectionSet

    @property
    def config(self):
        return self.model.config


def n_groups(groups) -> int:
    return 0 if not groups else max(groups) + 1


def make_groups(n_layers: int, group_size: int) -> list[int]:
    """Consecutive layers in groups of ``group_size``; the last group may be shorter."""
    if group_size < 1:
        raise ConfigError("group size must be >= 1")
    return [i // group_size for i in range(n_layers)]


# individual projections ------------------------------------------------------------

def hidden_projection(x, gamma):
    """``(P_in, P_out) = (U^T R, diag(gamma) U)`` from the SVD of the centred features."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    gamma = np.asarray(gamma, dtype=np.float64).reshape(-1)
    if gamma.size != d:
        raise DimensionError(f"gamma has {gamma.size} entries, features have {d} rows")
    r = centering_matrix(d)
    u = svd_full(r @ x).U
    return u.T @ r, gamma[:, None] * u


def qk_projection(x_q, x_k):
    """Joint factorisation ``(U_Q, U_K)`` of the query/key score product.

    With SVDs ``X_Q = U1 S1 V1^T``, ``X_K = U2 S2 V2^T`` and
    ``Z = S1 U1^T U2 S2 = Uz Sz Vz^T``::

        U_Q = Sz^1/2 Uz^T S1^-1 U1^T,   U_K = Sz^1/2 Vz^T S2^-1 U2^T

    so that ``U_Q[:k]^T U_K[:k]`` is the best rank-k replacement of the
    identity in ``X_Q^T M X_K``. Reciprocals of negligible singular values
    are taken as zero.
    """
    x_q = np.asarray(x_q, dtype=np.float64)
    x_k = np.asarray(x_k, dtype=np.float64)
    if x_q.size == 0 or x_k.size == 0:
        raise DimensionError("qk_projection needs non-empty features")
    if x_q.shape[0] != x_k.shape[0]:
        raise DimensionError(f"query/key feature rows differ: {x_q.shape} vs {x_k.shape}")
    dh = x_q.shape[0]
    u1, s1, _ = svd_full(x_q)
    u2, s2, _ = svd_full(x_k)
    s1 = np.concatenate([s1, np.zeros(dh - len(s1))])
    s2 = np.concatenate([s2, np.zeros(dh - len(s2))])
    z = (s1[:, None] * (u1.T @ u2)) * s2[None, :]
    uz, sz, vzt = svd_full(z)
    root = np.sqrt(sz)[:, None]
    u_q = root * (uz.T * pinv_diag(s1)[None, :]) @ u1.T
    u_k = root * (vzt * pinv_diag(s2)[None, :]) @ u2.T
    return u_q, u_k


def qk_core(x_q, x_k) -> np.ndarray:
    """The matrix ``Z`` whose singular values govern the rank-k score error."""
    dh = x_q.shape[0]
    u1, s1, _ = svd_full(x_q)
    u2, s2, _ = svd_full(x_k)
    s1 = np.concatenate([s1, np.zeros(dh - len(s1))])
    s2 = np.concatenate([s2, np.zeros(dh - len(s2))])
    return (s1[:, None] * (u1.T @ u2)) * s2[None, :]


def score_error(x_q, x_k, m) -> float:
    """Frobenius error of replacing the identity by ``m`` in ``X_Q^T M X_K``."""
    return float(np.linalg.norm(x_q.T @ x_k - x_q.T @ m @ x_k))


def v_projection(x_v):
    """``(P_V, P_O) = (U_V^T, U_V)`` with ``U_V`` the left singular vectors of ``W_V X``."""
    x_v = np.asarray(x_v, dtype=np.float64)
    if x_v.size == 0:
        raise DimensionError("v_projection needs non-empty features")
    u = svd_full(x_v).U
    return u.T, u


# whole-model injection -----------------------------------------------------------

def _head_projections(cfg, features, tensors):
    for i in range(cfg.n_layers):
        for j in range(cfg.n_heads):
            u_q, u_k = qk_projection(features.head(i, j, "Q"), features.head(i, j, "K"))
            p_v, p_o = v_projection(features.head(i, j, "V"))
            h = f"proj.L{i}.h{j}"
            tensors[f"{h}.Q"], tensors[f"{h}.K"] = u_q, u_k
            tensors[f"{h}.V"], tensors[f"{h}.O"] = p_v, p_o


def _check_features(cfg, features: CalibrationFeatures):
    if features.arch != cfg.arch:
        raise ConfigError(f"features were collected on a {features.arch} model, not {cfg.arch}")
    for i in range(cfg.n_layers):
        for b in ("M", "F"):
            x = features.mats.get(f"L{i}.{b}")
            if x is None or x.shape[0] != cfg.d:
                raise ConfigError(f"features for layer {i} block {b} missing or mis-shaped")
        for j in range(cfg.n_heads):
            for w in "QKV":
                x = features.mats.get(f"L{i}.h{j}.{w}")
                if x is None or x.shape[0] != cfg.d_h:
                    raise ConfigError(f"head features L{i}.h{j}.{w} missing or mis-shaped")


def group_pca(model: TransformerModel, features: CalibrationFeatures, group_size: int) -> ProjectionSet:
    """One shared basis per group of consecutive pre-RMSNorm layers, fitted on
    the column-wise concatenation of every residual-stream feature in the group."""
    cfg = model.config
    if cfg.arch != "rmsnorm":
        raise ContractError("group PCA needs a pre-RMSNorm model")
    _check_features(cfg, features)
    groups = make_groups(cfg.n_layers, group_size)
    tensors = {}
    for g in range(n_groups(groups)):
        cols = [features.stream(i, b) for i in range(cfg.n_layers) if groups[i] == g for b in ("M", "F")]
        tensors[f"proj.G{g}.U"] = svd_full(np.concatenate(cols, axis=1)).U
    _head_projections(cfg, features, tensors)
    return ProjectionSet(cfg.arch, tensors, groups)


def build_projections(model: TransformerModel, features: CalibrationFeatures,
                      group_size: int = 1) -> ProjectionSet:
    cfg = model.config
    if cfg.arch == "rmsnorm":
        return group_pca(model, features, group_size)
    _check_features(cfg, features)
    tensors = {}
    for i in range(cfg.n_layers):
        for b in ("M", "F"):
            p_in, p_out = hidden_projection(features.stream(i, b), model.params[f"L{i}.{b}.gamma"])
            tensors[f"proj.L{i}.{b}.in"] = p_in
            tensors[f"proj.L{i}.{b}.out"] = p_out
    _head_projections(cfg, features, tensors)
    return ProjectionSet(cfg.arch, tensors, None)


def inject(model: TransformerModel, features: CalibrationFeatures, group_size: int = 1) -> ProjectedModel:
    """Fit every projection from ``features`` and pair it with the model."""
    return ProjectedModel(model, build_projections(model, features, group_size))


def identity_projections(model: TransformerModel, group_size: int = 1) -> ProjectionSet:
    """Projections with ``U = I``: the projected forward then reduces to the plain one."""
    cfg = model.config
    d, dh = cfg.d, cfg.d_h
    tensors = {}
    groups = None
    if cfg.arch == "postln":
        r = centering_matrix(d)
        for i in range(cfg.n_layers):
            for b in ("M", "F"):
                tensors[f"proj.L{i}.{b}.in"] = r.copy()
                tensors[f"proj.L{i}.{b}.out"] = np.diag(model.params[f"L{i}.{b}.gamma"].ravel())
    else:
        groups = make_groups(cfg.n_layers, group_size)
        for g in range(n_groups(groups)):
            tensors[f"proj.G{g}.U"] = np.eye(d)
    for i in range(cfg.n_layers):
        for j in range(cfg.n_heads):
            for w in "QKVO":
                tensors[f"proj.L{i}.h{j}.{w}"] = np.eye(dh)
    return ProjectionSet(cfg.arch, tensors, groups)


def max_relative_deviation(a, b) -> float:
    """``max|a - b| / max|b|`` (denominator floored at 1e-300)."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(b))), 1e-300))


def complexity_estimate(n_layers: int, d: int, T: int) -> float:
    """Leading-order flop count of fitting the hidden projections, ``n d^2 T``."""
    return float(n_layers) * d * d * T

