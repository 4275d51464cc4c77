import numpy as np
import pytest
from conftest import max_rel, projected_of, toy_config
from hypothesis import given
from hypothesis import strategies as st

from pcaprune.calibration import collect
from pcaprune.errors import ConfigError, ContractError, DimensionError
from pcaprune.fusing import fuse
from pcaprune.masks import MaskSet
from pcaprune.model import forward, forward_projected, init_model
from pcaprune.model.transformer import NORM_EPS
from pcaprune.numerics import centering_matrix, make_rng, svd_full
from pcaprune.projection import (
    group_pca,
    hidden_projection,
    inject,
    qk_core,
    qk_projection,
    score_error,
    v_projection,
)


def _pure_norm(x):
    d = x.shape[0]
    return x / np.sqrt((x * x).sum(axis=0) / d + NORM_EPS)


def _layer_norm(x, g, b):
    c = x - x.mean(axis=0)
    return g * _pure_norm(c) + b


# hidden -------------------------------------------------------------------------------------

def test_hidden_two_by_two():
    x = np.array([[1.0, -1.0], [0.0, 0.0]])
    p_in, p_out = hidden_projection(x, np.ones(2))
    # per-token centring turns both columns into multiples of (1, -1)
    first = p_out[:, 0]
    np.testing.assert_allclose(np.abs(first), [2 ** -0.5, 2 ** -0.5], atol=1e-12)
    assert first[0] * first[1] < 0
    np.testing.assert_allclose(p_out @ _pure_norm(p_in @ x), _layer_norm(x, 1.0, 0.0), atol=1e-12)


def test_hidden_kills_constants():
    x = make_rng(0).normal(size=(5, 12))
    p_in, _ = hidden_projection(x, np.ones(5))
    np.testing.assert_allclose(p_in @ np.ones(5), 0.0, atol=1e-14)


def test_hidden_centred_orthonormal_rows():
    q = np.linalg.qr(make_rng(1).normal(size=(8, 4)))[0].T  # 4 x 8 orthonormal rows
    x = centering_matrix(4) @ q
    p_in, p_out = hidden_projection(x, np.ones(4))
    scores = p_in @ x
    # principal scores: mutually orthogonal rows whose squared norms are the energies
    s = svd_full(x).S
    np.testing.assert_allclose(scores @ scores.T, np.diag(s ** 2), atol=1e-12)
    np.testing.assert_allclose(p_out @ scores, x, atol=1e-9)


@given(d=st.integers(2, 10), T=st.integers(1, 30), seed=st.integers(0, 10_000))
def test_hidden_reproduces_layer_norm(d, T, seed):
    rng = make_rng(seed)
    x = rng.normal(size=(d, T)) * rng.uniform(0.1, 5)
    g, b = rng.normal(size=(d, 1)), rng.normal(size=(d, 1))
    p_in, p_out = hidden_projection(x, g)
    np.testing.assert_allclose(p_out @ _pure_norm(p_in @ x) + b, _layer_norm(x, g, b), atol=1e-9)
    # U is orthogonal, so the identity holds for fresh inputs too
    y = rng.normal(size=(d, 3))
    np.testing.assert_allclose(p_out @ _pure_norm(p_in @ y) + b, _layer_norm(y, g, b), atol=1e-9)


def test_hidden_gamma_size_check():
    with pytest.raises(DimensionError):
        hidden_projection(np.ones((3, 4)), np.ones(2))


# query/key ------------------------------------------------------------------------------------

def test_qk_identity_features():
    u_q, u_k = qk_projection(np.eye(4), np.eye(4))
    np.testing.assert_allclose(u_q.T @ u_k, np.eye(4), atol=1e-9)


def test_qk_full_rank_is_exact():
    rng = make_rng(2)
    xq, xk = rng.normal(size=(4, 16)), rng.normal(size=(4, 16))
    u_q, u_k = qk_projection(xq, xk)
    assert score_error(xq, xk, u_q.T @ u_k) < 1e-8


def truncation_errors(xq, xk):
    u_q, u_k = qk_projection(xq, xk)
    sz = svd_full(qk_core(xq, xk)).S
    out = []
    for k in range(xq.shape[0] + 1):
        m = u_q[:k].T @ u_k[:k]
        out.append((k, m, score_error(xq, xk, m), float(np.sqrt(np.sum(sz[k:] ** 2)))))
    return out


@given(dh=st.sampled_from([2, 4, 8]), T=st.integers(2, 40), rank=st.integers(1, 8),
       seed=st.integers(0, 10_000))
def test_qk_truncation_law(dh, T, rank, seed):
    rng = make_rng(seed)
    r = min(rank, dh)
    xq = rng.normal(size=(dh, r)) @ rng.normal(size=(r, T))  # possibly rank-deficient
    xk = rng.normal(size=(dh, T))
    scale = np.linalg.norm(xq.T @ xk)
    for k, _, measured, predicted in truncation_errors(xq, xk):
        assert abs(measured - predicted) <= 1e-8 * max(1.0, scale), (k, measured, predicted)


@pytest.mark.parametrize("dh", [2, 4, 8])
def test_qk_beats_random_rank_k(dh):
    rng = make_rng(dh)
    xq, xk = rng.normal(size=(dh, 24)), rng.normal(size=(dh, 24))
    target = xq.T @ xk
    for k, _, err, _ in truncation_errors(xq, xk):
        if k == 0:
            continue
        for _ in range(50):
            m = rng.normal(size=(dh, k)) @ rng.normal(size=(k, dh))
            approx = xq.T @ m @ xk
            alpha = np.sum(approx * target) / np.sum(approx * approx)  # best scale
            assert err <= score_error(xq, xk, alpha * m) + 1e-10


def test_qk_shape_errors():
    with pytest.raises(DimensionError):
        qk_projection(np.ones((2, 3)), np.ones((3, 3)))


# value/output ---------------------------------------------------------------------------------

def test_v_orthogonal_and_transposed():
    x = make_rng(3).normal(size=(4, 20))
    p_v, p_o = v_projection(x)
    np.testing.assert_allclose(p_o.T @ p_o, np.eye(4), atol=1e-10)
    np.testing.assert_array_equal(p_o, p_v.T)


def test_v_orthonormal_rows_exact():
    q = np.linalg.qr(make_rng(4).normal(size=(10, 3)))[0].T
    p_v, p_o = v_projection(q)
    np.testing.assert_allclose(p_o @ p_v @ q, q, atol=1e-12)


def test_v_rank_one_truncation():
    rng = make_rng(5)
    x = rng.normal(size=(4, 1)) @ rng.normal(size=(1, 12))
    p_v, p_o = v_projection(x)
    assert np.linalg.norm(p_o[:, :1] @ p_v[:1] @ x - x) < 1e-9


# injection -------------------------------------------------------------------------------------

@pytest.mark.parametrize("fixture", ["trained_postln", "trained_rmsnorm"])
def test_inject_is_exact(fixture, request):
    model, task = request.getfixturevalue(fixture)
    pm = projected_of(model, task)
    x = task.sample(64, "test")[0]
    assert max_rel(forward_projected(model, pm.projections, None, x), forward(model, x)) < 1e-6
    ones = MaskSet.ones(model.config, pm.projections.groups)
    assert max_rel(forward_projected(model, pm.projections, ones, x), forward(model, x)) < 1e-6


def test_full_rank_scores_match(trained_postln):
    model, task = trained_postln
    pm = projected_of(model, task)
    x = task.sample(1, "test")[0]
    trace = {}
    forward(model, x, trace=trace)
    for j in range(model.config.n_heads):
        p = f"L0.h{j}"
        q, k = trace[f"{p}.Q"], trace[f"{p}.K"]
        qp, kp = pm.projections[f"proj.{p}.Q"] @ q, pm.projections[f"proj.{p}.K"] @ k
        assert max_rel(kp.T @ qp, k.T @ q) < 1e-6


def test_inject_arch_mismatch(trained_postln, trained_rmsnorm):
    model, task = trained_postln
    feats = collect(trained_rmsnorm[0], task.sample(16, "calib")[0], 64)
    with pytest.raises(ConfigError):
        inject(model, feats)


# group PCA -----------------------------------------------------------------------------------

def test_group_pca_needs_rmsnorm(trained_postln):
    model, task = trained_postln
    feats = collect(model, task.sample(16, "calib")[0], 64)
    with pytest.raises(ContractError):
        group_pca(model, feats, 1)


def test_group_of_one_is_per_layer_basis(trained_rmsnorm):
    model, task = trained_rmsnorm
    feats = collect(model, task.sample(64, "calib")[0], 64)
    proj = group_pca(model, feats, 1)
    assert proj.groups == [0, 1]
    for i in range(model.config.n_layers):
        ref = svd_full(np.hstack([feats.stream(i, "M"), feats.stream(i, "F")])).U
        u = proj[f"proj.G{i}.U"]
        # same basis up to column signs
        np.testing.assert_allclose(np.abs(u.T @ ref), np.eye(model.config.d), atol=1e-9)


@pytest.mark.parametrize("g,n_bases", [(1, 4), (2, 2), (3, 2), (4, 1)])
def test_group_sizes_exact(trained_rmsnorm4, g, n_bases):
    model, task = trained_rmsnorm4
    pm = projected_of(model, task, group_size=g)
    assert sum(k.endswith(".U") for k in pm.projections.tensors) == n_bases
    x = task.sample(64, "test")[0]
    assert max_rel(forward_projected(model, pm.projections, None, x), forward(model, x)) < 1e-6
    fused = fuse(pm, MaskSet.ones(model.config, pm.projections.groups))
    assert len(fused.residual_matrices()) == n_bases - 1


def test_random_config_exactness():
    for arch in ("postln", "rmsnorm"):
        for seed in range(3):
            cfg = toy_config(arch, seed=seed, n_layers=3)
            model = init_model(cfg)
            x = make_rng(seed).integers(0, 8, size=(32, 9))
            pm = inject(model, collect(model, x, 64, seed=seed), group_size=2)
            assert max_rel(forward_projected(model, pm.projections, None, x), forward(model, x)) < 1e-6
