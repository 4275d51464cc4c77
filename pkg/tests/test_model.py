import math

import numpy as np
import pytest
from conftest import max_rel, perturb, random_tokens, toy_config

from pcaprune.errors import ConfigError, DimensionError, InputError, TrainingError
from pcaprune.masks import MaskSet
from pcaprune.model import (
    MajorityTask,
    ModelConfig,
    evaluate,
    forward,
    forward_masked,
    forward_projected,
    init_model,
    majority_label,
    train_toy,
)
from pcaprune.model.transformer import NORM_EPS
from pcaprune.numerics import make_rng
from pcaprune.projection import ProjectionSet, identity_projections, make_groups


# independent oracle: token-major, one sequence at a time, plain loops ----------------------

def _gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def _ln(x, g, b):  # x: tokens x d
    c = x - x.mean(axis=1, keepdims=True)
    return c / np.sqrt((c * c).mean(axis=1, keepdims=True) + NORM_EPS) * g.ravel() + b.ravel()


def _rms(x, g):
    return x / np.sqrt((x * x).mean(axis=1, keepdims=True) + NORM_EPS) * g.ravel()


def _attn(p, cfg, i, x, causal, z_head=None):
    n = x.shape[0]
    out = np.zeros_like(x)
    for j in range(cfg.n_heads):
        h = f"L{i}.h{j}"
        q, k, v = x @ p[f"{h}.W_Q"].T, x @ p[f"{h}.W_K"].T, x @ p[f"{h}.W_V"].T
        s = q @ k.T / math.sqrt(cfg.d_h)
        if causal:
            s = np.where(np.tril(np.ones((n, n))) > 0, s, -np.inf)
        a = np.exp(s - s.max(axis=1, keepdims=True))
        a /= a.sum(axis=1, keepdims=True)
        w = 1.0 if z_head is None else z_head[j]
        out += w * (a @ v) @ p[f"{h}.W_O"]
    return out


def oracle_forward(model, tokens):
    cfg, p = model.config, model.params
    logits = []
    for seq in np.atleast_2d(tokens):
        x = p["emb.tok"][seq] + p["emb.pos"][: len(seq)]
        for i in range(cfg.n_layers):
            if cfg.arch == "postln":
                x = _ln(x + _attn(p, cfg, i, x, False), p[f"L{i}.M.gamma"], p[f"L{i}.M.beta"])
                f = _gelu(x @ p[f"L{i}.W_U"].T) @ p[f"L{i}.W_D"]
                x = _ln(x + f, p[f"L{i}.F.gamma"], p[f"L{i}.F.beta"])
            else:
                x = x + _attn(p, cfg, i, _rms(x, p[f"L{i}.M.gamma"]), True)
                x = x + _gelu(_rms(x, p[f"L{i}.F.gamma"]) @ p[f"L{i}.W_U"].T) @ p[f"L{i}.W_D"]
        if cfg.arch == "rmsnorm":
            x = _rms(x, p["final.gamma"])
        logits.append(x.mean(axis=0) @ p["cls.W"])
    return np.array(logits).T


ARCHS = ["postln", "rmsnorm"]


@pytest.mark.parametrize("arch", ARCHS)
def test_forward_matches_oracle(arch):
    cfg = ModelConfig(arch, n_layers=2, d=8, n_heads=2, d_f=12, vocab_size=5, max_seq_len=6, seed=3)
    model = perturb(init_model(cfg))
    tokens = random_tokens(cfg, 4)
    np.testing.assert_allclose(forward(model, tokens), oracle_forward(model, tokens), rtol=0, atol=1e-12)


@pytest.mark.parametrize("arch", ARCHS)
def test_zero_layers_single_token(arch):
    cfg = ModelConfig(arch, n_layers=0, d=4, n_heads=2, d_f=4, vocab_size=3, max_seq_len=2)
    model = init_model(cfg)
    p = model.params
    x = p["emb.tok"][2] + p["emb.pos"][0]
    if arch == "rmsnorm":
        x = x / np.sqrt(np.mean(x * x) + NORM_EPS) * p["final.gamma"].ravel()
    np.testing.assert_allclose(forward(model, [[2]]).ravel(), x @ p["cls.W"], atol=1e-14)


def test_zero_weights_postln_is_norms_of_embeddings():
    cfg = toy_config("postln")
    model = perturb(init_model(cfg))
    for k in model.params:
        if k.split(".")[-1] in ("W_Q", "W_K", "W_V", "W_O", "W_U", "W_D"):
            model.params[k][:] = 0.0
    tokens = random_tokens(cfg, 3)
    p = model.params
    want = []
    for seq in tokens:
        x = p["emb.tok"][seq] + p["emb.pos"][: len(seq)]
        for i in range(cfg.n_layers):
            x = _ln(_ln(x, p[f"L{i}.M.gamma"], p[f"L{i}.M.beta"]), p[f"L{i}.F.gamma"], p[f"L{i}.F.beta"])
        want.append(x.mean(axis=0) @ p["cls.W"])
    np.testing.assert_allclose(forward(model, tokens), np.array(want).T, atol=1e-12)


def test_zero_blocks_rmsnorm_passthrough():
    cfg = toy_config("rmsnorm")
    model = init_model(cfg)
    for k in model.params:
        if k.endswith(("W_O", "W_D")):
            model.params[k][:] = 0.0
    tokens = random_tokens(cfg, 3)
    p = model.params
    want = [(_rms(p["emb.tok"][s] + p["emb.pos"][: len(s)], p["final.gamma"])).mean(axis=0) @ p["cls.W"]
            for s in tokens]
    np.testing.assert_allclose(forward(model, tokens), np.array(want).T, atol=1e-12)


def test_chunked_inference_matches_single_batches():
    cfg = toy_config("postln")
    model = init_model(cfg)
    tokens = random_tokens(cfg, 130)
    whole = forward(model, tokens)
    parts = np.hstack([forward(model, tokens[i: i + 1]) for i in range(0, 130, 13)])
    np.testing.assert_allclose(whole[:, ::13], parts, atol=1e-12)


def test_forward_shorter_sequences():
    cfg = toy_config("rmsnorm")
    model = init_model(cfg)
    tokens = random_tokens(cfg, 2, length=5)
    np.testing.assert_allclose(forward(model, tokens), oracle_forward(model, tokens), atol=1e-12)


@pytest.mark.parametrize("bad", [[[0, 9]], [[-1, 0]], [[0.5, 1]], np.zeros((1, 10), int), np.zeros((1, 0), int)])
def test_token_errors(bad):
    model = init_model(toy_config())
    with pytest.raises(InputError):
        forward(model, bad)


def test_config_errors():
    with pytest.raises(ConfigError):
        ModelConfig(d=10, n_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(arch="gpt")


# masked forward ---------------------------------------------------------------------------

@pytest.mark.parametrize("arch", ARCHS)
def test_masked_all_ones_equals_forward(arch):
    cfg = toy_config(arch)
    model = perturb(init_model(cfg))
    tokens = random_tokens(cfg, 5)
    out = forward_masked(model, MaskSet.ones(cfg), tokens)
    assert np.max(np.abs(out - forward(model, tokens))) <= 1e-12


def _zeroed(model, pred):
    m = model.copy()
    for k in m.params:
        if pred(k):
            m.params[k] = np.zeros_like(m.params[k])
    return m


@pytest.mark.parametrize("arch", ARCHS)
def test_mha_mask_off_equals_zero_attention(arch):
    cfg = toy_config(arch)
    model = perturb(init_model(cfg))
    masks = MaskSet.ones(cfg)
    for i in range(cfg.n_layers):
        masks[f"mask.L{i}.z_MHA"] = np.zeros((1, 1))
    tokens = random_tokens(cfg, 4)
    want = forward(_zeroed(model, lambda k: k.endswith("W_O")), tokens)
    np.testing.assert_allclose(forward_masked(model, masks, tokens), want, atol=1e-12)


@pytest.mark.parametrize("arch", ARCHS)
@pytest.mark.parametrize("layer,head", [(0, 0), (0, 3), (1, 2)])
def test_head_mask_equals_zeroed_w_o(arch, layer, head):
    cfg = toy_config(arch)
    model = perturb(init_model(cfg))
    masks = MaskSet.ones(cfg)
    masks[f"mask.L{layer}.h{head}.z_head"] = np.zeros((1, 1))
    tokens = random_tokens(cfg, 4)
    want = forward(_zeroed(model, lambda k: k == f"L{layer}.h{head}.W_O"), tokens)
    np.testing.assert_allclose(forward_masked(model, masks, tokens), want, atol=1e-12)


def test_ffn_filter_mask_equals_zeroed_rows():
    cfg = toy_config("postln")
    model = perturb(init_model(cfg))
    masks = MaskSet.ones(cfg)
    zf = np.ones((cfg.d_f, 1))
    zf[[1, 5, 30]] = 0.0
    masks["mask.L1.z_f"] = zf
    ref = model.copy()
    ref.params["L1.W_D"] = ref.params["L1.W_D"] * zf
    tokens = random_tokens(cfg, 3)
    np.testing.assert_allclose(forward_masked(model, masks, tokens), forward(ref, tokens), atol=1e-12)


def test_shared_masks_baseline():
    cfg = toy_config("postln")
    model = init_model(cfg)
    tokens = random_tokens(cfg, 3)
    ones = MaskSet.shared(cfg, np.ones(cfg.d), np.ones(cfg.d))
    np.testing.assert_allclose(forward_masked(model, ones, tokens), forward(model, tokens), atol=1e-12)
    z = np.ones(cfg.d)
    z[:4] = 0.0
    half = MaskSet.shared(cfg, z, z)
    assert all(np.array_equal(half[f"mask.L{i}.z_in_{b}"].ravel(), z) for i in range(2) for b in "MF")
    assert not np.allclose(forward_masked(model, half, tokens), forward(model, tokens))


def test_masked_rejects_grouped_and_bad_shapes():
    cfg = toy_config("rmsnorm")
    model = init_model(cfg)
    with pytest.raises(DimensionError):
        forward_masked(model, MaskSet.ones(cfg, groups=[0, 0]), random_tokens(cfg, 1))
    bad = MaskSet.ones(cfg)
    bad["mask.L0.z_f"] = np.ones((3, 1))
    with pytest.raises(DimensionError):
        forward_masked(model, bad, random_tokens(cfg, 1))


# projected forward with identity or orthogonal bases -----------------------------------------

@pytest.mark.parametrize("arch", ARCHS)
def test_identity_projections(arch):
    cfg = toy_config(arch)
    model = perturb(init_model(cfg))
    tokens = random_tokens(cfg, 6)
    out = forward_projected(model, identity_projections(model), None, tokens)
    assert max_rel(out, forward(model, tokens)) < 1e-9


@pytest.mark.parametrize("group_size", [1, 2])
def test_random_orthogonal_basis_inside_rmsnorm(group_size):
    cfg = toy_config("rmsnorm")
    model = perturb(init_model(cfg))
    proj = identity_projections(model, group_size)
    rng = make_rng(5)
    for k in proj.tensors:
        if k.endswith(".U"):
            proj.tensors[k] = np.linalg.qr(rng.normal(size=(cfg.d, cfg.d)))[0]
    tokens = random_tokens(cfg, 6)
    assert max_rel(forward_projected(model, proj, None, tokens), forward(model, tokens)) < 1e-9


def test_projected_checks_shapes():
    cfg = toy_config("postln")
    model = init_model(cfg)
    proj = identity_projections(model)
    proj.tensors["proj.L0.M.in"] = np.eye(3)
    with pytest.raises(DimensionError):
        forward_projected(model, proj, None, random_tokens(cfg, 1))
    rms = init_model(toy_config("rmsnorm"))
    with pytest.raises(ConfigError):
        forward_projected(rms, identity_projections(model), None, random_tokens(cfg, 1))
    broken = ProjectionSet("rmsnorm", identity_projections(rms).tensors, None)
    with pytest.raises(DimensionError):
        forward_projected(rms, broken, None, random_tokens(cfg, 1))


def test_projected_trace_matches_feature_capture():
    cfg = toy_config("postln")
    model = perturb(init_model(cfg))
    tokens = random_tokens(cfg, 3)
    t_plain, t_proj = {}, {}
    forward(model, tokens, trace=t_plain)
    forward_projected(model, identity_projections(model), None, tokens, trace=t_proj)
    for k in ("L0.M", "L0.F", "L1.M", "L1.F"):
        np.testing.assert_allclose(t_proj[k], t_plain[k], atol=1e-12)


def test_make_groups():
    assert make_groups(4, 2) == [0, 0, 1, 1]
    assert make_groups(5, 2) == [0, 0, 1, 1, 2]
    assert make_groups(3, 5) == [0, 0, 0]
    with pytest.raises(ConfigError):
        make_groups(3, 0)


# data and training --------------------------------------------------------------------------

def test_majority_task_labels_and_determinism():
    task = MajorityTask(8, 9, seed=4)
    x, y = task.sample(200)
    assert np.array_equal(y, majority_label(x, 8))
    x2, y2 = task.sample(200)
    assert np.array_equal(x, x2) and np.array_equal(y, y2)
    assert not np.array_equal(x, task.sample(200, "test")[0])
    assert 0.3 < y.mean() < 0.7
    with pytest.raises(ConfigError):
        MajorityTask(8, 8)


def test_train_zero_steps_unchanged():
    cfg = toy_config()
    model = init_model(cfg)
    x, y = MajorityTask(8, 9).sample(16)
    out, hist = train_toy(model, x, y, steps=0)
    assert hist == [] and all(np.array_equal(out.params[k], model.params[k]) for k in model.params)


def test_train_loss_decreases():
    cfg = toy_config()
    x, y = MajorityTask(8, 9).sample(128)
    _, hist = train_toy(init_model(cfg), x, y, steps=30, batch_size=128)
    assert hist[-1] < hist[0]


def test_train_diverged_raises():
    cfg = toy_config()
    model = init_model(cfg)
    model.params["cls.W"][0, 0] = np.nan
    x, y = MajorityTask(8, 9).sample(8)
    with pytest.raises(TrainingError):
        train_toy(model, x, y, steps=1)


@pytest.mark.parametrize("fixture", ["trained_postln", "trained_rmsnorm"])
def test_trained_toy_accuracy(fixture, request):
    model, task = request.getfixturevalue(fixture)
    x, y = task.sample(512, "test")
    assert evaluate(model, x, y) > 0.9
