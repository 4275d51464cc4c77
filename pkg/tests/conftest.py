import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pcaprune.calibration import collect
from pcaprune.model import MajorityTask, ModelConfig, init_model, train_toy
from pcaprune.numerics import make_rng
from pcaprune.projection import inject

settings.register_profile(
    "default", deadline=None, max_examples=25,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")

TOY = dict(n_layers=2, d=16, n_heads=4, d_f=32, vocab_size=8, max_seq_len=9)


def toy_config(arch="postln", **kw):
    return ModelConfig(arch=arch, **{**TOY, **kw})


def random_tokens(cfg, n, length=None, seed=0):
    length = cfg.max_seq_len if length is None else length
    return make_rng(seed).integers(0, cfg.vocab_size, size=(n, length))


def perturb(model, scale=0.3, seed=1):
    """Move gammas/betas off their init so the norm parameters matter in tests."""
    rng = make_rng(seed)
    m = model.copy()
    for k, v in m.params.items():
        if k.endswith("gamma"):
            m.params[k] = v + scale * rng.normal(size=v.shape)
        elif k.endswith("beta"):
            m.params[k] = v + scale * rng.normal(size=v.shape)
    return m


def _trained(arch, n_layers=2, steps=200):
    cfg = toy_config(arch, n_layers=n_layers)
    task = MajorityTask(cfg.vocab_size, cfg.max_seq_len, 0)
    x, y = task.sample(512, "train")
    model, _ = train_toy(init_model(cfg), x, y, steps=steps)
    return model, task


@pytest.fixture(scope="session")
def trained_postln():
    return _trained("postln")


@pytest.fixture(scope="session")
def trained_rmsnorm():
    return _trained("rmsnorm")


@pytest.fixture(scope="session")
def trained_rmsnorm4():
    return _trained("rmsnorm", n_layers=4, steps=120)


def projected_of(model, task, group_size=1, T=64, seed=0):
    calib = task.sample(64, "calib")[0]
    return inject(model, collect(model, calib, T, seed=seed), group_size)


@pytest.fixture(scope="session")
def projected_postln(trained_postln):
    return projected_of(*trained_postln)


@pytest.fixture(scope="session")
def projected_rmsnorm(trained_rmsnorm):
    return projected_of(*trained_rmsnorm)


def max_rel(a, b):
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))) / max(np.max(np.abs(b)), 1e-300))


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
