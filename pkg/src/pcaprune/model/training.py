from __future__ import annotations

import logging

import numpy as np

from ..errors import TrainingError
from ..numerics import Tape, grad, make_rng
from ..numerics import autodiff as ad
from .transformer import TransformerModel, check_tokens, forward, forward_params

log = logging.getLogger(__name__)


class Adam:
    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m, self.v, self.t = {}, {}, {}

    def step(self, params: dict, grads: dict, lr=None):
        lr = self.lr if lr is None else lr
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
                self.t[k] = 0
            self.t[k] += 1
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mh = self.m[k] / (1 - self.b1 ** self.t[k])
            vh = self.v[k] / (1 - self.b2 ** self.t[k])
            params[k] = params[k] - lr * mh / (np.sqrt(vh) + self.eps)


def batches(n, batch_size, rng):
    while True:
        order = rng.permutation(n)
        for s in range(0, n - batch_size + 1, batch_size):
            yield order[s: s + batch_size]


def accuracy(logits, labels) -> float:
    return float(np.mean(np.argmax(logits, axis=0) == np.asarray(labels)))


def train_toy(model: TransformerModel, tokens, labels, steps=200, batch_size=32,
              lr=3e-3, seed=0) -> tuple[TransformerModel, list]:
    """Fit all weights on a classification task with Adam; returns (model, loss history)."""
    cfg = model.config
    tokens = check_tokens(tokens, cfg)
    labels = np.asarray(labels)
    model = model.copy()
    if steps <= 0:
        return model, []
    opt = Adam(lr)
    rng = make_rng(seed)
    it = batches(len(tokens), min(batch_size, len(tokens)), rng)
    history = []
    names = sorted(model.params)
    for _ in range(steps):
        idx = next(it)
        tape = Tape()
        p = {k: tape.var(model.params[k]) for k in names}
        loss = ad.cross_entropy(forward_params(cfg, p, tokens[idx]), labels[idx])
        val = float(loss.value.squeeze())
        if not np.isfinite(val):
            raise TrainingError(f"training diverged: loss {val}")
        history.append(val)
        gs = grad(loss, [p[k] for k in names])
        opt.step(model.params, dict(zip(names, gs)))
    log.info("train_toy: loss %.4f -> %.4f", history[0], history[-1])
    return model, history


def evaluate(model: TransformerModel, tokens, labels) -> float:
    return accuracy(forward(model, tokens), labels)
