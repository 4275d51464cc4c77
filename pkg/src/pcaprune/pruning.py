"""Expected-sparsity accounting, the Lagrangian pruning loss and mask training.

Retained-parameter counting follows the fused structure exactly, so for
binary masks ``M * (1 - s_hat)`` is the parameter count of the fused model:

* query/key rows survive where ``z_Q * z_K`` is 1 (the query is gated by
  both), value/output rows where ``z_V * z_O`` is 1;
* residual matrices are dense ``|z_in| x |z_out(prev)|`` blocks.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, TrainingError
from .masks import DIM, HEAD, LAYER, LEVELS, MaskSet, mask_layout
from .model.training import Adam, accuracy, batches
from .model.transformer import check_tokens, projected_params
from .numerics import Tape, grad, make_rng
from .numerics import autodiff as ad
from .projection import ProjectedModel, n_groups

log = logging.getLogger(__name__)

TERMS = ("qk", "v", "o", "ffn_up", "ffn_down", "residual")


def total_params(config, groups=None) -> int:
    """``M``: prunable parameters of the dense model (no embeddings, biases or classifier)."""
    d, L = config.d, config.n_layers
    per_layer = 4 * config.n_heads * config.d_h * d + 2 * d * config.d_f
    if groups is None:
        return L * (per_layer + 2 * d * d)
    return L * per_layer + max(n_groups(groups) - 1, 0) * d * d


def _s(z, name):
    return ad.sum(z[name])


def retained_terms(config, z, groups=None) -> dict:
    """Expected retained parameters per term. ``z`` maps mask names to arrays
    or autodiff handles; the result has the same kind of values."""
    terms = {k: 0.0 for k in TERMS}
    if groups is None:
        prev = float(config.d)  # embedding stream, all-ones mask
    for i in range(config.n_layers):
        m = f"mask.L{i}"
        if groups is None:
            s_in_m, s_out_m = _s(z, f"{m}.z_in_M"), _s(z, f"{m}.z_out_M")
            s_in_f, s_out_f = _s(z, f"{m}.z_in_F"), _s(z, f"{m}.z_out_F")
            q_src, o_dst, up_src, down_dst = prev, s_in_m, s_out_m, s_in_f
            terms["residual"] = ad.add(terms["residual"],
                                       ad.add(ad.mul(s_in_m, prev), ad.mul(s_in_f, s_out_m)))
            prev = s_out_f
        else:
            g = groups[i]
            sg = _s(z, f"mask.G{g}.z_hidden")
            q_src = o_dst = up_src = down_dst = sg
            if i > 0 and groups[i - 1] != g:
                sp = _s(z, f"mask.G{groups[i - 1]}.z_hidden")
                terms["residual"] = ad.add(terms["residual"], ad.mul(sp, sg))
        zm = z[f"{m}.z_MHA"]
        for j in range(config.n_heads):
            h = f"{m}.h{j}"
            w = ad.mul(zm, z[f"{h}.z_head"])
            qk = ad.sum(ad.mul(z[f"{h}.z_Q"], z[f"{h}.z_K"]))
            vo = ad.sum(ad.mul(z[f"{h}.z_V"], z[f"{h}.z_O"]))
            terms["qk"] = ad.add(terms["qk"], ad.mul(w, ad.mul(2.0, ad.mul(qk, q_src))))
            terms["v"] = ad.add(terms["v"], ad.mul(w, ad.mul(vo, q_src)))
            terms["o"] = ad.add(terms["o"], ad.mul(w, ad.mul(vo, o_dst)))
        f = ad.mul(z[f"{m}.z_FFN"], _s(z, f"{m}.z_f"))
        terms["ffn_up"] = ad.add(terms["ffn_up"], ad.mul(f, up_src))
        terms["ffn_down"] = ad.add(terms["ffn_down"], ad.mul(f, down_dst))
    return terms


def sparsity(config, z, groups=None):
    """Differentiable ``s_hat = 1 - retained / M``."""
    terms = retained_terms(config, z, groups)
    retained = 0.0
    for k in TERMS:
        retained = ad.add(retained, terms[k])
    return ad.sub(1.0, ad.mul(retained, 1.0 / total_params(config, groups)))


@dataclass
class SparsityReport:
    s_hat: float
    retained: float
    total: int
    terms: dict
    levels: dict

    def summary(self) -> str:
        return f"s_hat={self.s_hat:.4f} retained={self.retained:.1f}/{self.total}"


def _scalar(x) -> float:
    return float(np.asarray(ad.value(x)).reshape(-1)[0]) if np.size(ad.value(x)) else 0.0


def expected_retained(masks: MaskSet, config) -> SparsityReport:
    masks.check(config)
    terms = {k: _scalar(v) for k, v in retained_terms(config, masks.values, masks.groups).items()}
    total = total_params(config, masks.groups)
    retained = sum(terms.values())
    levels = {}
    specs = mask_layout(config, masks.groups)
    for level in LEVELS:
        vals = np.concatenate([masks[s.name].ravel() for s in specs if s.level == level] or [np.zeros(0)])
        levels[level] = {
            "entries": int(vals.size),
            "zeros": int(np.sum(vals == 0.0)),
            "mean": float(vals.mean()) if vals.size else 0.0,
        }
    s_hat = min(max(1.0 - retained / total, 0.0), 1.0) if total else 0.0
    return SparsityReport(s_hat, retained, total, terms, levels)


@dataclass
class LagrangeState:
    """Multipliers of ``lambda1 (s - t) + lambda2 (s - t)^2``, updated by ascent.

    Below the target only the quadratic term pushes ``s_hat`` up; keeping
    ``lambda1 >= 0`` stops it winding up there and overshooting later.
    """

    t: float
    lambda1: float = 0.0
    lambda2: float = 0.0
    lr: float = 0.1
    bounds1: tuple = (0.0, 100.0)
    bounds2: tuple = (0.0, 100.0)

    def update(self, s_hat: float):
        gap = float(s_hat) - self.t
        self.lambda1 = float(np.clip(self.lambda1 + self.lr * gap, *self.bounds1))
        self.lambda2 = float(np.clip(self.lambda2 + self.lr * gap * gap, *self.bounds2))


def pruning_loss(s_hat, lagrange: LagrangeState):
    """``lambda1 (s_hat - t) + lambda2 (s_hat - t)^2``; ``s_hat`` may be a report,
    a float or an autodiff handle."""
    if isinstance(s_hat, SparsityReport):
        s_hat = s_hat.s_hat
    gap = ad.sub(s_hat, lagrange.t)
    return ad.add(ad.mul(lagrange.lambda1, gap), ad.mul(lagrange.lambda2, ad.mul(gap, gap)))


# training ----------------------------------------------------------------------------

@dataclass
class Schedule:
    stage1_epochs: int = 1
    stage2_epochs: int = 3
    lr: float = 1e-3
    mask_lr: float = 0.1
    lambda_lr: float = 0.1
    batch_size: int = 32
    init_logit: float = 3.0
    warmup: float = 0.0  # fraction of steps over which the target ramps up from 0
    seed: int = 0

    def __post_init__(self):
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ContractError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")


@dataclass
class MaskTrainResult:
    masks: MaskSet
    logits: dict
    projected: ProjectedModel
    lagrange: LagrangeState
    history: list = field(default_factory=list)

    @property
    def s_hat(self) -> float:
        return self.history[-1]["s_hat"] if self.history else 0.0


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def train_masks(projected: ProjectedModel, tokens, labels, t: float,
                schedule: Schedule | None = None) -> MaskTrainResult:
    """Jointly fit weights, projections and mask logits on
    ``cross_entropy + lambda1 (s - t) + lambda2 (s - t)^2``.

    Stage 1 updates only dimension-level logits; head and layer masks are
    held at their initial value. Stage 2 trains every mask.
    """
    schedule = schedule or Schedule()
    if not 0.0 <= t < 1.0:
        raise ContractError(f"target sparsity must be in [0, 1), got {t}")
    cfg = projected.config
    groups = projected.projections.groups
    tokens = check_tokens(tokens, cfg)
    labels = np.asarray(labels)
    if len(tokens) == 0 or len(tokens) != len(labels):
        raise ContractError("need a non-empty dataset with one label per sequence")

    layout = mask_layout(cfg, groups)
    logits = {s.name: np.full(s.shape, schedule.init_logit) for s in layout}
    dim_names = [s.name for s in layout if s.level == DIM]
    all_names = [s.name for s in layout]
    weights = {k: v.copy() for k, v in projected.model.params.items()}
    proj = {k: v.copy() for k, v in projected.projections.tensors.items()}
    w_names, p_names = sorted(weights), sorted(proj)

    opt_w, opt_m = Adam(schedule.lr), Adam(schedule.mask_lr)
    lag = LagrangeState(t, lr=schedule.lambda_lr)
    bs = min(schedule.batch_size, len(tokens))
    per_epoch = max(1, len(tokens) // bs)
    it = batches(len(tokens), bs, make_rng(schedule.seed))
    history = []
    n_steps = (schedule.stage1_epochs + schedule.stage2_epochs) * per_epoch
    ramp = max(1, int(round(schedule.warmup * n_steps)))
    step = 0

    for stage, epochs in ((1, schedule.stage1_epochs), (2, schedule.stage2_epochs)):
        active = dim_names if stage == 1 else all_names
        for _ in range(epochs * per_epoch):
            idx = next(it)
            step += 1
            lag.t = t * min(1.0, step / ramp)
            tape = Tape()
            pw = {k: tape.var(weights[k]) for k in w_names}
            pp = {k: tape.var(proj[k]) for k in p_names}
            pl = {k: tape.var(logits[k]) for k in active}
            z = {k: ad.sigmoid(pl[k]) if k in pl else _sigmoid(logits[k]) for k in all_names}
            out = projected_params(cfg, {**pw, **pp, **z}, tokens[idx], groups)
            task = ad.cross_entropy(out, labels[idx])
            s_hat = sparsity(cfg, z, groups)
            loss = ad.add(task, pruning_loss(s_hat, lag))
            val = _scalar(loss)
            if not np.isfinite(val):
                raise TrainingError(f"mask training diverged: loss {val}")
            handles = [pw[k] for k in w_names] + [pp[k] for k in p_names] + [pl[k] for k in active]
            gs = grad(loss, handles)
            nw = len(w_names)
            opt_w.step(weights, dict(zip(w_names, gs[:nw])))
            opt_w.step(proj, dict(zip(p_names, gs[nw:nw + len(p_names)])))
            opt_m.step(logits, dict(zip(active, gs[nw + len(p_names):])))
            s_val = _scalar(s_hat)
            history.append({"stage": stage, "target": lag.t, "task": _scalar(task), "s_hat": s_val,
                            "lambda1": lag.lambda1, "lambda2": lag.lambda2,
                            "acc": accuracy(ad.value(out), labels[idx])})
            lag.update(s_val)
    if history:
        log.info("train_masks: s_hat %.3f (target %.3f), task loss %.4f",
                 history[-1]["s_hat"], t, history[-1]["task"])
        if abs(history[-1]["s_hat"] - t) > 0.02:
            log.warning("expected sparsity %.3f did not reach target %.3f within 0.02",
                        history[-1]["s_hat"], t)
    model = projected.model.copy()
    model.params = weights
    projections = projected.projections.copy()
    projections.tensors = proj
    return MaskTrainResult(MaskSet.from_logits(logits, groups), logits,
                           ProjectedModel(model, projections), lag, history)


# binarization --------------------------------------------------------------------------

BINARIZE_SLACK = 0.01


def _hidden(spec) -> bool:
    return spec.kind == "hidden"


def binarize(masks: MaskSet, t: float, config, slack: float = BINARIZE_SLACK) -> MaskSet:
    """Zero the smallest mask entries until the binary masks reach ``s_hat >= t``.

    Entries are visited in ascending value order (ties: layout order). An
    entry is skipped when zeroing it would overshoot ``t`` by more than
    ``slack``, empty a hidden mask, kill the last live head, or remove both
    blocks of one layer. Exact zeros stay zero, so binary input that already
    meets ``t`` comes back unchanged.
    """
    if not 0.0 <= t < 1.0:
        raise ContractError(f"target sparsity must be in [0, 1), got {t}")
    masks.check(config)
    specs = mask_layout(config, masks.groups)
    out = MaskSet({s.name: np.where(masks[s.name] == 0.0, 0.0, 1.0) for s in specs}, masks.groups)
    order = []
    for s in specs:
        vals = masks[s.name].ravel()
        for e in range(vals.size):
            if vals[e] != 0.0:
                order.append((vals[e], len(order), s, e))
    order.sort(key=lambda r: (r[0], r[1]))

    total = total_params(config, masks.groups)

    def s_of(m):
        return 1.0 - sum(_scalar(v) for v in retained_terms(config, m.values, m.groups).values()) / total

    current = s_of(out)
    for strict in (True, False):
        for _, _, spec, e in order:
            if current >= t:
                return out
            arr = out.values[spec.name]
            if arr.flat[e] == 0.0 or not _may_zero(out, spec, config):
                continue
            arr.flat[e] = 0.0
            new = s_of(out)
            if strict and new > t + slack:
                arr.flat[e] = 1.0
                continue
            current = new
    return out


def _may_zero(m: MaskSet, spec, config) -> bool:
    v = m.values
    if _hidden(spec):
        return np.sum(v[spec.name]) > 1.0
    if spec.level == LAYER:
        is_mha = spec.kind == "mha"
        other = "z_FFN" if is_mha else "z_MHA"
        if v[f"mask.L{spec.layer}.{other}"].item() == 0.0:
            return False
        return not is_mha or _live_heads(m, config, skip_layer=spec.layer) > 0
    if spec.level == HEAD:
        return _live_heads(m, config) > 1
    return True


def _live_heads(m: MaskSet, config, skip_layer=None) -> int:
    n = 0
    for i in range(config.n_layers):
        if i == skip_layer or m[f"mask.L{i}.z_MHA"].item() == 0.0:
            continue
        n += sum(int(m[f"mask.L{i}.h{j}.z_head"].item() != 0.0) for j in range(config.n_heads))
    return n


def random_masks(config, groups=None, seed: int = 0) -> MaskSet:
    """Uniform random mask values; binarized to a target they give the random-pruning baseline."""
    rng = make_rng(seed)
    return MaskSet({s.name: rng.uniform(0.0, 1.0, size=s.shape) for s in mask_layout(config, groups)},
                   None if groups is None else list(groups))


def random_pruning(config, t: float, groups=None, seed: int = 0) -> MaskSet:
    return binarize(random_masks(config, groups, seed), t, config)
