"""Collect the pre-norm and per-head features that the projections are fitted on."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .model.transformer import TransformerModel, check_tokens, forward
from .numerics import centering_matrix, make_rng, svd_full


@dataclass
class CalibrationFeatures:
    """Feature matrices keyed ``L{i}.M`` / ``L{i}.F`` (d x T) and
    ``L{i}.h{j}.Q|K|V`` (d_h x T); every matrix has exactly ``T`` columns."""

    arch: str
    T: int
    mats: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.mats[key]

    def stream(self, layer: int, block: str) -> np.ndarray:
        return self.mats[f"L{layer}.{block}"]

    def head(self, layer: int, head: int, which: str) -> np.ndarray:
        return self.mats[f"L{layer}.h{head}.{which}"]

    def to_records(self) -> dict:
        return {f"feat.{k}": v for k, v in self.mats.items()}

    @classmethod
    def from_records(cls, arch, records: dict):
        mats = {k[5:]: v for k, v in records.items() if k.startswith("feat.")}
        if not mats:
            raise InputError("no feature records found")
        T = next(iter(mats.values())).shape[1]
        return cls(arch, T, mats)


def collect(model: TransformerModel, dataset, T: int, seed: int = 0,
            batch_size: int = 64) -> CalibrationFeatures:
    """Run ``dataset`` (sequences x length) through the model and keep ``T``
    token columns drawn uniformly without replacement from all positions.

    The kept column indices are sorted, so ``T`` equal to the total token
    count returns every column in its original order.
    """
    cfg = model.config
    tokens = check_tokens(dataset, cfg)
    if len(tokens) == 0:
        raise InputError("calibration dataset is empty")
    if T < 1:
        raise InputError("T must be >= 1")
    total = tokens.size
    if total < T:
        raise InputError(f"calibration set has {total} tokens, fewer than T={T}")
    if T < cfg.d:
        warnings.warn(f"T={T} is below the hidden size d={cfg.d}; projections will be rank-deficient",
                      stacklevel=2)
    chunks: dict[str, list] = {}
    for s in range(0, len(tokens), batch_size):
        trace: dict = {}
        forward(model, tokens[s: s + batch_size], trace=trace)
        for k, v in trace.items():
            chunks.setdefault(k, []).append(v)
    keep = np.sort(make_rng(seed).choice(total, size=T, replace=False))
    mats = {k: np.concatenate(v, axis=1)[:, keep] for k, v in chunks.items()}
    return CalibrationFeatures(cfg.arch, T, mats)


def energy_profile(x: np.ndarray, center: bool = True) -> dict:
    """Normalised squared singular values of ``x`` (optionally centred per column)."""
    # rank cutoff relative to the raw input, so centring round-off is not signal
    scale = float(np.linalg.norm(x))
    if center:
        x = centering_matrix(x.shape[0]) @ x
    s = svd_full(x).S
    tol = max(x.shape) * np.finfo(float).eps * max(scale, s[0])
    if s[0] <= tol:
        return {"energy": np.zeros_like(s), "rank": 0, "k90": 0, "k99": 0}
    e = s * s
    frac = e / e.sum()
    cum = np.cumsum(frac)
    return {
        "energy": frac,
        "rank": int(np.sum(s > tol)),
        "k90": int(np.searchsorted(cum, 0.90 - 1e-12) + 1),
        "k99": int(np.searchsorted(cum, 0.99 - 1e-12) + 1),
    }


def spectrum_report(features: CalibrationFeatures) -> list[dict]:
    """One row per layer/stream: descending energy fractions and k for 90%/99%."""
    center = features.arch == "postln"
    rows = []
    layers = sorted({int(k.split(".")[0][1:]) for k in features.mats})
    for i in layers:
        for block in ("M", "F"):
            prof = energy_profile(features.stream(i, block), center=center)
            rows.append({"layer": i, "stream": block, **prof})
    return rows
