"""Mask containers and their naming layout.

Masks are stored by name (``mask.L0.z_f``, ``mask.L1.h2.z_Q`` ...) as column
vectors or 1x1 scalars. Two layouts exist:

* ``raw`` / post-LN projected: per-block ``z_in``/``z_out`` hidden masks.
* ``grouped``: pre-RMSNorm projected stacks carry one hidden mask per
  projection group (``mask.G0.z_hidden``) since the residual stream is
  stored in that group's principal coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DimensionError

DIM, HEAD, LAYER = "dimension", "head", "layer"
LEVELS = (DIM, HEAD, LAYER)


class MaskSpec(NamedTuple):
    name: str
    shape: tuple
    level: str
    kind: str  # hidden | ffn | qk | vo | head | mha | ffn_block
    layer: int  # -1 for group-level hidden masks


def mask_layout(config, groups=None) -> list[MaskSpec]:
    """Ordered mask specs for a config; ``groups`` maps layer -> group id."""
    d, dh, H = config.d, config.d_h, config.n_heads
    specs = []
    if groups is not None:
        for g in range(max(groups) + 1):
            specs.append(MaskSpec(f"mask.G{g}.z_hidden", (d, 1), DIM, "hidden", -1))
    for i in range(config.n_layers):
        pre = f"mask.L{i}"
        if groups is None:
            for nm in ("z_in_M", "z_out_M", "z_in_F", "z_out_F"):
                specs.append(MaskSpec(f"{pre}.{nm}", (d, 1), DIM, "hidden", i))
        specs.append(MaskSpec(f"{pre}.z_f", (config.d_f, 1), DIM, "ffn", i))
        for j in range(H):
            hp = f"{pre}.h{j}"
            specs.append(MaskSpec(f"{hp}.z_Q", (dh, 1), DIM, "qk", i))
            specs.append(MaskSpec(f"{hp}.z_K", (dh, 1), DIM, "qk", i))
            specs.append(MaskSpec(f"{hp}.z_V", (dh, 1), DIM, "vo", i))
            specs.append(MaskSpec(f"{hp}.z_O", (dh, 1), DIM, "vo", i))
        for j in range(H):
            specs.append(MaskSpec(f"{pre}.h{j}.z_head", (1, 1), HEAD, "head", i))
        specs.append(MaskSpec(f"{pre}.z_MHA", (1, 1), LAYER, "mha", i))
        specs.append(MaskSpec(f"{pre}.z_FFN", (1, 1), LAYER, "ffn_block", i))
    return specs


@dataclass
class MaskSet:
    """Mask values keyed by name. Training values lie in (0, 1); fused ones in {0, 1}."""

    values: dict = field(default_factory=dict)
    groups: list | None = None

    @classmethod
    def ones(cls, config, groups=None):
        return cls({s.name: np.ones(s.shape) for s in mask_layout(config, groups)},
                   None if groups is None else list(groups))

    @classmethod
    def from_logits(cls, logits: dict, groups=None):
        return cls({k: 1.0 / (1.0 + np.exp(-v)) for k, v in logits.items()},
                   None if groups is None else list(groups))

    @classmethod
    def shared(cls, config, z_in, z_out, **overrides):
        """CoFi-style baseline: one hidden ``z_in``/``z_out`` pair reused by every block."""
        m = cls.ones(config)
        z_in = np.asarray(z_in, dtype=float).reshape(-1, 1)
        z_out = np.asarray(z_out, dtype=float).reshape(-1, 1)
        for i in range(config.n_layers):
            for b in ("M", "F"):
                m.values[f"mask.L{i}.z_in_{b}"] = z_in.copy()
                m.values[f"mask.L{i}.z_out_{b}"] = z_out.copy()
        for k, v in overrides.items():
            m.values[k] = np.asarray(v, dtype=float).reshape(m.values[k].shape)
        return m

    def copy(self):
        return MaskSet({k: v.copy() for k, v in self.values.items()},
                       None if self.groups is None else list(self.groups))

    def __getitem__(self, name):
        return self.values[name]

    def __setitem__(self, name, val):
        self.values[name] = val

    def is_binary(self) -> bool:
        return all(np.all((v == 0.0) | (v == 1.0)) for v in self.values.values())

    def check(self, config):
        expected = {s.name: s.shape for s in mask_layout(config, self.groups)}
        if set(expected) != set(self.values):
            missing = sorted(set(expected) - set(self.values))[:3]
            extra = sorted(set(self.values) - set(expected))[:3]
            raise DimensionError(f"mask names do not match config: missing {missing}, extra {extra}")
        for name, shape in expected.items():
            if self.values[name].shape != shape:
                raise DimensionError(
                    f"mask {name} has shape {self.values[name].shape}, expected {shape}")
        return self
