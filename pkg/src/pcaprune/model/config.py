from __future__ import annotations

from dataclasses import asdict, dataclass

from ..errors import ConfigError

ARCHS = ("postln", "rmsnorm")


@dataclass(frozen=True)
class ModelConfig:
    """Shape of a toy transformer stack.

    ``postln`` is the BERT-style encoder (norm after each residual add);
    ``rmsnorm`` is the Llama-style pre-norm stack with causal attention.
    """

    arch: str = "postln"
    n_layers: int = 2
    d: int = 16
    n_heads: int = 4
    d_f: int = 32
    vocab_size: int = 8
    max_seq_len: int = 9
    n_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        for name in ("d", "n_heads", "d_f", "vocab_size", "max_seq_len", "n_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    @property
    def d_h(self) -> int:
        return self.d // self.n_heads

    def to_dict(self):
        return asdict(self)
