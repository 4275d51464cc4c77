"""Run configuration: plain ``key = value`` text, overridable from the command line."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .model.config import ARCHS, ModelConfig
from .model.data import MajorityTask
from .pruning import Schedule


@dataclass
class RunConfig:
    arch: str = "postln"
    n_layers: int = 2
    d: int = 16
    n_heads: int = 4
    d_f: int = 32
    vocab_size: int = 8
    seq_len: int = 9
    seed: int = 0
    # toy training
    train_size: int = 512
    test_size: int = 512
    train_steps: int = 200
    train_lr: float = 3e-3
    # calibration / projection
    calib_size: int = 64
    T: int = 0  # 0 means 4 * d
    group_size: int = 1
    # mask training
    target_sparsity: float = 0.5
    stage1_epochs: int = 1
    stage2_epochs: int = 3
    lr: float = 1e-3
    mask_lr: float = 0.1
    lambda_lr: float = 0.1
    batch_size: int = 32

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if not 0.0 <= self.target_sparsity < 1.0:
            raise ConfigError(f"target_sparsity must be in [0, 1), got {self.target_sparsity}")
        for name in ("train_size", "test_size", "calib_size", "group_size", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("train_steps", "stage1_epochs", "stage2_epochs", "T", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("train_lr", "lr", "mask_lr", "lambda_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.calib_size * self.seq_len < self.tokens:
            raise ConfigError(f"T={self.tokens} exceeds the {self.calib_size * self.seq_len} calibration tokens")
        self.model_config()
        self.task()
        return self

    @property
    def tokens(self) -> int:
        return self.T or 4 * self.d

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.arch, self.n_layers, self.d, self.n_heads, self.d_f,
                           self.vocab_size, self.seq_len, 2, self.seed)

    def task(self) -> MajorityTask:
        return MajorityTask(self.vocab_size, self.seq_len, self.seed)

    def schedule(self) -> Schedule:
        return Schedule(self.stage1_epochs, self.stage2_epochs, self.lr, self.mask_lr,
                        self.lambda_lr, self.batch_size, seed=self.seed)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})


FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _convert(key, raw: str, where: str):
    kind = type(getattr(RunConfig, key)) if hasattr(RunConfig, key) else str
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: {key} expects {kind.__name__}, got {raw!r}") from None


def parse_config(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{n}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in FIELDS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        values[key] = _convert(key, raw, where)
    return values


def load_config(path=None, **overrides) -> RunConfig:
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        values = parse_config(text, str(path))
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**values)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {getattr(cfg, k)}\n" for k in FIELDS)
