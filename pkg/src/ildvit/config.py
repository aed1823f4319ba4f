"""Flat ``key = value`` run configuration with the published defaults."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields

from .model import ModelConfig

FEATURE_VERSION = 1
FEATURE_KEYS = ("window_sec", "overlap", "filter_order", "cutoff_hz", "window_len", "hop",
                "n_mels", "image_size")


class ConfigError(ValueError):
    pass


def _tuple_of(value, conv):
    parts = value.split(",") if isinstance(value, str) else value
    return tuple(conv(p) for p in parts if str(p).strip())


@dataclass(frozen=True)
class RunConfig:
    # preprocessing
    window_sec: float = 5.0
    overlap: float = 0.5
    filter_order: int = 4
    cutoff_hz: float = 10.0
    # time-frequency image
    window_len: int = 1024
    hop: int = 512
    n_mels: int = 64
    image_size: int = 64
    # model
    patch_size: int = 8
    proj_len: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    head_dim: int = 64
    mlp_dims: tuple = (128, 64)
    dropout: float = 0.3
    # training
    epochs: int = 200
    lr: float = 0.001
    batch_size: int = 64
    optimizer: str = "adam"
    precision: str = "float32"
    # splits
    train_frac: float = 0.7
    val_frac: float = 0.1
    test_frac: float = 0.2
    folds: int = 5
    # robustness
    noise_kind: str = "gaussian"
    snr_grid: tuple = (-5.0, 0.0, 5.0, 10.0)
    noise_bank: str = ""
    seed: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, "mlp_dims", _tuple_of(self.mlp_dims, int))
            object.__setattr__(self, "snr_grid", _tuple_of(self.snr_grid, float))
        except ValueError as exc:
            raise ConfigError(f"bad list value: {exc}") from None
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be 'float32' or 'float64', got {self.precision!r}")
        if self.noise_kind not in ("gaussian", "heart"):
            raise ConfigError(f"noise_kind must be 'gaussian' or 'heart', got {self.noise_kind!r}")
        if abs(self.train_frac + self.val_frac + self.test_frac - 1.0) > 1e-9:
            raise ConfigError("train_frac + val_frac + test_frac must equal 1")
        if self.epochs < 0 or self.batch_size < 1 or self.folds < 2:
            raise ConfigError("epochs >= 0, batch_size >= 1 and folds >= 2 are required")

    @property
    def dtype(self):
        import numpy as np

        return np.float64 if self.precision == "float64" else np.float32

    @property
    def fractions(self):
        return (self.train_frac, self.val_frac, self.test_frac)

    def model_config(self):
        return ModelConfig(image_size=self.image_size, patch_size=self.patch_size, proj_len=self.proj_len,
                           n_blocks=self.n_blocks, n_heads=self.n_heads, head_dim=self.head_dim,
                           mlp_dims=self.mlp_dims, dropout=self.dropout)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["mlp_dims"] = list(self.mlp_dims)
        d["snr_grid"] = list(self.snr_grid)
        return d

    def dumps(self):
        """Fully resolved config in the same key = value format that :func:`parse_config` reads."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def feature_hash(self):
        key = {k: getattr(self, k) for k in FEATURE_KEYS}
        key["version"] = FEATURE_VERSION
        blob = json.dumps(key, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name, raw):
    conv = {"int": int, "float": float}.get(_FIELD_TYPES[name])
    if conv is None:
        return raw
    try:
        return conv(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {_FIELD_TYPES[name]}") from None


def parse_config(text, base=None):
    """Parse ``key = value`` lines (``#`` starts a comment); unknown keys are rejected."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    base = base or RunConfig()
    try:
        return dataclasses.replace(base, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, **overrides):
    cfg = RunConfig()
    if path:
        with open(path, encoding="utf-8") as fh:
            cfg = parse_config(fh.read())
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return cfg.replace(**overrides) if overrides else cfg
