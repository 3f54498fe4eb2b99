"""Training configuration, presets and flat ``key=value`` config files."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError

AGGREGATORS = ("avg", "lstm", "gru", "trn")
VARIANTS = ("abg", "habg")


@dataclass
class TrainConfig:
    # loss coefficients
    alpha: float = 0.1
    beta: float = 1.0
    gamma: float = 0.3
    lam: float = 1.0
    # data geometry
    K: int = 5
    D: int = 32
    n_classes: int = 4
    # model widths
    d_v: int = 16
    d_n: int = 16
    hidden: int = 16
    # optimization
    epochs: int = 30
    bs: int = 32
    bt: int = 32
    lr: float = 0.04
    lr_a: float = 10.0
    lr_b: float = 0.75
    momentum: float = 0.9
    weight_decay: float = 1e-4
    # architecture switches
    agg: str = "avg"
    variant: str = "abg"
    rounds: int = 1
    dropout: float = 0.2
    batch_norm: bool = True
    trn_max_tuples: int | None = None
    use_graph: bool = True
    adversarial: bool = True
    source_only: bool = False
    edge_loss: str = "bce"
    # semi-supervised
    semi_ratio: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("alpha", "beta", "gamma", "lam"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigError(f"{name} must be a finite non-negative number, got {v}")
        for name in ("K", "D", "n_classes", "d_v", "d_n", "hidden", "bs", "bt", "rounds"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if not 0.0 <= self.semi_ratio <= 1.0:
            raise ConfigError("semi_ratio must lie in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.agg not in AGGREGATORS:
            raise ConfigError(f"agg must be one of {AGGREGATORS}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.edge_loss not in ("bce", "sum"):
            raise ConfigError("edge_loss must be 'bce' or 'sum'")
        if self.agg == "trn" and self.K < 2:
            raise ConfigError("trn aggregation needs K >= 2")
        if self.variant == "habg" and not self.use_graph:
            raise ConfigError("habg stacks a video graph on the frame graph; use_graph must stay on")

    @property
    def semi(self) -> bool:
        return self.semi_ratio > 0

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def desk_preset(**kw) -> TrainConfig:
    return TrainConfig(**kw)


def full_scale_preset(**kw) -> TrainConfig:
    base = dict(D=2048, d_v=512, d_n=512, hidden=512, bs=128, bt=128, epochs=30)
    base.update(kw)
    return TrainConfig(**base)


def source_only(cfg: TrainConfig) -> TrainConfig:
    """Baseline that never sees target data: no graph, no adversary, no target losses."""
    return cfg.replace(source_only=True, use_graph=False, adversarial=False, variant="abg",
                       gamma=0.0, beta=0.0, semi_ratio=0.0)


# -- key=value files ----------------------------------------------------------

def _coerce(raw: str, kind: Any):
    kind = str(kind)
    raw = raw.strip()
    if raw.lower() in ("none", "null", ""):
        return None
    if "bool" in kind:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if "int" in kind and "float" not in kind:
        return int(raw)
    if "float" in kind:
        return float(eval_number(raw))
    return raw


def eval_number(raw: str) -> float:
    """Floats, plus ``pi`` multiples such as ``pi/3`` (used for angles)."""
    s = raw.replace(" ", "")
    if "pi" in s:
        num, _, den = s.partition("/")
        coef = num.replace("*pi", "").replace("pi", "") or "1"
        return float(coef) * math.pi / (float(den) if den else 1.0)
    return float(s)


def read_kv(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def coerce_kv(cls, raw: dict[str, str]) -> dict[str, Any]:
    types = {f.name: f.type for f in fields(cls)}
    out = {}
    for k, v in raw.items():
        if k not in types:
            raise ConfigError(f"unknown key {k!r} for {cls.__name__}")
        try:
            out[k] = _coerce(v, types[k])
        except ValueError as exc:
            raise ConfigError(f"bad value for {k}: {v!r}") from exc
    return out


def load_train_config(path: str | Path | None = None, **overrides) -> TrainConfig:
    """Desk preset, then the config file, then explicit overrides."""
    values: dict[str, Any] = {}
    if path is not None:
        values.update(coerce_kv(TrainConfig, read_kv(path)))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(values)
