"""Run configuration and the flat ``key=value`` config file format.

Every key has a default. A file may start with ``profile = desk`` to pull in the
small CI-sized model before the remaining keys are applied on top of it.

Recognised keys::

    profile                      full | desk
    model.layers                 2
    model.embedding_size         650
    model.hidden_size            650
    model.init_range             0.1
    train.batch_size             64
    train.lr                     20
    train.clip                   0.25
    train.seq_len                35
    train.epochs                 8
    train.dropout                0.15
    train.seed                   1234
    corpus.min_count             1
    recoding.enabled             false
    recoding.step_kind           fixed | learned | predicted
    recoding.alpha               5 for surprisal, 0.001 for mcd/bae
    recoding.alpha.<layer>.<h|c> per-activation override of recoding.alpha
    recoding.predictor_hidden    300,100
    signal.kind                  surprisal | mcd | bae
    signal.k                     15
    signal.mc_dropout            0.42
    signal.prior_scale           0.29
    signal.weight_decay          4.82e-5
    signal.per_member_anchors    false
    eval.seed                    0
    eval.batch_size              1
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

SIGNAL_KINDS = ("surprisal", "mcd", "bae")
STEP_KINDS = ("fixed", "learned", "predicted")
ACTIVATION_KINDS = ("h", "c")

# best fixed step sizes per signal family
DEFAULT_ALPHA = {"surprisal": 5.0, "mcd": 0.001, "bae": 0.001}


class ConfigError(ValueError):
    """Raised for unknown keys or values outside their valid range."""


@dataclass
class RecodingConfig:
    enabled: bool = False
    signal: str = "surprisal"
    step_kind: str = "fixed"
    alpha: float | None = None
    alpha_overrides: dict[tuple[int, str], float] = field(default_factory=dict)
    predictor_hidden: tuple[int, int] = (300, 100)
    k: int = 15
    mc_dropout: float = 0.42
    prior_scale: float = 0.29
    weight_decay: float = 4.82e-5
    per_member_anchors: bool = False

    @property
    def base_alpha(self) -> float:
        if self.alpha is not None:
            return float(self.alpha)
        return DEFAULT_ALPHA[self.signal]

    def alpha_for(self, layer: int, kind: str) -> float:
        return float(self.alpha_overrides.get((layer, kind), self.base_alpha))

    def validate(self) -> None:
        if self.signal not in SIGNAL_KINDS:
            raise ConfigError(f"signal.kind must be one of {SIGNAL_KINDS}, got {self.signal!r}")
        if self.step_kind not in STEP_KINDS:
            raise ConfigError(f"recoding.step_kind must be one of {STEP_KINDS}, got {self.step_kind!r}")
        if self.k < 1:
            raise ConfigError("signal.k must be >= 1")
        if not 0.0 <= self.mc_dropout < 1.0:
            raise ConfigError("signal.mc_dropout must lie in [0, 1)")
        if self.prior_scale <= 0:
            raise ConfigError("signal.prior_scale must be positive")
        if self.weight_decay < 0:
            raise ConfigError("signal.weight_decay must be non-negative")
        if self.alpha is not None and self.alpha < 0:
            raise ConfigError("recoding.alpha must be non-negative")
        for (layer, kind), value in self.alpha_overrides.items():
            if kind not in ACTIVATION_KINDS or layer < 0 or value < 0:
                raise ConfigError(f"bad step size override recoding.alpha.{layer}.{kind}={value}")
        if len(self.predictor_hidden) != 2 or min(self.predictor_hidden) < 1:
            raise ConfigError("recoding.predictor_hidden needs two positive widths")


@dataclass
class TrainConfig:
    layers: int = 2
    embedding_size: int = 650
    hidden_size: int = 650
    init_range: float = 0.1
    batch_size: int = 64
    lr: float = 20.0
    clip: float = 0.25
    seq_len: int = 35
    epochs: int = 8
    dropout: float = 0.15
    seed: int = 1234
    min_count: int = 1
    eval_seed: int = 0
    eval_batch_size: int = 1
    recoding: RecodingConfig = field(default_factory=RecodingConfig)

    def validate(self) -> None:
        for name in ("layers", "embedding_size", "hidden_size", "batch_size", "seq_len", "epochs", "min_count",
                     "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("train.dropout must lie in [0, 1)")
        if self.lr <= 0 or self.clip <= 0:
            raise ConfigError("train.lr and train.clip must be positive")
        if self.init_range <= 0:
            raise ConfigError("model.init_range must be positive")
        self.recoding.validate()
        for layer, _ in self.recoding.alpha_overrides:
            if layer >= self.layers:
                raise ConfigError(f"step size override for layer {layer} but model has {self.layers} layers")


def desk_profile() -> TrainConfig:
    """Reduced sizes for CI and quick local runs."""
    return TrainConfig(layers=2, embedding_size=64, hidden_size=64, batch_size=16, seq_len=20)


# flat key -> (section object attribute, parser)
def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_widths(text: str) -> tuple[int, int]:
    parts = tuple(int(p) for p in text.replace(" ", "").split(",") if p)
    if len(parts) != 2:
        raise ConfigError(f"expected two comma-separated widths, got {text!r}")
    return parts  # type: ignore[return-value]


_TRAIN_KEYS = {
    "model.layers": ("layers", int),
    "model.embedding_size": ("embedding_size", int),
    "model.hidden_size": ("hidden_size", int),
    "model.init_range": ("init_range", float),
    "train.batch_size": ("batch_size", int),
    "train.lr": ("lr", float),
    "train.clip": ("clip", float),
    "train.seq_len": ("seq_len", int),
    "train.epochs": ("epochs", int),
    "train.dropout": ("dropout", float),
    "train.seed": ("seed", int),
    "corpus.min_count": ("min_count", int),
    "eval.seed": ("eval_seed", int),
    "eval.batch_size": ("eval_batch_size", int),
}

_RECODING_KEYS = {
    "recoding.enabled": ("enabled", _parse_bool),
    "recoding.step_kind": ("step_kind", str),
    "recoding.alpha": ("alpha", float),
    "recoding.predictor_hidden": ("predictor_hidden", _parse_widths),
    "signal.kind": ("signal", str),
    "signal.k": ("k", int),
    "signal.mc_dropout": ("mc_dropout", float),
    "signal.prior_scale": ("prior_scale", float),
    "signal.weight_decay": ("weight_decay", float),
    "signal.per_member_anchors": ("per_member_anchors", _parse_bool),
}


def apply_items(config: TrainConfig, items: dict[str, str]) -> TrainConfig:
    """Return a copy of ``config`` with flat ``items`` applied on top."""
    config = dataclasses.replace(config, recoding=dataclasses.replace(
        config.recoding, alpha_overrides=dict(config.recoding.alpha_overrides)))
    for key, raw in items.items():
        try:
            if key in _TRAIN_KEYS:
                attr, parse = _TRAIN_KEYS[key]
                setattr(config, attr, parse(raw))
            elif key in _RECODING_KEYS:
                attr, parse = _RECODING_KEYS[key]
                setattr(config.recoding, attr, parse(raw))
            elif key.startswith("recoding.alpha."):
                parts = key.split(".")
                if len(parts) != 4:
                    raise ConfigError(f"unknown config key {key!r}")
                config.recoding.alpha_overrides[(int(parts[2]), parts[3])] = float(raw)
            elif key == "profile":
                continue
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    config.validate()
    return config


def parse_config(text: str) -> TrainConfig:
    items: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        items[key] = value
    profile = items.get("profile", "full")
    if profile == "desk":
        base = desk_profile()
    elif profile == "full":
        base = TrainConfig()
    else:
        raise ConfigError(f"unknown profile {profile!r}")
    return apply_items(base, items)


def load_config(path: str | Path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def to_items(config: TrainConfig) -> dict[str, str]:
    """Flatten a config into ``key -> value`` strings that ``apply_items`` accepts."""
    items = {key: str(getattr(config, attr)) for key, (attr, _) in _TRAIN_KEYS.items()}
    rec = config.recoding
    for key, (attr, _) in _RECODING_KEYS.items():
        value = getattr(rec, attr)
        if value is None:
            continue
        if attr == "predictor_hidden":
            value = ",".join(str(v) for v in value)
        items[key] = str(value).lower() if isinstance(value, bool) else repr(value) if isinstance(value, float) else str(value)
    for (layer, kind), value in sorted(rec.alpha_overrides.items()):
        items[f"recoding.alpha.{layer}.{kind}"] = repr(float(value))
    for key, (attr, _) in _TRAIN_KEYS.items():
        value = getattr(config, attr)
        if isinstance(value, float):
            items[key] = repr(value)
    return items


def dump_config(config: TrainConfig) -> str:
    return "".join(f"{key} = {value}\n" for key, value in to_items(config).items())
