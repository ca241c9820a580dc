"""Flat ``key = value`` run configuration with strict key checking."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

from .causal import MaskConfig
from .meta import MetaConfig
from .model import ModelConfig
from .objective import LossWeights

FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data and outputs
    dataset: str = ""
    splits: str = ""
    groundtruth: str = ""
    checkpoint: str = ""
    out: str = ""
    seed: int = 0
    # encoders
    hidden_dim: int = 64
    encoder_layers: int = 3
    context_layers: int = 3
    use_context: bool = True
    use_causal: bool = True
    normalize_slots: bool = True
    # masking
    tau: float = 1.0
    tau_decay: float = 0.97
    tau_every: int = 100
    tau_min: float = 0.1
    hard_eval: bool = True
    # loss weights
    alpha1: float = 0.1
    alpha2: float = 0.01
    # meta-learning
    inner_lr: float = 0.05
    outer_lr: float = 0.001
    batch_episodes: int = 8
    inner_steps: int = 1
    test_inner_steps: int = 1
    epochs: int = 300
    first_order: bool = True
    k_shot: int = 5
    query_per_class: int = 16
    pool_size: int = 16
    bank_size: int = 64
    outer_optimizer: str = "adam"
    weight_decay: float = 1e-5
    context_aux: bool = True
    test_context_aux: bool = False
    # run control and evaluation
    checkpoint_every: int = 50
    eval_episodes: int = 10
    explain_ratio: float = 0.5
    cmi_clusters: int = 8

    # file locations stay out of the digest so a copied run directory keeps its identity
    _LOCATION_KEYS = ("dataset", "splits", "groundtruth", "checkpoint", "out")

    def model_config(self) -> ModelConfig:
        mask = MaskConfig(self.tau, self.tau_decay, self.tau_every, self.tau_min, self.hard_eval)
        return ModelConfig(self.hidden_dim, self.encoder_layers, self.context_layers, self.use_context,
                           self.use_causal, self.normalize_slots, mask, LossWeights(self.alpha1, self.alpha2))

    def meta_config(self) -> MetaConfig:
        names = {f.name for f in fields(MetaConfig)}
        return MetaConfig(**{k: getattr(self, k) for k in names})

    def items(self) -> list[tuple[str, object]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def normalized(self) -> str:
        lines = [f"{k}={format_value(v)}" for k, v in sorted(self.items()) if k not in self._LOCATION_KEYS]
        return "\n".join(lines) + "\n"

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.normalized().encode()).hexdigest()[:16]

    def dumps(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.items())


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, (list, tuple)):
            return tuple(x.strip() for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_pairs(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; duplicate keys are rejected."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def build(cls, pairs: dict[str, str], source: str = "<config>"):
    """Instantiate dataclass ``cls`` from string pairs; unknown keys are an error."""
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(pairs) - set(known))
    if unknown:
        raise ConfigError(f"{source}: unknown key(s) {', '.join(unknown)}")
    defaults = cls()
    kwargs = {k: coerce(k, v, getattr(defaults, k)) for k, v in pairs.items()}
    try:
        obj = cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return obj


def load_run_config(path: str, overrides: dict[str, str] | None = None) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            pairs = parse_pairs(fh.read(), path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    pairs.update(overrides or {})
    cfg = build(RunConfig, pairs, path)
    # validate the derived configs early
    try:
        cfg.model_config()
        cfg.meta_config()
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return cfg
