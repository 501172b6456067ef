"""Unified run configuration, loaded from JSON with full defaulting.

Sampling rate and step count follow the training recipe: ``q`` is the
expected batch size over ``n_priv`` and ``steps`` is ``epochs`` passes of
``ceil(1/q)`` steps, unless either is pinned explicitly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any

from .datamodel import SynthSpec
from .distill import QUERY_MODES, KdConfig
from .dpsgd import AwdpConfig, DpConfig, ModelConfig
from .features import FrontEndConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_priv: int = 4000
    n_aux: int = 1000
    # an existing dataset manifest replaces the synthetic generator
    manifest: str | None = None


@dataclass(frozen=True)
class PrivacyConfig:
    expected_batch: float = 32.0
    epochs: int = 20
    C: float = 5.0
    sigma: float = 2.0
    delta: float = 1e-5
    optimizer: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    divisor: str = "expected"
    q: float | None = None  # None: expected_batch / n_priv
    steps: int | None = None  # None: epochs * ceil(1 / q)


@dataclass(frozen=True)
class RunConfig:
    frontend: FrontEndConfig = field(default_factory=FrontEndConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    privacy: PrivacyConfig = field(default_factory=PrivacyConfig)
    awdp: AwdpConfig = field(default_factory=AwdpConfig)
    dropout_p: float = 0.5
    kd: KdConfig = field(default_factory=KdConfig)
    query_mode: str = "audio_only"
    seed: int = 0
    out_dir: str = "run"

    def __post_init__(self):
        if self.data.manifest is None:
            if self.frontend.n_mels != self.synth.n_mels:
                raise ConfigError("frontend.n_mels and synth.n_mels disagree")
            if self.frontend.frames != self.synth.L:
                raise ConfigError("frontend.frames and synth.L disagree")
            if len(self.synth.proportions) != self.synth.K:
                raise ConfigError("synth.proportions needs one entry per class")
            if self.data.n_priv + self.data.n_aux > self.synth.n:
                raise ConfigError("n_priv + n_aux exceeds the synthetic dataset size")
        if self.data.n_priv < 1 or self.data.n_aux < 1:
            raise ConfigError("n_priv and n_aux must be positive")
        if self.query_mode not in QUERY_MODES:
            raise ConfigError(f"query_mode must be one of {QUERY_MODES}")
        if not 0 <= self.dropout_p <= 1:
            raise ConfigError("dropout_p must lie in [0, 1]")
        try:
            self.dp_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def K(self) -> int:
        return self.synth.K

    @property
    def q(self) -> float:
        p = self.privacy
        return p.q if p.q is not None else min(1.0, p.expected_batch / self.data.n_priv)

    @property
    def steps(self) -> int:
        p = self.privacy
        return p.steps if p.steps is not None else p.epochs * math.ceil(1.0 / self.q)

    def dp_config(self) -> DpConfig:
        p = self.privacy
        return DpConfig(q=self.q, steps=self.steps, C=p.C, sigma=p.sigma, delta=p.delta,
                        optimizer=p.optimizer, lr=p.lr, weight_decay=p.weight_decay,
                        seed=self.seed, divisor=p.divisor)

    def kd_config(self) -> KdConfig:
        return replace(self.kd, seed=self.seed)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def full_scale() -> RunConfig:
    """The full-scale accounting setting: 20k/5k split, q=0.0016, 12,500 steps."""
    synth = SynthSpec(n=30000)
    return RunConfig(synth=synth, data=DataConfig(n_priv=20000, n_aux=5000),
                     privacy=PrivacyConfig(sigma=1.0))


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, v in values.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), v, f"{where}.{name}")
        elif isinstance(current, tuple):
            kwargs[name] = tuple(v)
        else:
            kwargs[name] = v
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_dict(values: dict) -> RunConfig:
    return _build(RunConfig, values, "config")


def load(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    """Read a JSON config (``None``: all defaults) and apply ``section.key=value`` overrides."""
    values: dict[str, Any] = {}
    if path is not None:
        try:
            values = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for item in overrides or []:
        apply_override(values, item)
    return from_dict(values)


def apply_override(values: dict, item: str) -> None:
    """``a.b=value`` with ``value`` parsed as JSON when possible, else as a string."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = values
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a scalar")
    node[parts[-1]] = value
