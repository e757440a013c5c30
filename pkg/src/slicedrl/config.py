"""Run configuration: one file (TOML or JSON) plus command-line overrides.

The canonical JSON form of the merged configuration is hashed; the hash is
written into every output so results can be traced to their settings.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .core import ActionSpace, QuantizerConfig, RewardSpec
from .dqn import DqnConfig
from .e2bus import DEFAULT_PORT
from .ransim import GnbConfig

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


@dataclass(frozen=True)
class TrafficConfig:
    slice2_rate_mbps: float = 117.0
    packet_bytes: int = 1500
    slice1_jitter_pct: float = 0.0
    slice2_jitter_pct: float = 0.0
    kpm_period_ms: float = 100.0
    dataset_window_s: float = 30.0
    eval_duration_s: float = 300.0
    eval_rates_mbps: tuple[float, ...] = tuple(float(r) for r in range(20, 141, 10))


@dataclass(frozen=True)
class TransportConfig:
    mode: str = "inprocess"
    host: str = "127.0.0.1"
    port: int = DEFAULT_PORT

    def __post_init__(self):
        if self.mode not in ("inprocess", "tcp"):
            raise ValueError(f"unknown transport {self.mode!r}")


@dataclass(frozen=True)
class RunConfig:
    gnb: GnbConfig = field(default_factory=GnbConfig)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    actions: ActionSpace = field(default_factory=ActionSpace)
    reward: RewardSpec = field(default_factory=RewardSpec)
    traffic: TrafficConfig = field(default_factory=TrafficConfig)
    dqn: DqnConfig = field(default_factory=DqnConfig)
    transport: TransportConfig = field(default_factory=TransportConfig)
    seed: int = 0
    workers: int = 0

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in d:
                continue
            value = d[f.name]
            sub = _SECTIONS.get(f.name)
            kwargs[f.name] = _build(sub, value) if sub is not None else value
        return cls(**kwargs)

    def replace(self, **changes) -> "RunConfig":
        """Override nested fields with ``section__field=value`` keywords."""
        top, nested = {}, {}
        for key, value in changes.items():
            if value is None:
                continue
            if "__" in key:
                sec, name = key.split("__", 1)
                nested.setdefault(sec, {})[name] = value
            else:
                top[key] = value
        for sec, vals in nested.items():
            top[sec] = dataclasses.replace(getattr(self, sec), **vals)
        return dataclasses.replace(self, **top)


_SECTIONS = {
    "gnb": GnbConfig,
    "quantizer": QuantizerConfig,
    "actions": ActionSpace,
    "reward": RewardSpec,
    "traffic": TrafficConfig,
    "dqn": DqnConfig,
    "transport": TransportConfig,
}


def _build(cls, value: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(value) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    value = {k: tuple(v) if isinstance(v, list) else v for k, v in value.items()}
    return cls(**value)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if path.suffix == ".toml":
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    else:
        data = json.loads(path.read_text())
    return RunConfig.from_dict(data)
