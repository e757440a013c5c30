"""KPM telemetry records exchanged between the gNB simulator and the xApps."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields


@dataclass(frozen=True)
class SliceKpm:
    arrival_mbps: float = 0.0
    served_mbps: float = 0.0
    dropped_bytes: int = 0
    mean_sdu_delay_ms: float = 0.0
    max_sdu_delay_ms: float = 0.0
    arrived_bytes: int = 0
    served_bytes: int = 0
    queued_bytes: int = 0
    sdu_count: int = 0

    @property
    def loss_pct(self) -> float:
        return 100.0 * self.dropped_bytes / self.arrived_bytes if self.arrived_bytes else 0.0


@dataclass(frozen=True)
class KpmRecord:
    window_start_ms: float
    window_len_ms: float
    slices: tuple[SliceKpm, SliceKpm]
    active_weight_pct: int | None = None

    def __post_init__(self):
        if self.window_len_ms <= 0:
            raise ValueError("window length must be positive")
        if len(self.slices) != 2:
            raise ValueError("a KPM record carries exactly two slices")

    def to_dict(self) -> dict:
        return {
            "window_start_ms": self.window_start_ms,
            "window_len_ms": self.window_len_ms,
            "active_weight_pct": self.active_weight_pct,
            "slices": [asdict(s) for s in self.slices],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KpmRecord":
        known = {f.name for f in fields(SliceKpm)}
        slices = tuple(SliceKpm(**{k: v for k, v in s.items() if k in known}) for s in d["slices"])
        w = d.get("active_weight_pct")
        return cls(
            window_start_ms=float(d["window_start_ms"]),
            window_len_ms=float(d["window_len_ms"]),
            slices=slices,
            active_weight_pct=None if w is None else int(w),
        )
