"""Policy handles the RC xApp can serve, and the policy artifact file.

The artifact is a CSV ``state_mbps,weight_pct`` preceded by one ``#`` line of
JSON metadata.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

from .core import QuantizerConfig, quantize_arrival_rate


class PolicyError(LookupError):
    pass


@dataclass
class TrainedPolicy:
    table: dict[float, int]
    quant: QuantizerConfig = field(default_factory=QuantizerConfig)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.table = {float(k): int(v) for k, v in self.table.items()}
        missing = [s for s in self.quant.grid() if s not in self.table]
        if missing:
            raise PolicyError(f"policy does not cover states {missing}")

    def weight_for_state(self, state_mbps: float) -> int:
        try:
            return self.table[float(state_mbps)]
        except KeyError:
            raise PolicyError(f"no policy entry for state {state_mbps}") from None

    def __call__(self, measured_rate_mbps: float) -> int:
        state = quantize_arrival_rate(measured_rate_mbps, self.quant)
        return self.weight_for_state(state.quantized_rate_mbps)

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        buf.write("# " + json.dumps(self.metadata, sort_keys=True) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["state_mbps", "weight_pct"])
        for s in sorted(self.table):
            w.writerow([f"{s:g}", self.table[s]])
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv_text())

    @classmethod
    def load(cls, path: str | Path, quant: QuantizerConfig | None = None) -> "TrainedPolicy":
        lines = Path(path).read_text().splitlines()
        meta = {}
        if lines and lines[0].startswith("#"):
            meta = json.loads(lines[0][1:].strip() or "{}")
            lines = lines[1:]
        rows = list(csv.DictReader(lines))
        table = {float(r["state_mbps"]): int(r["weight_pct"]) for r in rows}
        if quant is None:
            q = meta.get("quantizer")
            quant = QuantizerConfig(**q) if q else QuantizerConfig()
        return cls(table, quant, meta)


@dataclass(frozen=True)
class FixedWeight:
    weight_pct: int

    def __call__(self, measured_rate_mbps: float) -> int:
        return self.weight_pct


class ProportionalFair:
    """Marker: no RC control, the gNB runs its proportional-fair scheduler."""

    def __repr__(self):
        return "ProportionalFair()"
