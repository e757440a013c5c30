"""Shared test fixtures: random E2 messages and small synthetic delay tables."""
import numpy as np

from slicedrl.core import ActionSpace, DelayTable, QuantizerConfig
from slicedrl.e2bus import Control, ControlAck, Indication, Subscribe, SubscribeAck
from slicedrl.kpm import KpmRecord, SliceKpm

SPACE = ActionSpace()


def random_slice(rng: np.random.Generator) -> SliceKpm:
    return SliceKpm(
        arrival_mbps=float(rng.uniform(0, 300)),
        served_mbps=float(rng.uniform(0, 300)),
        dropped_bytes=int(rng.integers(0, 10**7)),
        mean_sdu_delay_ms=float(rng.exponential(5)),
        max_sdu_delay_ms=float(rng.exponential(50)),
        arrived_bytes=int(rng.integers(0, 10**9)),
        served_bytes=int(rng.integers(0, 10**9)),
        queued_bytes=int(rng.integers(0, 2 * 10**6)),
        sdu_count=int(rng.integers(0, 10**5)),
    )


def random_record(rng: np.random.Generator) -> KpmRecord:
    w = None if rng.random() < 0.2 else int(rng.choice(SPACE.weights_pct))
    return KpmRecord(float(rng.integers(0, 10**6)) * 0.5, float(rng.choice([50.0, 100.0, 1000.0])),
                     (random_slice(rng), random_slice(rng)), w)


def random_message(rng: np.random.Generator):
    kind = int(rng.integers(5))
    if kind == 0:
        return Subscribe(float(rng.choice([0.5, 10.0, 100.0, 1000.0])) * float(rng.integers(1, 20)))
    if kind == 1:
        return SubscribeAck(int(rng.integers(1, 2**31)))
    if kind == 2:
        return Indication(int(rng.integers(1, 2**31)), random_record(rng))
    if kind == 3:
        return Control(int(rng.choice(SPACE.weights_pct)))
    return ControlAck(bool(rng.integers(2)), int(rng.integers(0, 2**40)))


def step_table(thresholds: dict[float, int], quant=QuantizerConfig(), space=SPACE) -> DelayTable:
    """Delay 5 ms at weights >= the state's threshold, 50 ms below it."""
    return DelayTable.from_mapping({
        (s, w): (5.0 if w >= thresholds[s] else 50.0) for s in quant.grid() for w in space.weights_pct
    })
