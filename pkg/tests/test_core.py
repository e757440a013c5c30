import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from slicedrl.core import (
    ActionSpace,
    ConfigurationError,
    DelayTable,
    IncompleteDatasetError,
    QuantizerConfig,
    RewardSpec,
    SliceState,
    encode_state,
    feasible_set,
    oracle_policy,
    quantize_arrival_rate,
    quantize_rates,
    reward,
    target_weight,
    weight_of_action,
)

Q = QuantizerConfig()
SPACE = ActionSpace()
SPEC = RewardSpec()


def q(raw, cfg=Q):
    return quantize_arrival_rate(raw, cfg).quantized_rate_mbps


@pytest.mark.parametrize("raw,expected", [(63, 60), (150, 140), (5, 10), (10, 10), (0, 10), (65, 70), (64.99, 60)])
def test_quantize_examples(raw, expected):
    assert q(raw) == expected


def test_quantize_keeps_raw():
    st_ = quantize_arrival_rate(63.2, Q)
    assert st_ == SliceState(63.2, 60.0)


@pytest.mark.parametrize("bad", [-1.0, float("nan"), float("inf")])
def test_quantize_rejects_bad_input(bad):
    with pytest.raises(ValueError):
        quantize_arrival_rate(bad, Q)


def test_quantize_exhaustive_grid_and_idempotent():
    grid = set(Q.grid())
    assert len(grid) == 14
    for i in range(2801):
        raw = i / 10
        v = q(raw)
        assert v in grid
        assert q(v) == v


@given(st.floats(min_value=0, max_value=1e4, allow_nan=False))
def test_quantize_matches_vectorised(raw):
    assert quantize_rates([raw], Q)[0] == q(raw)


@given(st.floats(min_value=0, max_value=1e3, allow_nan=False))
def test_quantize_nearest_grid_point(raw):
    v = q(raw)
    # nearest grid point, ties upward
    best = min(Q.grid(), key=lambda g: (abs(g - raw), -g))
    assert v == best


def test_quantizer_validation():
    with pytest.raises(ConfigurationError):
        QuantizerConfig(step_s=0)
    with pytest.raises(ConfigurationError):
        QuantizerConfig(min_L=50, max_H=40)
    with pytest.raises(ConfigurationError):
        QuantizerConfig(step_s=7)
    single = QuantizerConfig(min_L=50, max_H=50)
    assert single.grid() == [50.0]
    assert q(0, single) == q(1000, single) == 50.0
    assert QuantizerConfig(step_s=2.5, min_L=10, max_H=20).grid() == [10.0, 12.5, 15.0, 17.5, 20.0]


def test_action_space():
    assert len(SPACE) == 17
    assert weight_of_action(0, SPACE) == 10
    assert weight_of_action(16, SPACE) == 90
    assert SPACE.index_of(50) == 8
    assert 37 not in SPACE
    with pytest.raises(IndexError):
        weight_of_action(17, SPACE)
    with pytest.raises(IndexError):
        weight_of_action(-1, SPACE)
    for bad in [(), (10, 10), (0, 50), (50, 100), (30, 20)]:
        with pytest.raises(ConfigurationError):
            ActionSpace(bad)


def _table(delays_by_weight, state=60.0):
    return DelayTable.from_mapping({(state, w): d for w, d in delays_by_weight.items()})


def test_feasible_set_examples():
    space = ActionSpace((10, 30, 50, 70))
    t = _table({10: 25, 30: 12, 50: 8, 70: 6})
    assert feasible_set(60.0, t, SPEC, space) == {50, 70}
    assert feasible_set(SliceState(61.0, 60.0), t, SPEC, space) == {50, 70}
    assert feasible_set(60.0, _table({10: 11, 30: 12, 50: 10, 70: 99}), SPEC, space) == frozenset()
    assert feasible_set(60.0, _table({10: 1, 30: 2, 50: 3, 70: 4}), SPEC, space) == {10, 30, 50, 70}


def test_feasible_set_missing_cell():
    t = _table({10: 1.0})
    with pytest.raises(IncompleteDatasetError) as err:
        feasible_set(60.0, t, SPEC, ActionSpace((10, 20)))
    assert (err.value.state_mbps, err.value.weight_pct) == (60.0, 20)
    assert "60" in str(err.value) and "20" in str(err.value)


def test_reward_examples():
    assert reward(50, {50, 70}) == 0
    assert reward(90, {50, 70}) == -40
    assert reward(90, set()) == 0
    assert reward(10, set()) == -80
    assert target_weight(set()) == 90
    with pytest.raises(ValueError):
        reward(37, {50})


@given(st.sampled_from(SPACE.weights_pct), st.sets(st.sampled_from(SPACE.weights_pct)))
def test_reward_bounds(a, feasible):
    r = reward(a, feasible)
    assert -80 <= r <= 0
    assert (r == 0) == (a == target_weight(feasible))


def test_encode_state():
    assert encode_state(60.0, Q)[0] == pytest.approx(50 / 130)
    assert encode_state(10.0, Q)[0] == 0.0
    assert encode_state(140.0, Q)[0] == 1.0
    assert encode_state(SliceState(61, 60), Q).shape == (1,)


def _random_table(rng):
    return DelayTable.from_mapping({
        (s, w): float(rng.uniform(0, 20)) for s in Q.grid() for w in SPACE.weights_pct
    })


def test_reward_argmax_equals_oracle_on_random_tables():
    rng = np.random.default_rng(3)
    for _ in range(20):
        t = _random_table(rng)
        orc = oracle_policy(t)
        for s in Q.grid():
            f = feasible_set(s, t, SPEC)
            rewards = [reward(w, f) for w in SPACE.weights_pct]
            assert SPACE.weights_pct[int(np.argmax(rewards))] == orc[s]


def test_delay_table_completeness():
    t = DelayTable()
    t[10, 10] = 1.0
    assert t[10.0, 10] == 1.0
    with pytest.raises(IncompleteDatasetError):
        t.check_complete(Q, SPACE)
    with pytest.raises(IncompleteDatasetError):
        t[20.0, 10]
    assert t.states() == [10.0]


def test_reward_spec_validation():
    with pytest.raises(ConfigurationError):
        RewardSpec(delay_threshold_ms=0)
    with pytest.raises(ConfigurationError):
        RewardSpec(infeasible_fallback="min")
    assert math.isclose(RewardSpec().delay_threshold_ms, 10.0)
