import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roadsonic.filtering import (
    DISCARDED, FilterConfig, FilterPipeline, ema_step, filter_stream, filtered_from_csv,
    filtered_to_csv, is_peak, peak_mask, reduce_window, reject_outliers, reject_peaks,
)
from roadsonic.geometry import NO_ECHO, Burst, NoiseModel, RangeSample, SensorConfig, VehiclePass, synthesize_pass

CFG = SensorConfig()


def make_burst(w, values, period=0.02):
    dt = period / len(values)
    samples = tuple(RangeSample(w * period + j * dt, v, w) for j, v in enumerate(values))
    return Burst(w, sum(s.t_s for s in samples) / len(samples), samples)


def oracle_is_peak(prev, x, nxt, th=0.15):
    above = x / prev - 1.0 > th and x / nxt - 1.0 > th
    below = 1.0 - x / prev > th and 1.0 - x / nxt > th
    return above or below


# --- peak rule --------------------------------------------------------------

VALUES = (0.5, 0.8, 1.0, 1.1, 1.3)


@pytest.mark.parametrize("n", [3, 4, 5])
def test_peak_rule_enumerated(n):
    for seq in itertools.product(VALUES, repeat=n):
        expect = [True] + [not oracle_is_peak(*seq[i - 1:i + 2]) for i in range(1, n - 1)] + [True]
        assert peak_mask(seq, 0.15) == expect, seq


def test_peak_rule_boundary_is_kept():
    # exactly 15% above both neighbours is not a peak
    assert not is_peak(2.0, 2.3, 2.0, 0.15)
    assert is_peak(2.0, 2.31, 2.0, 0.15)
    assert not is_peak(2.0, 1.7, 2.0, 0.15)
    assert is_peak(2.0, 1.69, 2.0, 0.15)


def test_peak_needs_both_neighbours():
    assert not is_peak(1.0, 1.5, 1.45, 0.15)
    assert reject_peaks([1.0, 1.5, 1.0], 0.15) == [1.0, 1.0]
    assert reject_peaks([1.0, 0.5, 1.0, 1.0], 0.15) == [1.0, 1.0, 1.0]


def test_end_readings_never_peaks():
    assert peak_mask([5.0, 1.0, 1.0], 0.15) == [True, True, True]
    assert peak_mask([1.0, 1.0, 5.0], 0.15) == [True, True, True]


# --- outliers and reduction ---------------------------------------------------

def test_reject_outliers_counts():
    valid, removed = reject_outliers([NO_ECHO, 0.1, 1.0, 4.6, 2.0], CFG)
    assert valid == [1.0, 2.0]
    assert removed == 3


def test_reduce_window_majority():
    assert reduce_window([1.0, 2.0, 3.0], 3) == 2.0
    assert reduce_window([1.0, 2.0], 3) is DISCARDED
    assert reduce_window([1.0, 2.0, 3.0, 10.0], 3) == 2.5


def test_default_min_valid_is_majority():
    assert FilterConfig().min_valid(5) == 3
    assert FilterConfig(min_valid_per_window=2).min_valid(5) == 2


finite = st.floats(min_value=0.26, max_value=4.49, allow_nan=False)
reading = st.one_of(finite, st.just(NO_ECHO), st.floats(min_value=4.6, max_value=9.0))


@given(st.lists(reading, min_size=1, max_size=8))
def test_outlier_rejection_idempotent(burst):
    once, _ = reject_outliers(burst, CFG)
    twice, removed = reject_outliers(once, CFG)
    assert twice == once and removed == 0


@given(st.lists(finite, min_size=1, max_size=7), st.randoms())
def test_reduction_permutation_invariant(vals, rnd):
    shuffled = list(vals)
    rnd.shuffle(shuffled)
    assert reduce_window(vals, 1) == reduce_window(shuffled, 1)


@given(st.lists(finite, min_size=3, max_size=6), st.sampled_from([0.25, 0.5, 2.0, 4.0]))
def test_peak_rule_scale_equivariant(vals, c):
    assert peak_mask(vals, 0.15) == peak_mask([c * v for v in vals], 0.15)


# --- EMA --------------------------------------------------------------------

def test_ema_factor_one_is_identity_on_reduced():
    bursts = synthesize_pass(CFG, VehiclePass(), NoiseModel(0.03, 0.05, 0.05, 0.2, seed=4))
    out = filter_stream(bursts, FilterConfig(smoothing_factor=1.0), CFG)
    kept = [s for s in out if not s.discarded]
    assert kept
    assert all(s.value_m == s.reduced_m for s in kept)


def test_ema_factor_zero_holds_seed():
    assert ema_step(0.0, 3.7, 0.0) == 0.0
    bursts = [make_burst(w, [1.0 + w] * 5) for w in range(6)]
    out = filter_stream(bursts, FilterConfig(smoothing_factor=0.0), CFG)
    assert [s.value_m for s in out] == [1.0] * 6


def test_ema_recursion():
    bursts = [make_burst(w, [v] * 5) for w, v in enumerate([2.0, 4.0, 4.0])]
    out = filter_stream(bursts, FilterConfig(smoothing_factor=0.75), CFG)
    assert [s.value_m for s in out] == pytest.approx([2.0, 3.5, 3.875])


def test_ema_bounded_on_random_streams():
    rng = np.random.default_rng(2024)
    streams = rng.uniform(0.3, 4.4, size=(100_000, 12))
    factors = rng.uniform(0.0, 1.0, size=100_000)
    for row, a in zip(streams, factors):
        e = lo = hi = row[0]
        for x in row[1:]:
            e = ema_step(e, x, a)
            lo, hi = min(lo, x), max(hi, x)
            assert lo - 1e-12 <= e <= hi + 1e-12


@settings(max_examples=200)
@given(st.lists(finite, min_size=1, max_size=30), st.floats(min_value=0.0, max_value=1.0))
def test_pipeline_output_within_reduced_range(vals, a):
    bursts = [make_burst(w, [v] * 5) for w, v in enumerate(vals)]
    out = filter_stream(bursts, FilterConfig(smoothing_factor=a), CFG)
    for k, s in enumerate(out):
        seen = vals[:k + 1]
        assert min(seen) - 1e-9 <= s.value_m <= max(seen) + 1e-9


def test_discarded_window_holds_previous_value():
    bursts = [make_burst(0, [2.0] * 5), make_burst(1, [NO_ECHO] * 3 + [2.5, 2.5]),
              make_burst(2, [3.0] * 5)]
    pipe = FilterPipeline(FilterConfig(), CFG)
    out = [pipe.push(b) for b in bursts]
    assert out[1].discarded and out[1].value_m == 2.0
    assert pipe.n_discarded == 1
    assert out[2].value_m == pytest.approx(0.75 * 3.0 + 0.25 * 2.0)


def test_nothing_before_first_valid_window():
    out = filter_stream([make_burst(0, [NO_ECHO] * 5)], FilterConfig(), CFG)
    assert out[0].discarded and math.isnan(out[0].value_m)


def test_peak_removed_before_reduction():
    # 3.0 is a spike between 2.0s; dropping it leaves four equal readings
    out = filter_stream([make_burst(0, [2.0, 2.0, 3.0, 2.0, 2.0])], FilterConfig(), CFG)
    assert len(out[0].readings) == 4 and out[0].reduced_m == 2.0


def test_filter_deterministic_and_csv_round_trip():
    bursts = synthesize_pass(CFG, VehiclePass(), NoiseModel(0.05, 0.1, 0.05, 0.2, seed=9))
    a = filter_stream(bursts, FilterConfig(), CFG)
    b = filter_stream(bursts, FilterConfig(), CFG)
    assert a == b
    back = filtered_from_csv(filtered_to_csv(a))
    assert [s.discarded for s in back] == [s.discarded for s in a]
    for x, y in zip(back, a):
        assert (math.isnan(x.value_m) and math.isnan(y.value_m)) or x.value_m == y.value_m


def test_filter_config_validation():
    with pytest.raises(ValueError):
        FilterConfig(smoothing_factor=1.5)
    with pytest.raises(ValueError):
        reject_peaks([1.0], -0.1)
