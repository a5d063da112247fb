import math

import pytest

from roadsonic.detection import (
    CusumConfig, CusumDetector, EventKind, SegmentStats, TrendEvent, best_knee, classify_passes,
    detect_passes, detect_trend_breaks, events_from_jsonl, events_to_jsonl,
    refine_with_second_derivative, z_score,
)
from roadsonic.errors import IncompletePass, InsufficientSegment
from roadsonic.filtering import FilterConfig, FilteredSample, filter_stream
from roadsonic.geometry import NoiseModel, SensorConfig, VehiclePass, ground_truth_events, synthesize_pass

DT = 0.02


def stream_of(values, discarded=()):
    out = []
    for i, v in enumerate(values):
        d = i in discarded
        out.append(FilteredSample(i, i * DT, math.nan if d else v, d, None if d else v))
    return out


def test_constant_stream_no_breaks():
    assert detect_trend_breaks(stream_of([2.0] * 10_000)) == []


def test_three_sigma_step_fires_within_three_windows():
    sigma, step_at = 0.02, 200
    vals = [2.0 + (sigma if i % 2 else -sigma) for i in range(400)]
    for i in range(step_at, 400):
        vals[i] += 3 * sigma
    breaks = detect_trend_breaks(stream_of(vals))
    assert breaks, "no break"
    assert step_at <= breaks[0] <= step_at + 3


def test_knee_relocated_exactly():
    knee = 40
    vals = [4.0 - 0.1 * i if i <= knee else 4.0 - 0.1 * knee for i in range(80)]
    s = stream_of(vals)
    for raw in range(knee - 3, knee + 4):
        idx, refined = refine_with_second_derivative(s, raw)
        assert (idx, refined) == (knee, True)


def test_refinement_keeps_index_on_straight_line():
    s = stream_of([1.0 + 0.05 * i for i in range(50)])
    assert refine_with_second_derivative(s, 25) == (25, False)


def test_segment_stats_match_statistics_module():
    import statistics
    vals = [1.0, 1.2, 0.9, 1.4, 1.1]
    st = SegmentStats.from_values(vals)
    assert st.mean_m == pytest.approx(statistics.mean(vals))
    assert st.sigma_m == pytest.approx(statistics.stdev(vals))


def test_z_score_needs_a_segment():
    st = SegmentStats.from_values([1.0, 1.0])
    with pytest.raises(InsufficientSegment):
        z_score(1.0, st, CusumConfig(min_segment_len=3))
    st.add(1.0)
    # constant segment: sigma is floored, so a 1 cm jump is 2 sigma
    assert z_score(1.01, st, CusumConfig()) == pytest.approx(2.0)


def test_detector_streaming_matches_batch():
    vals = [2.0] * 30 + [3.0 - 0.05 * i for i in range(20)] + [2.0] * 30
    s = stream_of(vals)
    det = CusumDetector()
    streamed = [b for i, x in enumerate(s) if (b := det.push(i, x)) is not None]
    assert streamed == detect_trend_breaks(s)


def test_discarded_transitions_are_breaks():
    s = stream_of([2.0] * 50, discarded=set(range(20, 25)))
    breaks = detect_trend_breaks(s)
    assert 25 in breaks


def test_best_knee_picks_true_corner():
    vals = [4.0 - 0.1 * i if i <= 12 else 2.8 for i in range(30)]
    s = stream_of(vals)
    k, slope = best_knee(s, 0, 29, [8, 12, 17])
    assert k == 12
    assert slope == pytest.approx(-0.1 / DT)


@pytest.mark.parametrize("angle", [30, 45, 60, 135, 150])
@pytest.mark.parametrize("speed", [10.0, 20.0])
def test_noiseless_events_near_ground_truth(angle, speed):
    cfg = SensorConfig(beam_angle_deg=angle)
    vp = VehiclePass(speed_mps=speed, lateral_near_m=1.0, width_m=1.6)
    gt = ground_truth_events(cfg, vp)
    stream = filter_stream(synthesize_pass(cfg, vp, NoiseModel()), FilterConfig(), cfg)
    (p,) = detect_passes(stream, angle)
    # echo edges are sub-window, the ramp/side corner is window resolution
    assert p.a.t_s == pytest.approx(gt.t_a, abs=cfg.reading_period_s)
    if angle < 90:
        assert p.b.t_s == pytest.approx(gt.t_b, abs=1.5 * DT)
        assert p.c.t_s == pytest.approx(gt.t_c, abs=cfg.reading_period_s)
    else:
        assert p.c.t_s == pytest.approx(gt.t_c, abs=1.5 * DT)
        assert p.back_end is not None and p.back_end.kind is EventKind.BACK_END


def test_perpendicular_pass_edges():
    cfg = SensorConfig(beam_angle_deg=90)
    vp = VehiclePass()
    gt = ground_truth_events(cfg, vp)
    stream = filter_stream(synthesize_pass(cfg, vp, NoiseModel()), FilterConfig(), cfg)
    (p,) = detect_passes(stream, 90)
    assert p.a == p.b or p.a.t_s == p.b.t_s
    assert p.dwell_s == pytest.approx(gt.t_c - gt.t_b, abs=2 * cfg.reading_period_s)


def test_empty_stream_is_incomplete():
    with pytest.raises(IncompletePass):
        classify_passes([], stream_of([math.nan] * 20, discarded=set(range(20))), 30)


def test_events_jsonl_round_trip():
    ev = [TrendEvent(EventKind.FRONT_START, 3, 0.06), TrendEvent(EventKind.SIDE_END, 9, 0.18, True)]
    assert events_from_jsonl(events_to_jsonl(ev)) == ev


def test_config_validation():
    with pytest.raises(ValueError):
        CusumConfig(z_threshold=0)
    with pytest.raises(ValueError):
        CusumConfig(min_segment_len=1)
