"""Trend-change detection on the smoothed distance stream.

A running mean/sigma is kept over the current trend segment and a sample
whose z-score leaves the band starts a new segment.  Breaks are then moved
to the nearest corner of the profile using discrete second differences.
Each echo run gives the front start (A) and side end (C) at its edges; the
ramp/side corner (B, or the back-ramp start for rear beams) is the break
candidate whose continuous ramp+flat fit leaves the least residual.
"""
from __future__ import annotations

import enum
import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import IncompletePass, InsufficientSegment
from .filtering import FilteredSample

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CusumConfig:
    z_threshold: float = 3.0
    min_segment_len: int = 3
    sigma_floor_m: float = 0.005
    refine_radius: int = 5
    # a piece is flat when |dl/dt| is below both of these (m/s, fraction of steepest piece)
    flat_slope_mps: float = 1.5
    flat_ratio: float = 0.3
    # dropout runs shorter than this inside a pass are bridged
    min_gap_windows: int = 3
    # cumulative z-sum: per-sample drift allowance and decision level
    drift_k: float = 0.5
    cusum_h: float = 5.0

    def __post_init__(self):
        if self.z_threshold <= 0:
            raise ValueError("z_threshold must be > 0")
        if self.min_segment_len < 2:
            raise ValueError("min_segment_len must be >= 2")
        if self.sigma_floor_m <= 0:
            raise ValueError("sigma_floor_m must be > 0")


class EventKind(str, enum.Enum):
    FRONT_START = "FRONT_START"
    FRONT_TO_SIDE = "FRONT_TO_SIDE"
    SIDE_END = "SIDE_END"
    BACK_START = "BACK_START"
    BACK_END = "BACK_END"


@dataclass(frozen=True)
class TrendEvent:
    kind: EventKind
    window_index: int
    t_s: float
    refined: bool = False

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "window_index": self.window_index,
                "t_s": self.t_s, "refined": self.refined}


@dataclass
class SegmentStats:
    """Welford accumulator over the windows of the current trend."""

    start_index: int = 0
    n: int = 0
    mean_m: float = 0.0
    _m2: float = 0.0

    def add(self, x: float) -> None:
        self.n += 1
        d = x - self.mean_m
        self.mean_m += d / self.n
        self._m2 += d * (x - self.mean_m)

    @property
    def sigma_m(self) -> float:
        if self.n < 2:
            return 0.0
        return math.sqrt(max(self._m2, 0.0) / (self.n - 1))

    @classmethod
    def from_values(cls, values: Iterable[float], start_index: int = 0) -> "SegmentStats":
        st = cls(start_index)
        for v in values:
            st.add(v)
        return st


def z_score(sample: float, stats: SegmentStats, cfg: CusumConfig = CusumConfig()) -> float:
    if stats.n < cfg.min_segment_len:
        raise InsufficientSegment(
            f"segment has {stats.n} members, need {cfg.min_segment_len}", n=stats.n)
    return (sample - stats.mean_m) / max(stats.sigma_m, cfg.sigma_floor_m)


class _Channel:
    """Running stats plus two-sided cumulative z-sums for one signal."""

    def __init__(self, index: int):
        self.stats = SegmentStats(index)
        self.pos = self.neg = 0.0
        self.pos_start = self.neg_start = index

    def test(self, index: int, x: float, cfg: CusumConfig) -> Optional[int]:
        """Change index if ``x`` breaks the trend, else None (and absorb x)."""
        if self.stats.n >= cfg.min_segment_len:
            z = z_score(x, self.stats, cfg)
            if abs(z) > cfg.z_threshold:
                return index
            if self.pos == 0.0:
                self.pos_start = index
            if self.neg == 0.0:
                self.neg_start = index
            self.pos = max(0.0, self.pos + z - cfg.drift_k)
            self.neg = max(0.0, self.neg - z - cfg.drift_k)
            if self.pos > cfg.cusum_h:
                return self.pos_start
            if self.neg > cfg.cusum_h:
                return self.neg_start
        self.stats.add(x)
        return None


class CusumDetector:
    """Streaming two-sided break detector; one instance per stream.

    Each sample is z-scored against the running mean/sigma of the current
    segment, on the level and on the first difference, so both steps and
    slope changes (ramp to flat) start a new segment.  A break fires on a
    single |z| above the threshold or when the cumulative z-sum drifts
    past ``cusum_h``; in the latter case the reported index is where the
    drift began.
    """

    def __init__(self, cfg: CusumConfig = CusumConfig()):
        self.cfg = cfg
        self.level: Optional[_Channel] = None
        self.slope: Optional[_Channel] = None
        self._prev: Optional[float] = None
        self._in_gap: Optional[bool] = None  # None until the first sample

    @property
    def stats(self) -> Optional[SegmentStats]:
        return self.level.stats if self.level else None

    def _restart(self, index: int, x: float) -> None:
        self.level = _Channel(index)
        self.level.stats.add(x)
        self.slope = _Channel(index)
        self._prev = x

    def push(self, index: int, sample: FilteredSample) -> Optional[int]:
        if sample.discarded:
            was_valid = self._in_gap is False
            self._in_gap = True
            self.level = self.slope = None
            return index if was_valid else None

        x = sample.value_m
        if self._in_gap is not False:
            entering = self._in_gap is True
            self._in_gap = False
            self._restart(index, x)
            return index if entering else None

        start = self.level.stats.start_index
        hit = self.level.test(index, x, self.cfg)
        hit_slope = self.slope.test(index, x - self._prev, self.cfg)
        self._prev = x
        found = [h for h in (hit, hit_slope) if h is not None]
        if found:
            self._restart(index, x)
            return max(min(found), start + 1)
        return None


def detect_trend_breaks(stream: Sequence[FilteredSample],
                        cfg: CusumConfig = CusumConfig()) -> list[int]:
    det = CusumDetector(cfg)
    breaks = []
    for i, s in enumerate(stream):
        b = det.push(i, s)
        if b is not None:
            breaks.append(b)
    return breaks


def _valid_run(stream: Sequence[FilteredSample], i: int) -> tuple[int, int]:
    lo = hi = i
    while lo > 0 and not stream[lo - 1].discarded:
        lo -= 1
    while hi < len(stream) - 1 and not stream[hi + 1].discarded:
        hi += 1
    return lo, hi


def second_difference(stream: Sequence[FilteredSample], i: int, h: int) -> float:
    """(y[i+h] - 2 y[i] + y[i-h]) / h; peaks at the corner of a ramp/flat join."""
    return (stream[i + h].value_m - 2.0 * stream[i].value_m + stream[i - h].value_m) / h


def refine_with_second_derivative(stream: Sequence[FilteredSample], raw_break: int,
                                  radius: int = 5, floor_m: float = 1e-9,
                                  noise_mult: float = 2.0, stencil: int = 2) -> tuple[int, bool]:
    """Move a break to the strongest |second difference| within ``radius``.

    Returns ``(index, refined)``.  The index is unchanged when the
    neighbourhood leaves the stream, the break sits in discarded windows,
    or no extremum stands above ``noise_mult`` times the median over the
    valid run.  The stencil shrinks to 1 next to the ends of a valid run.
    """
    n = len(stream)
    if raw_break - radius < 0 or raw_break + radius >= n:
        log.debug("refinement neighbourhood of %d out of bounds", raw_break)
        return raw_break, False
    if stream[raw_break].discarded:
        return raw_break, False
    run_lo, run_hi = _valid_run(stream, raw_break)
    lo = max(raw_break - radius, run_lo + 1)
    hi = min(raw_break + radius, run_hi - 1)
    if lo > hi:
        return raw_break, False
    d2 = {
        i: second_difference(stream, i, max(1, min(stencil, i - run_lo, run_hi - i)))
        for i in range(lo, hi + 1)
    }
    best = max(d2, key=lambda i: (abs(d2[i]), -abs(i - raw_break)))
    # noise level from the whole run; the neighbourhood itself is dominated by the corner
    mags = [
        abs(second_difference(stream, i, max(1, min(stencil, i - run_lo, run_hi - i))))
        for i in range(run_lo + 1, run_hi)
    ]
    level = noise_mult * statistics.median(mags)
    if abs(d2[best]) <= max(floor_m, level):
        return raw_break, False
    return best, True


def _edge_in(stream: Sequence[FilteredSample], start: int, reading_period: float) -> float:
    """Sub-window time at which echoes start, from the surviving readings."""
    times = []
    if start > 0 and stream[start - 1].discarded:
        times.extend(t for t, _ in stream[start - 1].readings)
    times.extend(t for t, _ in stream[start].readings)
    if not times:
        return stream[start].t_s
    return min(times) - 0.5 * reading_period


def _edge_out(stream: Sequence[FilteredSample], end: int, reading_period: float) -> float:
    times = [t for t, _ in stream[end].readings]
    if end + 1 < len(stream) and stream[end + 1].discarded:
        times.extend(t for t, _ in stream[end + 1].readings)
    if not times:
        return stream[end].t_s
    return max(times) + 0.5 * reading_period


def _reading_period(stream: Sequence[FilteredSample]) -> float:
    for s in stream:
        if len(s.readings) >= 2:
            return s.readings[1][0] - s.readings[0][0]
    if len(stream) >= 2:
        return stream[1].t_s - stream[0].t_s
    return 0.0


def slope(points: Sequence[tuple[float, float]]) -> Optional[float]:
    if len(points) < 2:
        return None
    mt = sum(t for t, _ in points) / len(points)
    my = sum(y for _, y in points) / len(points)
    sxx = sum((t - mt) ** 2 for t, _ in points)
    if sxx == 0.0:
        return None
    return sum((t - mt) * (y - my) for t, y in points) / sxx


def pass_runs(stream: Sequence[FilteredSample], cfg: CusumConfig) -> list[tuple[int, int]]:
    """Valid-window runs with short dropouts bridged, each one candidate pass."""
    runs = []
    i, n = 0, len(stream)
    while i < n:
        if stream[i].discarded:
            i += 1
            continue
        lo, hi = _valid_run(stream, i)
        if runs:
            prev_lo, prev_hi = runs[-1]
            if lo - prev_hi - 1 < cfg.min_gap_windows:
                runs[-1] = (prev_lo, hi)
                i = hi + 1
                continue
        runs.append((lo, hi))
        i = hi + 1
    return [r for r in runs if r[1] - r[0] + 1 >= cfg.min_segment_len]


def _pieces(stream, lo, hi, cuts, cfg):
    """Split [lo, hi] at ``cuts`` and label each piece NEG / FLAT / POS."""
    bounds = [lo] + sorted(c for c in set(cuts) if lo < c < hi) + [hi]
    slopes = []
    for a, b in zip(bounds, bounds[1:]):
        pts = [(stream[i].t_s, stream[i].value_m) for i in range(a, b + 1) if not stream[i].discarded]
        slopes.append(slope(pts))
    steepest = max((abs(m) for m in slopes if m is not None), default=0.0)
    flat_below = max(cfg.flat_slope_mps, cfg.flat_ratio * steepest)
    pieces = []
    for a, b, m in zip(bounds, bounds[1:], slopes):
        if m is None:
            label = None
        elif m <= -flat_below:
            label = "NEG"
        elif m >= flat_below:
            label = "POS"
        else:
            label = "FLAT"
        pieces.append([a, b, label])
    merged = []
    for p in pieces:
        if merged and (p[2] is None or merged[-1][2] == p[2]):
            merged[-1][1] = p[1]
        elif merged and merged[-1][2] is None:
            merged[-1][1:] = p[1:]
        else:
            merged.append(p)
    return merged


def best_knee(stream: Sequence[FilteredSample], lo: int, hi: int, candidates: Iterable[int],
              rear: bool = False) -> Optional[tuple[int, float]]:
    """Pick the candidate break that best splits [lo, hi] into ramp + flat.

    Each candidate k is scored by a continuous two-piece fit of the reduced
    window values, ``y = level + b * min(t - t_k, 0)`` (``max`` for a rear
    ramp).  Returns (k, slope) for the lowest residual, or None.
    """
    rows = [(s.t_s, s.reduced_m) for s in stream[lo:hi + 1]
            if not s.discarded and s.reduced_m is not None]
    if len(rows) < 4:
        return None
    t = np.array([r[0] for r in rows])
    y = np.array([r[1] for r in rows])
    best = None
    for k in sorted(set(candidates)):
        if not lo < k < hi:
            continue
        x = np.maximum(t - stream[k].t_s, 0.0) if rear else np.minimum(t - stream[k].t_s, 0.0)
        if np.count_nonzero(x) < 1:
            continue
        X = np.column_stack([np.ones_like(x), x])
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        r = y - X @ coef
        sse = float(r @ r)
        if best is None or sse < best[0]:
            best = (sse, k, float(coef[1]))
    return None if best is None else (best[1], best[2])


@dataclass
class PassEvents:
    a: TrendEvent
    b: TrendEvent
    c: TrendEvent
    back_start: Optional[TrendEvent] = None
    back_end: Optional[TrendEvent] = None
    run: tuple[int, int] = field(default=(0, 0))

    @property
    def dwell_s(self) -> float:
        return self.c.t_s - self.b.t_s

    def events(self) -> list[TrendEvent]:
        out = [self.a, self.b, self.c]
        out += [e for e in (self.back_start, self.back_end) if e is not None]
        return out


def classify_passes(breaks: Sequence[int], stream: Sequence[FilteredSample],
                    beam_angle_deg: float, cfg: CusumConfig = CusumConfig(),
                    refined: Iterable[int] = ()) -> list[PassEvents]:
    refined = set(refined)
    dt_r = _reading_period(stream)
    passes = []
    for lo, hi in pass_runs(stream, cfg):
        # knee candidates: every break in the run and its refinement neighbourhood
        near = {b + d for b in breaks if lo < b < hi
                for d in range(-cfg.refine_radius, cfg.refine_radius + 1)}
        t_in = _edge_in(stream, lo, dt_r)
        t_out = _edge_out(stream, hi, dt_r)
        start = TrendEvent(EventKind.FRONT_START, lo, t_in)
        if beam_angle_deg < 90.0:
            knee = best_knee(stream, lo, hi, near)
            if knee is None or knee[1] > -cfg.flat_slope_mps:
                continue
            k = knee[0]
            passes.append(PassEvents(
                start,
                TrendEvent(EventKind.FRONT_TO_SIDE, k, stream[k].t_s, k in refined),
                TrendEvent(EventKind.SIDE_END, hi, t_out),
                run=(lo, hi)))
        elif beam_angle_deg == 90.0:
            pieces = _pieces(stream, lo, hi, [b for b in breaks if lo <= b <= hi], cfg)
            if "FLAT" not in (p[2] for p in pieces):
                continue
            passes.append(PassEvents(
                start, TrendEvent(EventKind.FRONT_TO_SIDE, lo, t_in),
                TrendEvent(EventKind.SIDE_END, hi, t_out), run=(lo, hi)))
        else:
            knee = best_knee(stream, lo, hi, near, rear=True)
            if knee is None or knee[1] < cfg.flat_slope_mps:
                continue
            k = knee[0]
            c = TrendEvent(EventKind.SIDE_END, k, stream[k].t_s, k in refined)
            passes.append(PassEvents(
                start, TrendEvent(EventKind.FRONT_TO_SIDE, lo, t_in), c,
                TrendEvent(EventKind.BACK_START, k, c.t_s, c.refined),
                TrendEvent(EventKind.BACK_END, hi, t_out), run=(lo, hi)))
    if not passes:
        raise IncompletePass("no complete A/B/C pattern in stream", beam_angle_deg=beam_angle_deg)
    return passes


def classify_events(breaks: Sequence[int], stream: Sequence[FilteredSample],
                    beam_angle_deg: float, cfg: CusumConfig = CusumConfig()) -> list[TrendEvent]:
    return [e for p in classify_passes(breaks, stream, beam_angle_deg, cfg) for e in p.events()]


def detect_passes(stream: Sequence[FilteredSample], beam_angle_deg: float,
                  cfg: CusumConfig = CusumConfig()) -> list[PassEvents]:
    """Full event-detection stage: breaks, refinement, classification."""
    raw = detect_trend_breaks(stream, cfg)
    breaks, refined = [], set()
    for b in raw:
        idx, ok = refine_with_second_derivative(
            stream, b, cfg.refine_radius, floor_m=cfg.sigma_floor_m)
        breaks.append(idx)
        if ok:
            refined.add(idx)
    # unrefined positions stay in as knee candidates; the ramp fit arbitrates
    return classify_passes(sorted(set(breaks) | set(raw)), stream, beam_angle_deg, cfg, refined)


def events_to_jsonl(events: Iterable[TrendEvent]) -> str:
    return "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in events)


def events_from_jsonl(text: str) -> list[TrendEvent]:
    out = []
    for line in text.splitlines():
        if line.strip():
            d = json.loads(line)
            out.append(TrendEvent(EventKind(d["kind"]), d["window_index"], d["t_s"], d["refined"]))
    return out
