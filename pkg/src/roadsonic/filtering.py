"""Burst filtering and EMA smoothing.

Per window: drop out-of-range readings, drop single-reading peaks/dips,
reduce the survivors to their median, then smooth the reduced values with
an exponential moving average.  State is one EMA value plus the current
burst, so memory does not grow with the stream.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import statistics
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .geometry import NO_ECHO, Burst, Reading, SensorConfig

log = logging.getLogger(__name__)

DISCARDED = None


@dataclass(frozen=True)
class FilterConfig:
    smoothing_factor: float = 0.75
    peak_threshold_frac: float = 0.15
    # 3 of 5: the window survives only if valid readings outnumber abnormal ones
    min_valid_per_window: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.smoothing_factor <= 1.0:
            raise ValueError("smoothing_factor must be in [0, 1]")
        if self.peak_threshold_frac < 0:
            raise ValueError("peak_threshold_frac must be >= 0")

    def min_valid(self, burst_size: int) -> int:
        if self.min_valid_per_window is not None:
            return self.min_valid_per_window
        return burst_size // 2 + 1


@dataclass(frozen=True)
class FilteredSample:
    window_index: int
    t_s: float
    value_m: float
    discarded: bool = False
    # median of the surviving readings, None for discarded windows
    reduced_m: Optional[float] = None
    # surviving (t_s, distance_m) readings; kept so estimators can work below window resolution
    readings: tuple[tuple[float, float], ...] = field(default=(), repr=False)
    n_raw: int = 0


def ema_step(prev: float, measured: float, smoothing_factor: float) -> float:
    return smoothing_factor * measured + (1.0 - smoothing_factor) * prev


def reject_outliers(burst: Sequence[Reading], cfg: SensorConfig) -> tuple[list[float], int]:
    """Keep readings inside the sensor range; returns (valid, n_removed)."""
    valid = [
        float(x) for x in burst
        if x is not NO_ECHO and x is not None and not math.isnan(x)
        and cfg.range_min_m <= x <= cfg.range_max_m
    ]
    return valid, len(burst) - len(valid)


def is_peak(prev: float, x: float, nxt: float, threshold_frac: float) -> bool:
    up = 1.0 + threshold_frac
    down = 1.0 - threshold_frac
    return (x > up * prev and x > up * nxt) or (x < down * prev and x < down * nxt)


def peak_mask(seq: Sequence[float], threshold_frac: float) -> list[bool]:
    """True where a reading is a single-sample peak or dip against its raw neighbours."""
    keep = [True] * len(seq)
    for i in range(1, len(seq) - 1):
        if is_peak(seq[i - 1], seq[i], seq[i + 1], threshold_frac):
            keep[i] = False
    return keep


def reject_peaks(seq: Sequence[float], threshold_frac: float) -> list[float]:
    if threshold_frac < 0:
        raise ValueError("threshold_frac must be >= 0")
    return [x for x, k in zip(seq, peak_mask(seq, threshold_frac)) if k]


def reduce_window(valid: Sequence[float], min_valid: int) -> Optional[float]:
    """Median of the surviving readings, or DISCARDED (None) if too few survive."""
    if len(valid) < max(min_valid, 1):
        return DISCARDED
    return float(statistics.median(valid))


class FilterPipeline:
    """Stateful filter for one sensor stream; feed bursts in time order."""

    def __init__(self, fcfg: FilterConfig, scfg: SensorConfig):
        self.fcfg = fcfg
        self.scfg = scfg
        self._ema: Optional[float] = None
        self.n_discarded = 0

    @property
    def ema(self) -> Optional[float]:
        return self._ema

    def push(self, burst: Burst) -> FilteredSample:
        times, values = [], []
        for s in burst.samples:
            if s.distance_m is NO_ECHO:
                continue
            if self.scfg.range_min_m <= s.distance_m <= self.scfg.range_max_m:
                times.append(s.t_s)
                values.append(float(s.distance_m))
        keep = peak_mask(values, self.fcfg.peak_threshold_frac)
        readings = tuple((t, x) for t, x, k in zip(times, values, keep) if k)
        reduced = reduce_window([x for _, x in readings], self.fcfg.min_valid(len(burst.samples)))

        if reduced is DISCARDED:
            self.n_discarded += 1
            value = self._ema if self._ema is not None else math.nan
            return FilteredSample(burst.window_index, burst.t_s, value, True, None,
                                  readings, len(burst.samples))
        if self._ema is None:
            self._ema = reduced
        else:
            self._ema = ema_step(self._ema, reduced, self.fcfg.smoothing_factor)
        return FilteredSample(burst.window_index, burst.t_s, self._ema, False, reduced,
                              readings, len(burst.samples))

    def reset(self) -> None:
        self._ema = None


def filter_stream(bursts: Iterable[Burst], fcfg: FilterConfig,
                  scfg: SensorConfig) -> list[FilteredSample]:
    pipe = FilterPipeline(fcfg, scfg)
    out = [pipe.push(b) for b in bursts]
    if pipe.n_discarded:
        log.debug("discarded %d of %d windows", pipe.n_discarded, len(out))
    return out


def filtered_to_csv(samples: Iterable[FilteredSample]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["window_index", "t_s", "distance_m", "discarded"])
    for s in samples:
        value = NO_ECHO.value if math.isnan(s.value_m) else repr(s.value_m)
        writer.writerow([s.window_index, repr(s.t_s), value, int(s.discarded)])
    return buf.getvalue()


def filtered_from_csv(text: str) -> list[FilteredSample]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        raw = row["distance_m"]
        value = math.nan if raw == NO_ECHO.value else float(raw)
        discarded = row.get("discarded", "0") in ("1", "true", "True")
        out.append(FilteredSample(int(row["window_index"]), float(row["t_s"]), value,
                                  discarded, None if discarded else value))
    return out
