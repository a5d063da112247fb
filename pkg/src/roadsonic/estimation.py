"""Speed and length from one module's detected events.

Speed comes from the slope of the sloped section (front ramp A..B for
beams facing oncoming traffic, back ramp C..end for rear-facing beams):
``v = |dl/dt| * |cos(angle)|``.  Length is ``v * (t_C - t_B)``.

``characterise_pass`` fits the ramp and the flat side jointly on raw
readings; ``estimate_speed`` is the plain straight-line fit over a given
ramp segment.
"""
from __future__ import annotations

import json
import math
import statistics
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .detection import PassEvents, TrendEvent
from .errors import DegenerateAngle, NegativeDwell, SegmentTooShort
from .filtering import FilteredSample


@dataclass(frozen=True)
class SpeedEstimate:
    value_mps: float
    stderr_mps: float
    n_samples: int
    source_angle_deg: float
    n_readings: int = 0


@dataclass(frozen=True)
class LengthEstimate:
    value_m: float
    stderr_m: float
    dwell_s: float
    speed_used: SpeedEstimate


@dataclass(frozen=True)
class Characterisation:
    speed: Optional[SpeedEstimate]
    length: Optional[LengthEstimate]
    pass_id: str
    module_id: str
    fused: bool = False
    angle_deg: Optional[float] = None
    dwell_s: Optional[float] = None
    dwell_stderr_s: Optional[float] = None
    t_ref_s: Optional[float] = None
    contributors: tuple[str, ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "pass_id": self.pass_id,
            "module_id": self.module_id,
            "angle_deg": self.angle_deg,
            "speed_mps": self.speed.value_mps if self.speed else None,
            "speed_stderr": self.speed.stderr_mps if self.speed else None,
            "length_m": self.length.value_m if self.length else None,
            "length_stderr": self.length.stderr_m if self.length else None,
            "dwell_s": self.dwell_s,
            "dwell_stderr_s": self.dwell_stderr_s,
            "t_ref_s": self.t_ref_s,
            "fused": self.fused,
            "contributors": list(self.contributors) or [self.module_id],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def ols_slope(t: np.ndarray, y: np.ndarray) -> tuple[float, float, np.ndarray]:
    """Least-squares slope, raw slope stderr and residuals."""
    tm = t.mean()
    sxx = float(((t - tm) ** 2).sum())
    if sxx <= 0.0:
        raise SegmentTooShort("all samples share one timestamp")
    b = float(((t - tm) * (y - y.mean())).sum() / sxx)
    resid = y - (y.mean() + b * (t - tm))
    n = len(t)
    s = math.sqrt(float((resid ** 2).sum()) / (n - 2)) if n > 2 else 0.0
    return b, s / math.sqrt(sxx), resid


def _segment_points(segment, side_level, tol):
    pts = []
    for s in segment:
        if s.discarded and not s.readings:
            continue
        rows = s.readings
        if not rows and s.reduced_m is not None:
            rows = ((s.t_s, s.reduced_m),)
        for t, l in rows:
            if side_level is not None and abs(l - side_level) <= tol:
                continue
            pts.append((t, l))
    return pts


def estimate_speed(front_segment: Sequence[FilteredSample], beam_angle_deg: float,
                   side_level: Optional[float] = None, tol_m: float = 0.0,
                   resolution_m: float = 0.005) -> SpeedEstimate:
    """Fit dl/dt over the sloped section and convert it to road speed.

    Readings within ``tol_m`` of ``side_level`` belong to the flat side and
    are left out.  One trimming pass drops readings more than three robust
    sigmas off the first fit.
    """
    if beam_angle_deg == 90.0:
        raise DegenerateAngle("a perpendicular beam cannot measure speed")
    pts = _segment_points(front_segment, side_level, tol_m)
    n_windows = len(front_segment)
    if n_windows < 2 or len(pts) < 3:
        raise SegmentTooShort(f"{n_windows} windows / {len(pts)} readings on the ramp",
                              n_windows=n_windows)
    t = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    b, _, resid = ols_slope(t, y)
    if len(pts) > 4:
        mad = 1.4826 * float(np.median(np.abs(resid - np.median(resid))))
        keep = np.abs(resid) <= 3.0 * max(mad, resolution_m)
        if 3 <= keep.sum() < len(pts):
            t, y = t[keep], y[keep]
    b, se_raw, resid = ols_slope(t, y)
    n = len(t)
    # quantization alone leaves resolution/sqrt(12) per reading
    sigma_q = resolution_m / math.sqrt(12.0)
    sxx = float(((t - t.mean()) ** 2).sum())
    se = max(se_raw, sigma_q / math.sqrt(sxx))
    c = abs(math.cos(math.radians(beam_angle_deg)))
    return SpeedEstimate(abs(b) * c, se * c, n_windows, beam_angle_deg, n)


def estimate_length(b: TrendEvent, c: TrendEvent, speed: SpeedEstimate,
                    timing_sigma_s: float = 0.02) -> LengthEstimate:
    dwell = c.t_s - b.t_s
    if dwell <= 0.0:
        raise NegativeDwell(f"side end at {c.t_s} not after side start at {b.t_s}")
    return length_from_dwell(dwell, math.sqrt(2.0) * timing_sigma_s, speed)


def length_from_dwell(dwell_s: float, dwell_stderr_s: float, speed: SpeedEstimate) -> LengthEstimate:
    if dwell_s <= 0.0:
        raise NegativeDwell(f"dwell {dwell_s} <= 0")
    value = speed.value_mps * dwell_s
    err = math.hypot(dwell_s * speed.stderr_mps, speed.value_mps * dwell_stderr_s)
    return LengthEstimate(value, err, dwell_s, speed)


def side_statistics(stream: Sequence[FilteredSample], lo: int, hi: int) -> tuple[float, float]:
    """Level and robust per-reading sigma of the flat side between windows lo..hi."""
    inner = [s for s in stream[lo + 1:hi] if not s.discarded] or \
        [s for s in stream[lo:hi + 1] if not s.discarded]
    values = [l for s in inner for _, l in s.readings] or [s.reduced_m for s in inner]
    level = float(statistics.median(values))
    mad = statistics.median(abs(v - level) for v in values)
    return level, 1.4826 * mad


def fit_hinge(t: np.ndarray, y: np.ndarray, taus: Sequence[float], rear: bool = False):
    """Continuous ramp+flat fit: ``y = level + b * min(t - tau, 0)`` (``max`` when rear).

    ``tau`` is picked from ``taus`` by least squares.  Returns
    (b, raw stderr of b, tau, level, residuals).
    """
    best = _hinge_search(t, y, taus, rear)
    if best is None:
        raise SegmentTooShort("not enough ramp readings for a hinge fit")
    # second pass on a fine grid around the coarse optimum
    if len(taus) > 1:
        step = float(taus[1] - taus[0])
        fine = np.linspace(best[1] - step, best[1] + step, 41)
        best = min(best, _hinge_search(t, y, fine, rear) or best, key=lambda r: r[0])
    sse, tau, coef, resid, X = best
    dof = max(len(y) - 3, 1)
    cov = np.linalg.pinv(X.T @ X) * (sse / dof)
    return float(coef[1]), math.sqrt(max(float(cov[1, 1]), 0.0)), float(tau), float(coef[0]), resid


def _hinge_search(t, y, taus, rear):
    best = None
    for tau in taus:
        x = np.maximum(t - tau, 0.0) if rear else np.minimum(t - tau, 0.0)
        if np.count_nonzero(x) < 3:
            continue
        X = np.column_stack([np.ones_like(x), x])
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        resid = y - X @ coef
        sse = float(resid @ resid)
        if best is None or sse < best[0]:
            best = (sse, float(tau), coef, resid, X)
    return best


def _readings(stream: Sequence[FilteredSample], lo: int, hi: int) -> tuple[np.ndarray, np.ndarray]:
    pts = [p for s in stream[lo:hi + 1] for p in s.readings]
    return np.array([p[0] for p in pts]), np.array([p[1] for p in pts])


def estimate_speed_hinge(stream: Sequence[FilteredSample], lo: int, hi: int, knee: int,
                         beam_angle_deg: float, rear: bool = False, resolution_m: float = 0.005,
                         window_period_s: float = 0.02, search_windows: int = 2) -> SpeedEstimate:
    """Speed from a hinge fit on raw readings of windows lo..hi around ``knee``.

    Fitting the ramp and the flat side together avoids picking ramp readings
    by their value, which would flatten the fitted slope.
    """
    if beam_angle_deg == 90.0:
        raise DegenerateAngle("a perpendicular beam cannot measure speed")
    ramp_windows = (knee - lo + 1) if not rear else (hi - knee + 1)
    if ramp_windows < 2:
        raise SegmentTooShort(f"{ramp_windows} windows on the ramp", n_windows=ramp_windows)
    t, y = _readings(stream, lo, hi)
    if len(t) < 5:
        raise SegmentTooShort(f"{len(t)} readings around the ramp")
    tk = stream[knee].t_s
    span = search_windows * window_period_s
    step = window_period_s / 10.0
    taus = np.arange(tk - span, tk + span + step / 2, step)
    b, se_raw, tau, level, resid = fit_hinge(t, y, taus, rear)
    if len(t) > 6:
        mad = 1.4826 * float(np.median(np.abs(resid - np.median(resid))))
        keep = np.abs(resid) <= 3.0 * max(mad, resolution_m)
        if keep.sum() >= 5 and keep.sum() < len(t):
            t, y = t[keep], y[keep]
            b, se_raw, tau, level, resid = fit_hinge(t, y, taus, rear)
    on_ramp = (t > tau) if rear else (t < tau)
    n_ramp = int(on_ramp.sum())
    if n_ramp < 3:
        raise SegmentTooShort(f"{n_ramp} readings on the ramp")
    tr = t[on_ramp]
    sxx = float(((tr - tr.mean()) ** 2).sum())
    se = max(se_raw, resolution_m / math.sqrt(12.0) / math.sqrt(sxx)) if sxx > 0 else se_raw
    c = abs(math.cos(math.radians(beam_angle_deg)))
    return SpeedEstimate(abs(b) * c, se * c, ramp_windows, beam_angle_deg, n_ramp)


def characterise_pass(stream: Sequence[FilteredSample], events: PassEvents,
                      beam_angle_deg: float, module_id: str = "m0", pass_id: str = "p0",
                      resolution_m: float = 0.005, window_period_s: float = 0.02,
                      reading_period_s: float = 0.004, flat_windows: int = 6) -> Characterisation:
    """Single-module characterisation of one detected pass.

    At 90 deg only the dwell is reported (speed and length stay None).
    """
    b, c = events.b, events.c
    dwell = c.t_s - b.t_s
    if dwell <= 0.0:
        raise NegativeDwell(f"side end at {c.t_s} not after side start at {b.t_s}")
    sig_b = window_period_s if b.window_index != events.run[0] else reading_period_s
    sig_c = window_period_s if c.window_index != events.run[1] else reading_period_s
    dwell_err = math.hypot(sig_b, sig_c)
    base = Characterisation(None, None, pass_id, module_id, False, beam_angle_deg,
                            dwell, dwell_err, b.t_s)
    if beam_angle_deg == 90.0:
        return base

    lo, hi = events.run
    rear = beam_angle_deg > 90.0
    if not rear:
        k = b.window_index
        level, _ = side_statistics(stream, k, hi)
        speed = estimate_speed_hinge(stream, lo, min(hi - 1, k + flat_windows), k,
                                     beam_angle_deg, False, resolution_m, window_period_s)
    else:
        k = c.window_index
        level, _ = side_statistics(stream, lo, k)
        speed = estimate_speed_hinge(stream, max(lo + 1, k - flat_windows), hi, k,
                                     beam_angle_deg, True, resolution_m, window_period_s)
    length = length_from_dwell(dwell, dwell_err, speed)
    # time the front crosses the sensor's abscissa, comparable across angles
    t_ref = b.t_s + level * math.cos(math.radians(beam_angle_deg)) / speed.value_mps
    return replace(base, speed=speed, length=length, t_ref_s=t_ref)
