"""Synthetic distance signal seen by an angled roadside ultrasonic sensor.

Frame: the sensor sits at the origin, the road axis is x and the lane lies
at y > 0.  Vehicles travel towards -x, so a beam with angle < 90 deg points
at oncoming traffic and sees the front face first, while a beam with angle
> 90 deg looks at the back of a departing vehicle.  The vehicle is an
axis-aligned rectangle and the beam an ideal ray.
"""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Optional, Sequence, Union

import numpy as np

from .errors import Unobservable


class Echo(enum.Enum):
    NO_ECHO = "NO_ECHO"

    def __repr__(self) -> str:
        return self.value


NO_ECHO = Echo.NO_ECHO

Reading = Union[float, Echo]


@dataclass(frozen=True)
class SensorConfig:
    beam_angle_deg: float = 30.0
    range_min_m: float = 0.25
    range_max_m: float = 4.5
    resolution_m: float = 0.005
    burst_size: int = 5
    window_period_s: float = 0.02
    lateral_offset_m: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.beam_angle_deg < 180.0:
            raise ValueError(f"beam_angle_deg must be in (0, 180), got {self.beam_angle_deg}")
        if not 0.0 < self.range_min_m < self.range_max_m:
            raise ValueError("need 0 < range_min_m < range_max_m")
        if self.resolution_m <= 0:
            raise ValueError("resolution_m must be > 0")
        if self.burst_size < 1:
            raise ValueError("burst_size must be >= 1")
        if self.window_period_s <= 0:
            raise ValueError("window_period_s must be > 0")

    @property
    def reading_period_s(self) -> float:
        return self.window_period_s / self.burst_size

    @property
    def is_rear_facing(self) -> bool:
        return self.beam_angle_deg > 90.0

    def direction(self) -> tuple[float, float]:
        if self.beam_angle_deg == 90.0:
            return 0.0, 1.0
        a = math.radians(self.beam_angle_deg)
        return math.cos(a), math.sin(a)


@dataclass(frozen=True)
class VehiclePass:
    length_m: float = 3.7
    speed_mps: float = 10.0
    lateral_near_m: float = 2.0
    start_x_m: float = 8.0
    # Only limits where the beam first meets the front (or last sees the back).
    width_m: float = 1.8

    def __post_init__(self):
        if self.length_m <= 0 or self.speed_mps <= 0:
            raise ValueError("length_m and speed_mps must be > 0")
        if self.lateral_near_m <= 0 or self.width_m <= 0:
            raise ValueError("lateral_near_m and width_m must be > 0")

    def front_x(self, t_s: float) -> float:
        return self.start_x_m - self.speed_mps * t_s


@dataclass(frozen=True)
class NoiseModel:
    gaussian_sigma_m: float = 0.0
    outlier_prob: float = 0.0
    spike_prob: float = 0.0
    spike_scale: float = 0.15
    seed: int = 0
    # echoes off a surface hit far from its normal are weaker: sigma and the
    # dropout probability grow by these factors times (1 - cos(incidence))
    incidence_sigma_gain: float = 0.0
    incidence_dropout: float = 0.0

    def __post_init__(self):
        for name in ("outlier_prob", "spike_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        if self.gaussian_sigma_m < 0:
            raise ValueError("gaussian_sigma_m must be >= 0")
        if self.spike_scale < 0.15:
            raise ValueError("spike_scale must be >= 0.15")
        if self.incidence_sigma_gain < 0 or self.incidence_dropout < 0:
            raise ValueError("incidence gains must be >= 0")


@dataclass(frozen=True)
class RangeSample:
    """One raw reading. ``distance_m`` is NO_ECHO when nothing is in range."""

    t_s: float
    distance_m: Reading
    window_index: int


@dataclass(frozen=True)
class Burst:
    """The ``burst_size`` raw readings taken during one sample window."""

    window_index: int
    t_s: float
    samples: tuple[RangeSample, ...]

    @property
    def readings(self) -> list[Reading]:
        return [s.distance_m for s in self.samples]


class GroundTruth(NamedTuple):
    t_a: float
    t_b: float
    t_c: float


def ray_rectangle_hit(direction: tuple[float, float], x0: float, x1: float,
                      y0: float, y1: float) -> Optional[tuple[float, int]]:
    """(distance, axis of the face hit) for a ray from the origin, or None.

    Slab test.  Axis 0 is a face normal to x (front or back), axis 1 a side.
    Returns None on a miss or when the origin is inside the box.
    """
    t_near, t_far, axis = -math.inf, math.inf, -1
    for ax, (d, lo, hi) in enumerate(((direction[0], x0, x1), (direction[1], y0, y1))):
        if abs(d) < 1e-15:
            if not lo <= 0.0 <= hi:
                return None
            continue
        ta, tb = lo / d, hi / d
        if ta > tb:
            ta, tb = tb, ta
        if ta > t_near:
            t_near, axis = ta, ax
        t_far = min(t_far, tb)
    if t_near > t_far or t_far < 0.0 or t_near <= 0.0:
        return None
    return t_near, axis


def ray_rectangle_distance(direction: tuple[float, float], x0: float, x1: float,
                           y0: float, y1: float) -> Optional[float]:
    """Distance from the origin along ``direction`` to an axis-aligned box."""
    hit = ray_rectangle_hit(direction, x0, x1, y0, y1)
    return None if hit is None else hit[0]


def _hit(cfg: SensorConfig, vp: VehiclePass, t_s: float):
    xf = vp.front_x(t_s)
    return ray_rectangle_hit(cfg.direction(), xf, xf + vp.length_m,
                             vp.lateral_near_m, vp.lateral_near_m + vp.width_m)


def ideal_distance(cfg: SensorConfig, vp: VehiclePass, t_s: float) -> Reading:
    hit = _hit(cfg, vp, t_s)
    if hit is None or not cfg.range_min_m <= hit[0] <= cfg.range_max_m:
        return NO_ECHO
    return hit[0]


def incidence_cos(cfg: SensorConfig, face_axis: int) -> float:
    """Cosine between the beam and the normal of the face it hits."""
    return abs(cfg.direction()[face_axis])


def side_distance(cfg: SensorConfig, vp: VehiclePass) -> float:
    return vp.lateral_near_m / cfg.direction()[1]


def _check_observable(cfg: SensorConfig, vp: VehiclePass) -> None:
    side = side_distance(cfg, vp)
    if not cfg.range_min_m <= side <= cfg.range_max_m:
        raise Unobservable(
            f"side surface at {side:.3f} m is outside sensor range",
            side_m=side,
        )


def ground_truth_events(cfg: SensorConfig, vp: VehiclePass) -> GroundTruth:
    """Exact times of front start (A), front-to-side (B) and side end (C).

    Test oracle only.  For rear-facing beams the side is seen first, so
    A == B there as well as at 90 deg.
    """
    _check_observable(cfg, vp)
    c, s = cfg.direction()
    v = vp.speed_mps
    y0, y1 = vp.lateral_near_m, vp.lateral_near_m + vp.width_m
    x_side = y0 * c / s
    t_b = (vp.start_x_m - x_side) / v
    if c > 0.0:
        x_a = min(y1 * c / s, cfg.range_max_m * c)
        if vp.start_x_m < x_a:
            raise Unobservable("vehicle already inside the beam at t=0")
        t_a = (vp.start_x_m - x_a) / v
    else:
        if vp.start_x_m < x_side:
            raise Unobservable("vehicle already inside the beam at t=0")
        t_a = t_b
    return GroundTruth(t_a, t_b, t_b + vp.length_m / v)


def ramp_interval(cfg: SensorConfig, vp: VehiclePass) -> Optional[tuple[float, float]]:
    """Time span of the sloped section used for speed, None at 90 deg."""
    gt = ground_truth_events(cfg, vp)
    c, s = cfg.direction()
    if c == 0.0:
        return None
    if c > 0.0:
        return gt.t_a, gt.t_b
    y1 = vp.lateral_near_m + vp.width_m
    # back face leaves the beam at the nearer of the far-corner and range limits
    x_end = max(y1 * c / s, cfg.range_max_m * c)
    return gt.t_c, (vp.start_x_m + vp.length_m - x_end) / vp.speed_mps


def pass_duration(cfg: SensorConfig, vp: VehiclePass) -> float:
    # until the back has cleared every possible hit point, plus a few windows
    travel = vp.start_x_m + vp.length_m + cfg.range_max_m
    return travel / vp.speed_mps + 10 * cfg.window_period_s


def quantize(x: float, resolution: float) -> float:
    return round(round(x / resolution) * resolution, 9)


def synthesize_pass(cfg: SensorConfig, vp: VehiclePass, noise: NoiseModel,
                    duration_s: Optional[float] = None) -> list[Burst]:
    """Raw sample bursts for one vehicle pass, one Burst per window.

    Reading j of window w is taken at ``w*period + j*period/burst_size``.
    """
    if duration_s is None:
        duration_s = pass_duration(cfg, vp)
    n_windows = int(math.ceil(duration_s / cfg.window_period_s))
    k = cfg.burst_size
    dt = cfg.reading_period_s
    times = (np.arange(n_windows)[:, None] * cfg.window_period_s + np.arange(k)[None, :] * dt)

    rng = np.random.default_rng(noise.seed)
    shape = times.shape
    gauss = rng.standard_normal(shape) * noise.gaussian_sigma_m
    spike_u = rng.random(shape)
    spike_mag = rng.random(shape)
    spike_sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    outlier_u = rng.random(shape)

    bursts = []
    for w in range(n_windows):
        samples = []
        for j in range(k):
            t = float(times[w, j])
            hit = _hit(cfg, vp, t)
            if hit is None or not cfg.range_min_m <= hit[0] <= cfg.range_max_m:
                value: Reading = NO_ECHO
            else:
                off = 1.0 - incidence_cos(cfg, hit[1])
                x = hit[0] + gauss[w, j] * (1.0 + noise.incidence_sigma_gain * off)
                if spike_u[w, j] < noise.spike_prob:
                    x *= 1.0 + spike_sign[w, j] * noise.spike_scale * (1.0 + spike_mag[w, j])
                if outlier_u[w, j] < noise.outlier_prob + noise.incidence_dropout * off:
                    value = NO_ECHO
                else:
                    x = quantize(x, cfg.resolution_m)
                    value = x if cfg.range_min_m <= x <= cfg.range_max_m else NO_ECHO
            samples.append(RangeSample(t, value, w))
        t_center = float(times[w].mean())
        bursts.append(Burst(w, t_center, tuple(samples)))
    return bursts


def format_reading(value: Reading) -> str:
    return NO_ECHO.value if value is NO_ECHO else repr(float(value))


def parse_reading(text: str) -> Reading:
    return NO_ECHO if text.strip() == NO_ECHO.value else float(text)


def bursts_to_csv(bursts: Iterable[Burst]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["window_index", "t_s", "distance_m"])
    for b in bursts:
        for s in b.samples:
            writer.writerow([s.window_index, repr(s.t_s), format_reading(s.distance_m)])
    return buf.getvalue()


def bursts_from_csv(text: str) -> list[Burst]:
    rows = list(csv.DictReader(io.StringIO(text)))
    grouped: dict[int, list[RangeSample]] = {}
    for row in rows:
        w = int(row["window_index"])
        grouped.setdefault(w, []).append(
            RangeSample(float(row["t_s"]), parse_reading(row["distance_m"]), w))
    return [
        Burst(w, sum(s.t_s for s in ss) / len(ss), tuple(ss))
        for w, ss in sorted(grouped.items())
    ]


def scenario_from_dict(data: dict) -> tuple[SensorConfig, VehiclePass, NoiseModel]:
    """Parse a ``{sensor, vehicle, noise}`` scenario document."""
    return (
        SensorConfig(**data.get("sensor", {})),
        VehiclePass(**data.get("vehicle", {})),
        NoiseModel(**data.get("noise", {})),
    )


def valid_readings(values: Sequence[Reading]) -> list[float]:
    return [v for v in values if v is not NO_ECHO]
