"""Devices, buses and multi-module fusion.

A device is a set of modules on an ordered, lossless internal bus with one
master.  SENSE modules run the local pipeline and publish their reports;
only the master fuses.  Masters of different devices exchange speed reports
over a lossy inter-device channel.

The simulation is a small discrete-event loop over a heap keyed by
(time, sequence), so equal timestamps resolve in send order.
"""
from __future__ import annotations

import enum
import heapq
import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .detection import CusumConfig, detect_passes
from .errors import MissingDwell, NoReports, PipelineError, ScenarioError
from .estimation import Characterisation, LengthEstimate, SpeedEstimate, characterise_pass, length_from_dwell
from .filtering import FilterConfig, filter_stream
from .geometry import Burst, SensorConfig

log = logging.getLogger(__name__)

# reports whose reference times differ by less than this belong to one pass
ASSOCIATION_WINDOW_S = 0.5


class MsgType(str, enum.Enum):
    SPEED_REPORT = "SPEED_REPORT"
    DWELL_REPORT = "DWELL_REPORT"
    CHARACTERISATION = "CHARACTERISATION"
    FUSED_RESULT = "FUSED_RESULT"


class Hop(str, enum.Enum):
    INTRA_DEVICE = "INTRA_DEVICE"
    INTER_DEVICE = "INTER_DEVICE"


class Role(str, enum.Enum):
    SENSE = "SENSE"
    COMPUTE = "COMPUTE"
    MASTER = "MASTER"


@dataclass(frozen=True)
class ModuleMessage:
    msg_type: MsgType
    sender_module: str
    pass_id: str
    payload: Characterisation
    hop: Hop = Hop.INTRA_DEVICE
    t_sent_s: float = 0.0
    t_recv_s: float = 0.0
    recipient: str = ""

    def to_dict(self) -> dict:
        return {
            "msg_type": self.msg_type.value,
            "sender_module": self.sender_module,
            "recipient": self.recipient,
            "pass_id": self.pass_id,
            "hop": self.hop.value,
            "t_sent_s": round(self.t_sent_s, 9),
            "t_recv_s": round(self.t_recv_s, 9),
            "payload": self.payload.to_dict(),
        }


@dataclass(frozen=True)
class ModuleSpec:
    module_id: str
    sensor: Optional[SensorConfig]
    role: Role = Role.SENSE

    @property
    def angle_deg(self) -> Optional[float]:
        return self.sensor.beam_angle_deg if self.sensor else None


@dataclass(frozen=True)
class DeviceSpec:
    device_id: str
    modules: tuple[ModuleSpec, ...]

    def __post_init__(self):
        masters = [m for m in self.modules if m.role is Role.MASTER]
        if len(masters) != 1:
            raise ScenarioError(f"device {self.device_id} has {len(masters)} masters, need exactly 1",
                                device_id=self.device_id)
        ids = [m.module_id for m in self.modules]
        if len(set(ids)) != len(ids):
            raise ScenarioError(f"duplicate module ids in device {self.device_id}")
        for m in self.modules:
            if m.role is Role.SENSE and m.sensor is None:
                raise ScenarioError(f"SENSE module {m.module_id} has no sensor")

    @property
    def master(self) -> ModuleSpec:
        return next(m for m in self.modules if m.role is Role.MASTER)

    @property
    def sensing(self) -> list[ModuleSpec]:
        return [m for m in self.modules if m.role is Role.SENSE]


@dataclass(frozen=True)
class ChannelModel:
    """Inter-device link: fixed latency plus uniform jitter, independent drops."""

    latency_s: float = 0.01
    jitter_s: float = 0.0
    drop_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError("drop_prob must be in [0, 1]")
        if self.latency_s < 0 or self.jitter_s < 0:
            raise ValueError("latency_s and jitter_s must be >= 0")


@dataclass(frozen=True)
class DeviceTopology:
    devices: tuple[DeviceSpec, ...]
    channel: ChannelModel = ChannelModel()

    def __post_init__(self):
        ids = [d.device_id for d in self.devices]
        if not ids or len(set(ids)) != len(ids):
            raise ScenarioError("topology needs at least one device and unique device ids")
        mids = [m.module_id for d in self.devices for m in d.modules]
        if len(set(mids)) != len(mids):
            raise ScenarioError("module ids must be unique across the topology")

    @property
    def sensing(self) -> list[ModuleSpec]:
        return [m for d in self.devices for m in d.sensing]

    @classmethod
    def from_dict(cls, data: Mapping, sensor_defaults: Optional[Mapping] = None) -> "DeviceTopology":
        base = dict(sensor_defaults or {})
        devices = []
        for d in data["devices"]:
            mods = []
            for m in d["modules"]:
                role = Role(m.get("role", "SENSE"))
                sensor = None
                if m.get("angle_deg") is not None:
                    sensor = SensorConfig(**{**base, **m.get("sensor", {}),
                                             "beam_angle_deg": float(m["angle_deg"])})
                mods.append(ModuleSpec(m["module_id"], sensor, role))
            devices.append(DeviceSpec(d["device_id"], tuple(mods)))
        return cls(tuple(devices), ChannelModel(**data.get("channel", {})))

    def to_dict(self) -> dict:
        return {
            "devices": [
                {"device_id": d.device_id,
                 "modules": [{"module_id": m.module_id, "angle_deg": m.angle_deg, "role": m.role.value}
                             for m in d.modules]}
                for d in self.devices
            ],
            "channel": {"latency_s": self.channel.latency_s, "jitter_s": self.channel.jitter_s,
                        "drop_prob": self.channel.drop_prob, "seed": self.channel.seed},
        }


def single_device(angles: Sequence[float], device_id: str = "dev0",
                  sensor_defaults: Optional[Mapping] = None) -> DeviceTopology:
    """One device with a SENSE module per angle and a sensorless master."""
    mods = [{"module_id": f"m{a:g}", "angle_deg": a} for a in angles]
    mods.append({"module_id": f"{device_id}-master", "role": "MASTER"})
    return DeviceTopology.from_dict({"devices": [{"device_id": device_id, "modules": mods}]},
                                    sensor_defaults)


# --- fusion algebra -------------------------------------------------------

def fuse_speed(reports: Sequence[SpeedEstimate]) -> SpeedEstimate:
    """Inverse-variance weighted mean; one report comes back unchanged."""
    if not reports:
        raise NoReports("no speed reports to fuse")
    if len(reports) == 1:
        return reports[0]
    # a zero stderr would take all the weight; keep the arithmetic finite
    var = [max(r.stderr_mps, 1e-12) ** 2 for r in reports]
    w = [1.0 / x for x in var]
    wsum = math.fsum(w)
    value = math.fsum(wi * r.value_mps for wi, r in zip(w, reports)) / wsum
    best = min(reports, key=lambda r: (r.stderr_mps, r.source_angle_deg))
    return SpeedEstimate(value, math.sqrt(1.0 / wsum),
                         sum(r.n_samples for r in reports), best.source_angle_deg,
                         sum(r.n_readings for r in reports))


def fuse_length(dwell_report: Optional[Characterisation], fused_speed: SpeedEstimate) -> LengthEstimate:
    if dwell_report is None or dwell_report.dwell_s is None:
        raise MissingDwell("no dwell report for this pass")
    return length_from_dwell(dwell_report.dwell_s, dwell_report.dwell_stderr_s or 0.0, fused_speed)


def _dwell_source(reports: Sequence[Characterisation], dwell_angle: float) -> Optional[Characterisation]:
    cands = [r for r in reports if r.angle_deg == dwell_angle and r.dwell_s is not None]
    return min(cands, key=lambda r: (r.dwell_stderr_s or 0.0, r.module_id)) if cands else None


def best_single(reports: Sequence[Characterisation]) -> Characterisation:
    """Most precise single-module result, preferring ones that carry a length."""
    if not reports:
        raise NoReports("no reports for this pass")
    with_len = [r for r in reports if r.length is not None]
    if with_len:
        return min(with_len, key=lambda r: (r.length.stderr_m / r.length.value_m, r.module_id))
    return min(reports, key=lambda r: r.module_id)


def fuse_pass(reports: Sequence[Characterisation], pass_id: str = "p0", module_id: str = "master",
              dwell_angle: float = 90.0) -> Characterisation:
    """Fuse every speed source, then apply the fused speed to the perpendicular dwell.

    Without a dwell source or without any speed source the best single-module
    result is returned with ``fused=False``.
    """
    if not reports:
        raise NoReports("no reports for this pass", pass_id=pass_id)
    speeds = [r for r in reports if r.speed is not None]
    dwell = _dwell_source(reports, dwell_angle)
    if dwell is None or not speeds:
        return best_single(reports)
    speed = fuse_speed([r.speed for r in sorted(speeds, key=lambda r: r.module_id)])
    length = fuse_length(dwell, speed)
    contributors = tuple(sorted({r.module_id for r in speeds} | {dwell.module_id}))
    return Characterisation(speed, length, pass_id, module_id, True, None, dwell.dwell_s,
                            dwell.dwell_stderr_s, dwell.t_ref_s, contributors)


def associate(reports: Sequence[Characterisation],
              window_s: float = ASSOCIATION_WINDOW_S) -> list[list[Characterisation]]:
    """Group reports whose reference times chain within ``window_s`` of the group start."""
    groups: list[list[Characterisation]] = []
    for r in sorted(reports, key=lambda r: (r.t_ref_s, r.module_id)):
        if groups and r.t_ref_s - groups[-1][0].t_ref_s <= window_s:
            groups[-1].append(r)
        else:
            groups.append([r])
    return groups


# --- module pipeline ------------------------------------------------------

@dataclass
class ModuleResult:
    module_id: str
    reports: list[Characterisation] = field(default_factory=list)
    errors: list[PipelineError] = field(default_factory=list)
    # time the module finished each pass, used as its publish time
    t_done: list[float] = field(default_factory=list)


def run_module(module: ModuleSpec, bursts: Sequence[Burst], fcfg: FilterConfig = FilterConfig(),
               ccfg: CusumConfig = CusumConfig()) -> ModuleResult:
    """Filter, detect and characterise every pass seen by one module."""
    cfg = module.sensor
    out = ModuleResult(module.module_id)
    stream = filter_stream(bursts, fcfg, cfg)
    try:
        passes = detect_passes(stream, cfg.beam_angle_deg, ccfg)
    except PipelineError as e:
        out.errors.append(e)
        return out
    for k, ev in enumerate(passes):
        try:
            ch = characterise_pass(stream, ev, cfg.beam_angle_deg, module.module_id,
                                   f"{module.module_id}-p{k}", cfg.resolution_m,
                                   cfg.window_period_s, cfg.reading_period_s)
        except PipelineError as e:
            out.errors.append(e)
            continue
        out.reports.append(ch)
        end = ev.back_end if ev.back_end is not None else ev.c
        out.t_done.append(stream[end.window_index].t_s + cfg.window_period_s)
    return out


# --- discrete-event simulation -------------------------------------------

@dataclass
class SimResult:
    trace: list[ModuleMessage]
    fused: dict[str, list[Characterisation]]
    module_results: dict[str, ModuleResult]

    def trace_jsonl(self) -> str:
        return "".join(json.dumps(m.to_dict(), sort_keys=True) + "\n" for m in self.trace)


class _Master:
    def __init__(self, device: DeviceSpec, hold_s: float):
        self.device = device
        self.hold_s = hold_s
        self.groups: list[dict] = []
        self.results: list[Characterisation] = []

    def accept(self, report: Characterisation, now: float) -> Optional[int]:
        """File a report; returns a group index when a new group opens."""
        for k, g in enumerate(self.groups):
            if not g["closed"] and abs(report.t_ref_s - g["t_ref"]) <= ASSOCIATION_WINDOW_S:
                g["reports"].append(report)
                return None
        self.groups.append({"t_ref": report.t_ref_s, "reports": [report], "closed": False})
        return len(self.groups) - 1


def simulate(topology: DeviceTopology, streams: Mapping[str, Sequence[Burst]],
             fcfg: FilterConfig = FilterConfig(), ccfg: CusumConfig = CusumConfig(),
             bus_latency_s: float = 0.001, hold_s: float = 1.0) -> SimResult:
    """Run every device in the topology on one shared clock.

    ``streams`` maps SENSE module ids to their raw bursts.  Each master
    closes a pass group ``hold_s`` after its first report and emits one
    FUSED_RESULT for it.
    """
    rng = np.random.default_rng(topology.channel.seed)
    ch = topology.channel
    heap: list = []
    seq = 0

    def schedule(t, kind, data):
        nonlocal seq
        heapq.heappush(heap, (t, seq, kind, data))
        seq += 1

    module_results: dict[str, ModuleResult] = {}
    masters = {d.device_id: _Master(d, hold_s) for d in topology.devices}
    for dev in topology.devices:
        bus_t = 0.0
        for m in dev.sensing:
            if m.module_id not in streams:
                raise ScenarioError(f"no stream for module {m.module_id}", module_id=m.module_id)
            res = run_module(m, streams[m.module_id], fcfg, ccfg)
            module_results[m.module_id] = res
            for rep, t_done in zip(res.reports, res.t_done):
                kind = MsgType.DWELL_REPORT if rep.angle_deg == 90.0 else MsgType.CHARACTERISATION
                schedule(t_done, "publish", (dev.device_id, kind, rep))

    trace: list[ModuleMessage] = []
    bus_free: dict[str, float] = {}
    while heap:
        t, _, kind, data = heapq.heappop(heap)
        if kind == "publish":
            dev_id, mtype, rep = data
            master = masters[dev_id]
            # ordered bus: a message never overtakes an earlier one
            t_recv = max(t + bus_latency_s, bus_free.get(dev_id, 0.0))
            bus_free[dev_id] = t_recv
            msg = ModuleMessage(mtype, rep.module_id, rep.pass_id, rep, Hop.INTRA_DEVICE,
                                t, t_recv, master.device.master.module_id)
            schedule(t_recv, "deliver", (dev_id, msg))
        elif kind == "deliver":
            dev_id, msg = data
            trace.append(msg)
            master = masters[dev_id]
            g = master.accept(msg.payload, t)
            if g is not None:
                schedule(t + hold_s, "close", (dev_id, g))
            if msg.hop is Hop.INTRA_DEVICE and msg.payload.speed is not None:
                for other in topology.devices:
                    if other.device_id == dev_id:
                        continue
                    # draw both numbers every time so drop decisions nest as drop_prob grows
                    u, j = rng.random(), rng.random()
                    if u < ch.drop_prob:
                        log.debug("dropped %s -> %s", msg.payload.pass_id, other.device_id)
                        continue
                    fwd = ModuleMessage(MsgType.SPEED_REPORT, master.device.master.module_id,
                                        msg.pass_id, msg.payload, Hop.INTER_DEVICE, t,
                                        t + ch.latency_s + ch.jitter_s * j, other.master.module_id)
                    schedule(fwd.t_recv_s, "deliver", (other.device_id, fwd))
        elif kind == "close":
            dev_id, g = data
            master = masters[dev_id]
            group = master.groups[g]
            group["closed"] = True
            pid = f"{dev_id}-p{len(master.results)}"
            reps = group["reports"]
            local = {m.module_id for m in master.device.modules}
            # remote reports only contribute speed, never dwell or a fallback length
            local_reps = [r for r in reps if r.module_id in local]
            remote = [replace(r, dwell_s=None, length=None) for r in reps if r.module_id not in local]
            if not local_reps:
                continue
            fused = fuse_pass(local_reps + remote, pid, master.device.master.module_id)
            if not fused.fused and fused.module_id not in local:
                fused = best_single(local_reps)
            master.results.append(fused)
            out = ModuleMessage(MsgType.FUSED_RESULT, master.device.master.module_id, pid, fused,
                                Hop.INTRA_DEVICE, t, t, master.device.master.module_id)
            trace.append(out)

    return SimResult(trace, {d: m.results for d, m in masters.items()}, module_results)


def run_device(topology: DeviceTopology, streams: Mapping[str, Sequence[Burst]],
               device_id: Optional[str] = None, **kw) -> list[ModuleMessage]:
    """Message stream of a single device (the first one by default)."""
    dev = next((d for d in topology.devices if device_id in (None, d.device_id)), None)
    if dev is None:
        raise ScenarioError(f"unknown device {device_id}")
    sub = DeviceTopology((dev,), topology.channel)
    return simulate(sub, streams, **kw).trace
