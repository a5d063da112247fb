"""Batch runs over (angle, speed) cells and their aggregate tables."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .detection import CusumConfig
from .errors import ScenarioError
from .estimation import Characterisation
from .filtering import FilterConfig
from .fusion import ASSOCIATION_WINDOW_S, DeviceTopology, simulate, single_device
from .geometry import NoiseModel, VehiclePass, synthesize_pass
from .presets import resolve_noise

QUANTITIES = ("SPEED", "LENGTH")


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    topology: DeviceTopology
    vehicle: VehiclePass = VehiclePass()
    # vehicle speeds to run; defaults to the template's own speed
    speeds: Optional[tuple[float, ...]] = None
    noise: Union[str, Mapping, NoiseModel] = "paper-calibrated"
    repetitions: int = 10
    seed: int = 0
    output: Optional[str] = None

    def __post_init__(self):
        if self.repetitions < 1:
            raise ScenarioError("repetitions must be >= 1", repetitions=self.repetitions)

    @property
    def speed_list(self) -> tuple[float, ...]:
        return tuple(self.speeds) if self.speeds else (self.vehicle.speed_mps,)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ScenarioSpec":
        try:
            sensor = data.get("sensor", {})
            if "topology" in data:
                topo = DeviceTopology.from_dict(data["topology"], sensor)
            elif "angles" in data:
                topo = single_device([float(a) for a in data["angles"]], sensor_defaults=sensor)
            else:
                raise ScenarioError("scenario needs 'topology' or 'angles'")
            speeds = data.get("speeds")
            return cls(
                name=data.get("name", "scenario"),
                topology=topo,
                vehicle=VehiclePass(**data.get("vehicle", {})),
                speeds=tuple(float(s) for s in speeds) if speeds else None,
                noise=data.get("noise", "paper-calibrated"),
                repetitions=int(data.get("repetitions", 10)),
                seed=int(data.get("seed", 0)),
                output=data.get("output"),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ScenarioError(f"bad scenario: {e}") from e


@dataclass(frozen=True)
class CellStats:
    source: str
    angle_deg: Optional[float]
    speed_mps: float
    quantity: str
    ground_truth: float
    n_included: int
    n_excluded: int
    avg: Optional[float]
    std: Optional[float]
    abs_err_of_avg: Optional[float]
    rel_error_pct: Optional[float]
    mean_abs_err: Optional[float]
    mean_abs_rel_err_pct: Optional[float]

    @classmethod
    def from_values(cls, source, angle, speed, quantity, truth, values, n_excluded) -> "CellStats":
        if not values:
            return cls(source, angle, speed, quantity, truth, 0, n_excluded,
                       None, None, None, None, None, None)
        a = np.asarray(values, dtype=float)
        avg = float(a.mean())
        std = float(a.std(ddof=1)) if len(a) > 1 else 0.0
        abs_err = abs(avg - truth)
        mae = float(np.abs(a - truth).mean())
        return cls(source, angle, speed, quantity, truth, len(a), n_excluded, avg, std,
                   abs_err, 100.0 * abs_err / truth, mae, 100.0 * mae / truth)


CSV_COLUMNS = ["scenario", "source", "angle_deg", "speed_mps", "quantity", "ground_truth",
               "n_included", "n_excluded", "avg", "std", "abs_err_of_avg", "rel_error_pct",
               "mean_abs_err", "mean_abs_rel_err_pct"]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


@dataclass
class ScenarioResult:
    spec: ScenarioSpec
    rows: list[CellStats]
    passes: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([self.spec.name] + [_fmt(getattr(r, c)) for c in CSV_COLUMNS[1:]])
        return buf.getvalue()

    def passes_jsonl(self) -> str:
        return "".join(json.dumps(p, sort_keys=True) + "\n" for p in self.passes)

    def summary(self) -> dict:
        return {
            "scenario": self.spec.name,
            "cells": len(self.rows),
            "excluded": {f"{r.source}@{r.speed_mps:g}/{r.quantity}": r.n_excluded
                         for r in self.rows if r.n_excluded},
        }

    def row(self, source: str, speed: float, quantity: str) -> Optional[CellStats]:
        return next((r for r in self.rows if r.source == source and r.speed_mps == speed
                     and r.quantity == quantity), None)

    def write(self, prefix: str) -> tuple[str, str]:
        d = os.path.dirname(prefix)
        if d:
            os.makedirs(d, exist_ok=True)
        agg, raw = f"{prefix}.csv", f"{prefix}.jsonl"
        with open(agg, "w", newline="") as f:
            f.write(self.to_csv())
        with open(raw, "w") as f:
            f.write(self.passes_jsonl())
        return agg, raw


def _noise_seed(base: int, rep: int, speed_idx: int, module_idx: int) -> int:
    # per-rep root is seed + rep; modules and speeds get independent child streams
    ss = np.random.SeedSequence(base + rep, spawn_key=(speed_idx, module_idx))
    return int(ss.generate_state(1)[0])


def _match(reports: Sequence[Characterisation], t_cross: float) -> Optional[Characterisation]:
    near = [r for r in reports if r.t_ref_s is not None and abs(r.t_ref_s - t_cross) <= ASSOCIATION_WINDOW_S]
    return min(near, key=lambda r: abs(r.t_ref_s - t_cross)) if near else None


def run_scenario(spec: ScenarioSpec, fcfg: FilterConfig = FilterConfig(),
                 ccfg: CusumConfig = CusumConfig()) -> ScenarioResult:
    """repetitions x synthesize -> pipeline -> fuse, aggregated per cell.

    Passes that fail anywhere in the pipeline are excluded from the cell and
    counted in ``n_excluded``.
    """
    base_noise = resolve_noise(spec.noise)
    modules = spec.topology.sensing
    passes: list[dict] = []
    collected: dict[tuple, list[float]] = {}
    excluded: dict[tuple, int] = {}
    meta: dict[tuple, tuple] = {}

    def add(source, angle, speed, quantity, value):
        key = (source, speed, quantity)
        meta[key] = (angle,)
        collected.setdefault(key, [])
        excluded.setdefault(key, 0)
        if value is None:
            excluded[key] += 1
        else:
            collected[key].append(value)

    for si, speed in enumerate(spec.speed_list):
        vp = replace(spec.vehicle, speed_mps=speed)
        t_cross = vp.start_x_m / speed
        for rep in range(spec.repetitions):
            streams = {}
            for mi, m in enumerate(modules):
                noise = replace(base_noise, seed=_noise_seed(spec.seed, rep, si, mi))
                streams[m.module_id] = synthesize_pass(m.sensor, vp, noise)
            topo = replace(spec.topology,
                           channel=replace(spec.topology.channel, seed=spec.topology.channel.seed + rep))
            sim = simulate(topo, streams, fcfg, ccfg)

            for m in modules:
                res = sim.module_results[m.module_id]
                rep_match = _match(res.reports, t_cross)
                record = {"scenario": spec.name, "rep": rep, "speed_truth": speed,
                          "length_truth": vp.length_m, "source": m.module_id}
                if rep_match is None:
                    codes = sorted({e.code for e in res.errors}) or ["NO_MATCHING_PASS"]
                    record["error"] = codes[0]
                else:
                    record.update(rep_match.to_dict())
                passes.append(record)
                speed_v = rep_match.speed.value_mps if rep_match and rep_match.speed else None
                len_v = rep_match.length.value_m if rep_match and rep_match.length else None
                if m.angle_deg != 90.0:
                    add(m.module_id, m.angle_deg, speed, "SPEED", speed_v)
                    add(m.module_id, m.angle_deg, speed, "LENGTH", len_v)

            for dev in spec.topology.devices:
                source = f"fused:{dev.device_id}"
                got = _match(sim.fused[dev.device_id], t_cross)
                fused = got if got is not None and got.fused else None
                record = {"scenario": spec.name, "rep": rep, "speed_truth": speed,
                          "length_truth": vp.length_m, "source": source}
                if fused is None:
                    record["error"] = "NOT_FUSED"
                else:
                    record.update(fused.to_dict())
                passes.append(record)
                add(source, None, speed, "SPEED", fused.speed.value_mps if fused else None)
                add(source, None, speed, "LENGTH", fused.length.value_m if fused else None)

    rows = []
    for key in collected:
        source, speed, quantity = key
        # sources that never fuse (no dwell module) produce no rows
        if source.startswith("fused:") and not collected[key]:
            continue
        truth = speed if quantity == "SPEED" else spec.vehicle.length_m
        rows.append(CellStats.from_values(source, meta[key][0], speed, quantity, truth,
                                          collected[key], excluded[key]))
    result = ScenarioResult(spec, rows, passes)
    if spec.output:
        result.write(spec.output)
    return result


SWEEP_COLUMNS = ["angle_deg", "speed_mps", "n_included", "speed_rel_err_pct", "length_rel_err_pct"]


def sweep_angles(spec: ScenarioSpec, angles: Sequence[float]) -> list[dict]:
    """Error-vs-angle series; one single-module run per angle.

    Speed and length are blank at 90 deg, where no speed is observable.
    """
    out = []
    for a in angles:
        if not 0.0 < a < 180.0:
            raise ScenarioError(f"angle {a} outside (0, 180)")
        sub = replace(spec, name=f"{spec.name}-{a:g}", output=None,
                      topology=single_device([a], sensor_defaults=_sensor_defaults(spec)))
        res = run_scenario(sub)
        mid = f"m{a:g}"
        for speed in spec.speed_list:
            sp, ln = res.row(mid, speed, "SPEED"), res.row(mid, speed, "LENGTH")
            out.append({
                "angle_deg": float(a),
                "speed_mps": speed,
                "n_included": sp.n_included if sp else "",
                "speed_rel_err_pct": sp.mean_abs_rel_err_pct if sp else None,
                "length_rel_err_pct": ln.mean_abs_rel_err_pct if ln else None,
            })
    return out


def _sensor_defaults(spec: ScenarioSpec) -> dict:
    mods = spec.topology.sensing
    if not mods:
        return {}
    d = asdict(mods[0].sensor)
    d.pop("beam_angle_deg")
    return d


def sweep_to_csv(rows: Sequence[Mapping]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in SWEEP_COLUMNS])
    return buf.getvalue()
