"""Named noise presets and the fit that produced ``paper-calibrated``.

Fit procedure (``calibrate``): outlier and spike probabilities are held at
3% and the spike scale at 0.2.  On the reference geometry (L = 3.7 m, near
side 1.0 m from the sensor, 1.6 m wide) the Gaussian sigma and the two
incidence terms were gridded (sigma 0.06-0.12 m, sigma gain 0-8, incidence
dropout 0-0.5).  Each point ran 100 seeded single-module passes per
(angle, speed) cell, scored by mean absolute relative error against
``REFERENCE_ERRORS_PCT``.  Without the incidence terms the 30 deg length
error never rises above the fused 30+90 error, because nothing makes the
grazing side echo worse than the perpendicular one.

Chosen point: sigma 0.08 m, sigma gain 5, incidence dropout 0.5.  Five of
the eight cells land inside their bands (+-4 points speed, +-5 length), the
fused 30+90 length error sits inside its target band at both speeds and
stays below both single-module length errors.  Residuals (seed 0):

    cell             target   fitted
    speed 30/10       5.79     2.5
    speed 30/20       8.71     4.0   (miss by 0.7)
    speed 45/10      17.77     4.8   (miss: the model cannot make 45 deg
                                      worse at 10 m/s than at 20 m/s)
    speed 45/20       6.91     9.1
    length 30/10     12.44    10.6
    length 30/20     21.55    10.3   (miss: 30 deg length error does not
                                      grow with speed here)
    length 45/10      4.43     9.3
    length 45/20      7.75    10.7

Raising sigma to 0.09-0.10 moves speed 30/20 into its band but pushes
length 45/10 out; every point tried hits at most five cells.
"""
from __future__ import annotations

from dataclasses import asdict, replace
from typing import Mapping, Optional, Sequence, Union

from .geometry import NoiseModel, VehiclePass

PRESETS: dict[str, NoiseModel] = {
    "noiseless": NoiseModel(),
    "paper-calibrated": NoiseModel(gaussian_sigma_m=0.08, outlier_prob=0.03,
                                   spike_prob=0.03, spike_scale=0.2,
                                   incidence_sigma_gain=5.0, incidence_dropout=0.5),
}

# geometry the calibrated preset was fitted on
REFERENCE_VEHICLE = VehiclePass(length_m=3.7, lateral_near_m=1.0, width_m=1.6)

# (quantity, angle, speed) -> mean relative error in percent from field runs
REFERENCE_ERRORS_PCT: dict[tuple[str, float, float], float] = {
    ("SPEED", 30.0, 10.0): 5.79,
    ("SPEED", 30.0, 20.0): 8.71,
    ("SPEED", 45.0, 10.0): 17.77,
    ("SPEED", 45.0, 20.0): 6.91,
    ("LENGTH", 30.0, 10.0): 12.44,
    ("LENGTH", 30.0, 20.0): 21.55,
    ("LENGTH", 45.0, 10.0): 4.43,
    ("LENGTH", 45.0, 20.0): 7.75,
}
BAND_PTS = {"SPEED": 4.0, "LENGTH": 5.0}

# cells the chosen preset leaves outside their band (see the fit table above)
KNOWN_MISSES = frozenset({("SPEED", 30.0, 20.0), ("SPEED", 45.0, 10.0), ("LENGTH", 30.0, 20.0)})


def resolve_noise(noise: Union[str, Mapping, NoiseModel, None]) -> NoiseModel:
    """Preset name, inline parameter dict or a NoiseModel."""
    if noise is None:
        return PRESETS["noiseless"]
    if isinstance(noise, NoiseModel):
        return noise
    if isinstance(noise, str):
        try:
            return PRESETS[noise]
        except KeyError:
            raise KeyError(f"unknown noise preset {noise!r}; known: {sorted(PRESETS)}") from None
    return NoiseModel(**noise)


def calibrate(sigmas: Sequence[float] = (0.06, 0.08, 0.10), repetitions: int = 100,
              base: Optional[NoiseModel] = None, seed: int = 0) -> list[dict]:
    """Score each candidate sigma against the reference cells.

    Returns one dict per sigma with the fitted errors, per-cell residuals and
    the number of cells inside their band.
    """
    from .experiments import ScenarioSpec, run_scenario
    from .fusion import single_device

    base = base or PRESETS["paper-calibrated"]
    out = []
    for sigma in sigmas:
        noise = replace(base, gaussian_sigma_m=sigma)
        spec = ScenarioSpec(name=f"calibrate-{sigma:g}", topology=single_device([30.0, 45.0]),
                            vehicle=REFERENCE_VEHICLE, speeds=(10.0, 20.0), noise=noise,
                            repetitions=repetitions, seed=seed)
        rows = run_scenario(spec).rows
        fitted = {(r.quantity, r.angle_deg, r.speed_mps): r.mean_abs_rel_err_pct
                  for r in rows if r.source.startswith("m")}
        cells, hits = {}, 0
        for key, target in REFERENCE_ERRORS_PCT.items():
            got = fitted.get(key)
            resid = None if got is None else got - target
            ok = resid is not None and abs(resid) <= BAND_PTS[key[0]]
            hits += ok
            cells["/".join(f"{k:g}" if isinstance(k, float) else k for k in key)] = {
                "target": target, "fitted": got, "residual": resid, "in_band": ok}
        out.append({"noise": asdict(noise), "cells": cells, "in_band": hits})
    return out
