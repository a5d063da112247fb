"""Command line entry point: ``roadsonic run|sweep|calibrate``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from typing import Optional, Sequence

from .errors import PipelineError, ScenarioError
from .experiments import ScenarioSpec, run_scenario, sweep_angles, sweep_to_csv
from .presets import PRESETS, calibrate


def _load(path: str, args) -> ScenarioSpec:
    try:
        with open(path) as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ScenarioError(f"cannot read scenario {path}: {e}", path=path) from e
    spec = ScenarioSpec.from_dict(data)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if args.preset is not None:
        spec = replace(spec, noise=args.preset)
    if args.out is not None:
        spec = replace(spec, output=args.out)
    if getattr(args, "repetitions", None):
        spec = replace(spec, repetitions=args.repetitions)
    return spec


def _angles(text: str) -> list[float]:
    try:
        return [float(a) for a in text.split(",") if a.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad angle list {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="roadsonic", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("scenario", help="scenario JSON file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output path prefix")
        sp.add_argument("--preset", choices=sorted(PRESETS))
        sp.add_argument("--repetitions", type=int)

    common(sub.add_parser("run", help="run a scenario and write aggregate CSV + per-pass JSONL"))
    sw = sub.add_parser("sweep", help="error-vs-angle series")
    common(sw)
    sw.add_argument("--angles", type=_angles, default=[30.0, 45.0, 60.0, 90.0, 135.0, 150.0])

    cal = sub.add_parser("calibrate", help="score candidate noise sigmas against the reference cells")
    cal.add_argument("--sigmas", type=_angles, default=[0.06, 0.08, 0.10])
    cal.add_argument("--repetitions", type=int, default=100)
    cal.add_argument("--seed", type=int, default=0)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        if args.command == "run":
            spec = _load(args.scenario, args)
            res = run_scenario(spec)
            if not spec.output:
                sys.stdout.write(res.to_csv())
            print(json.dumps(res.summary(), sort_keys=True), file=sys.stderr)
        elif args.command == "sweep":
            spec = _load(args.scenario, args)
            text = sweep_to_csv(sweep_angles(spec, args.angles))
            if spec.output:
                with open(f"{spec.output}-sweep.csv", "w", newline="") as f:
                    f.write(text)
            else:
                sys.stdout.write(text)
        elif args.command == "calibrate":
            report = calibrate(args.sigmas, args.repetitions, seed=args.seed)
            print(json.dumps(report, indent=2, sort_keys=True))
    except (PipelineError, KeyError, ValueError) as e:
        err = e.to_dict() if isinstance(e, PipelineError) else {
            "code": "SCENARIO_ERROR", "message": str(e)}
        print(json.dumps({"error": err}, sort_keys=True), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
