"""Command-line entry point: ``tipservo {gen,calibrate,track,simulate,verify}``."""

import argparse
import json
import os
import sys

import numpy as np

from . import harness as hz
from .calibration import HandEyeCalibrator
from .geometry import ConfigurationError
from .scenario import (CorruptionSpec, Rig, TrajectorySpec, WarmupLog, generate_trajectory, observe,
                       spec_from_dict)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _load_config(path):
    if not path:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigurationError("config root must be a JSON object")
    return cfg


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    return o


def _write(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def _emit_rows(out, stem, rows, fmt):
    """Write summary rows as CSV or JSONL; returns the file name."""
    if fmt == "csv":
        _, text, _ = hz.report([{"method": r.get("method", "default"), "summary": r} for r in rows])
        name = f"{stem}.csv"
    else:
        text = "".join(json.dumps(_jsonable(r), sort_keys=True) + "\n" for r in rows)
        name = f"{stem}.jsonl"
    _write(os.path.join(out, name), text)
    return name


def _world(cfg):
    try:
        rig = Rig.from_dict(cfg["rig"]) if "rig" in cfg else Rig.default()
        traj = spec_from_dict(TrajectorySpec, cfg.get("trajectory", {})).validate()
        cor = spec_from_dict(CorruptionSpec, cfg.get("corruption",
                                                     {"pixel_noise_sigma": 1.0, "jitter_frames_max": 3})).validate()
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigurationError(f"invalid world config: {exc}") from exc
    return rig, traj, cor


def cmd_gen(args, cfg):
    rig, traj, cor = _world(cfg)
    log = observe(rig, generate_trajectory(traj, rig, seed=args.seed), cor, seed=args.seed)
    log.write_jsonl(os.path.join(args.out, "warmup.jsonl"))
    _write(os.path.join(args.out, "rig.json"), json.dumps(rig.to_dict(), sort_keys=True, indent=1))
    print(f"wrote {len(log)} frames to {os.path.join(args.out, 'warmup.jsonl')}")
    return EXIT_OK


def cmd_calibrate(args, cfg):
    rig, traj, cor = _world(cfg)
    path = cfg.get("log")
    if path:
        log = WarmupLog.read_jsonl(path, rig)
    else:
        log = observe(rig, generate_trajectory(traj, rig, seed=args.seed), cor, seed=args.seed)
    methods = cfg.get("methods", ["bichamfer", "euclidean", "jacobian_regression", "pnp_stub"])
    rows, results = [], {}
    for m in methods:
        try:
            est = HandEyeCalibrator(rig.camera, method=m, seed=args.seed).fit(log)
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from exc
        rep = est.report(log)
        row = {"method": m, "rotation_error_deg": float(est.rotation_error_deg(rig.R)), **rep}
        rows.append(row)
        results[m] = est.result_.to_dict()
    _write(os.path.join(args.out, "calibration.json"), json.dumps(_jsonable(results), sort_keys=True, indent=1))
    name = _emit_rows(args.out, "calibration_report", rows, args.format)
    for r in rows:
        print(f"{r['method']:>20s}  rot {r['rotation_error_deg']:.3f} deg  reproj {r['reproj_mean']:.2f} px  "
              f"chamfer {r['chamfer_mean']:.2f} px")
    print(f"wrote {name}")
    proposed = results.get("bichamfer")
    return EXIT_OK if proposed is None or proposed.get("feasible", True) else EXIT_FAIL


def cmd_track(args, cfg):
    exp_t = hz.experiment_from_config(dict(cfg, experiment="tracking_ablation"), seed=args.seed,
                                      repeats=args.repeats)
    exp_c = hz.experiment_from_config(dict(cfg, experiment="coverage_check"), seed=args.seed,
                                      repeats=args.repeats)
    rows = []
    for lg in hz.run(exp_t):
        rows.append(dict(method="tracking_ablation", seed=lg["seed"], **lg["summary"]))
    for lg in hz.run(exp_c):
        rows.append(dict(method="coverage_check", seed=lg["seed"], **lg["summary"]))
    name = _emit_rows(args.out, "tracking_report", rows, args.format)
    print(f"wrote {name}")
    return EXIT_OK


def cmd_simulate(args, cfg):
    name = args.experiment or cfg.get("experiment")
    exp = hz.experiment_from_config(cfg, name=name, seed=args.seed, repeats=args.repeats)
    logs = hz.run(exp)
    rows = []
    for lg in logs:
        tag = f"{exp.name}_seed{lg['seed']}"
        if "steps" in lg:
            _write(os.path.join(args.out, f"{tag}_steps.jsonl"), hz.dumps_steps(lg))
        summ = lg["summary"]
        if exp.name == "calib_ablation":
            rows.extend(dict(method=m, seed=lg["seed"], **v) for m, v in summ.items())
        else:
            rows.append(dict(method=exp.calibration if "steps" in lg else exp.name, seed=lg["seed"], **summ))
        _write(os.path.join(args.out, f"{tag}_summary.json"),
               json.dumps(_jsonable({k: v for k, v in lg.items() if k != "steps"}), sort_keys=True, indent=1))
    _, csv_text, json_text = hz.report([{"method": r["method"], "summary": r} for r in rows])
    _write(os.path.join(args.out, f"{exp.name}_report.csv"), csv_text)
    _write(os.path.join(args.out, f"{exp.name}_report.json"), json_text)
    if args.format == "jsonl":
        _emit_rows(args.out, f"{exp.name}_runs", rows, "jsonl")
    print(f"{exp.name}: {len(logs)} run(s) written to {args.out}")
    return EXIT_OK


def cmd_verify(args, cfg):
    from .acceptance import run_all
    checks = run_all(sys.stdout)
    rows = [{"criterion": c.number, "name": c.name, "passed": c.passed, "seconds": c.seconds,
             **{k: (v if not isinstance(v, float) else float(v)) for k, v in c.detail.items()}}
            for c in checks]
    _write(os.path.join(args.out, "acceptance.jsonl"),
           "".join(json.dumps(_jsonable(r), sort_keys=True) + "\n" for r in rows))
    n_ok = sum(c.passed for c in checks)
    print(f"{n_ok}/{len(checks)} criteria passed")
    return EXIT_OK if n_ok == len(checks) else EXIT_FAIL


COMMANDS = {"gen": cmd_gen, "calibrate": cmd_calibrate, "track": cmd_track, "simulate": cmd_simulate,
            "verify": cmd_verify}


def build_parser():
    ap = argparse.ArgumentParser(prog="tipservo", description="Markerless micromanipulation simulator")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="out")
        p.add_argument("--experiment", choices=hz.EXPERIMENTS)
        p.add_argument("--repeats", type=int, default=None)
        p.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.seed < 0:
            raise ConfigurationError("seed must be non-negative")
        if args.repeats is not None and args.repeats < 1:
            raise ConfigurationError("repeats must be >= 1")
        cfg = _load_config(args.config)
        os.makedirs(args.out, exist_ok=True)
        return COMMANDS[args.command](args, cfg)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
