"""Command-line interface.

Every command resolves its configuration as CLI flags > config file > defaults
(flags mirror config keys one-to-one), writes its outputs plus a
``manifest.json`` into a run directory, and is bit-reproducible from that
manifest via ``dvsim rerun``.

Exit codes: 0 success, 2 invalid config/scene, 3 I/O failure, 4 experiment
precondition failure.  Failures print a single machine-parsable line to
stderr: ``error(<kind>): <message>``.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys
from dataclasses import fields

from . import characterize, readout
from .config import (
    ConfigError,
    NoiseMode,
    SensorConfig,
    config_from_mapping,
    parse_config_file,
    parse_kv_lines,
)
from .characterize import PreconditionError
from .pixel import ArraySimulator
from .stimulus import RotatingChart, SceneError, build_chart_wedges, parse_scene_file, scene_from_mapping

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_PRECONDITION = 4


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("sensor config overrides (mirror config-file keys)")
    units = {
        "pixel_pitch_um": "um",
        "f_cut_hz": "Hz",
        "refractory_us": "us",
        "dt_us": "us",
        "theta_on": "log units",
        "theta_off": "log units",
        "aps_fullwell_e": "e-",
    }
    for f in fields(SensorConfig):
        help_txt = f"override {f.name}" + (f" [{units[f.name]}]" if f.name in units else "")
        group.add_argument(f"--{f.name}", default=None, metavar="V", help=help_txt)


def _resolve_config(args) -> SensorConfig:
    base = SensorConfig()
    if args.config:
        base = parse_config_file(args.config)
    overrides = {}
    for f in fields(SensorConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            overrides[str(f.name)] = str(v)
    return config_from_mapping(overrides, base)


def _out_dir(args, command: str) -> str:
    if args.out:
        path = args.out
    else:
        stamp = datetime.datetime.now(datetime.timezone.utc).strftime("%Y%m%dT%H%M%S")
        path = f"{command}-{stamp}"
    os.makedirs(path, exist_ok=True)
    return path


def _config_dict(cfg: SensorConfig) -> dict:
    out = {}
    for f in fields(SensorConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, NoiseMode):
            v = v.value
        out[f.name] = v
    return out


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(out_dir, command, cfg, scene_pairs, cmd_args, outputs) -> None:
    manifest = {
        "command": command,
        "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "config": _config_dict(cfg),
        "scene": scene_pairs,
        "args": cmd_args,
        "outputs": sorted(outputs),
    }
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)


def _load_scene_pairs(args) -> dict | None:
    if not getattr(args, "scene", None):
        return None
    with open(args.scene, "r", encoding="utf-8") as fh:
        return parse_kv_lines(fh.read())


def _scene_from_pairs(pairs, cfg, base_dir="."):
    return scene_from_mapping(pairs, cfg, base_dir=base_dir)


# ---------------------------------------------------------------------------
# Commands (each returns the list of output file names it wrote)
# ---------------------------------------------------------------------------


def _cmd_simulate(cfg, scene_pairs, args, out_dir, scene_dir=".") -> list[str]:
    if scene_pairs is None:
        raise SceneError("simulate requires --scene")
    scene = _scene_from_pairs(scene_pairs, cfg, scene_dir)
    sim = ArraySimulator(cfg, run_key=int(args.run_key))
    sim.reset(scene, 0)
    ev = sim.run(scene, int(args.duration_ms * 1000), workers=int(args.workers))
    outputs = []
    if args.format in ("binary", "both"):
        readout.save_events(os.path.join(out_dir, "events.bin"), ev, "binary", cfg.width, cfg.height)
        outputs.append("events.bin")
    if args.format in ("csv", "both"):
        readout.save_events(os.path.join(out_dir, "events.csv"), ev, "csv")
        outputs.append("events.csv")
    print(f"simulate: {len(ev)} events over {args.duration_ms} ms -> {out_dir}")
    return outputs


def _cmd_scurve(cfg, scene_pairs, args, out_dir, scene_dir=".") -> list[str]:
    contrasts = [float(c) for c in args.contrasts.split(",")]
    outputs = []
    report = {"base_lux": args.base_lux, "trials": args.trials}
    polarities = {"on": [1], "off": [-1], "both": [1, -1]}[args.polarity]
    for pol in polarities:
        curve = characterize.measure_s_curve(
            cfg, contrasts, base_lux=args.base_lux, trials=args.trials, polarity=pol
        )
        name = "on" if pol > 0 else "off"
        fname = f"scurve_{name}.csv"
        with open(os.path.join(out_dir, fname), "w", encoding="utf-8") as fh:
            fh.write(curve.to_csv())
        outputs.append(fname)
        nct = characterize.estimate_nct(curve)
        report[f"nct_{name}"] = nct
        report[f"control_fraction_{name}"] = curve.points[0].fraction
        shown = f"{100 * nct:.3f}%" if nct is not None else "not reached"
        print(f"scurve {name.upper()}: NCT = {shown}")
    _write_json(os.path.join(out_dir, "nct_report.json"), report)
    outputs.append("nct_report.json")
    return outputs


def _cmd_noise(cfg, scene_pairs, args, out_dir, scene_dir=".") -> list[str]:
    outputs = []
    if args.lux_list:
        lux = [float(v) for v in args.lux_list.split(",")]
        on, off = characterize.noise_sweep_illuminance(cfg, lux, duration_s=args.duration_s)
        for name, res in (("noise_lux_binned.csv", on), ("noise_lux_unbinned.csv", off)):
            with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
                fh.write(res.to_csv())
            outputs.append(name)
        _write_json(
            os.path.join(out_dir, "noise_lux.json"),
            {"binned": on.to_dict(), "unbinned": off.to_dict()},
        )
        outputs.append("noise_lux.json")
        print(f"noise sweep over {len(lux)} illuminance points -> {out_dir}")
    elif args.fcut_list:
        fcuts = [float(v) for v in args.fcut_list.split(",")]
        res = characterize.noise_sweep_fcut(cfg, fcuts, lux=args.lux, duration_s=args.duration_s)
        with open(os.path.join(out_dir, "noise_fcut.csv"), "w", encoding="utf-8") as fh:
            fh.write(res.to_csv())
        _write_json(os.path.join(out_dir, "noise_fcut.json"), res.to_dict())
        outputs += ["noise_fcut.csv", "noise_fcut.json"]
        print(f"noise sweep over {len(fcuts)} cutoff points at {args.lux} lux -> {out_dir}")
    else:
        raise PreconditionError("noise requires --lux-list or --fcut-list")
    return outputs


def _cmd_chart(cfg, scene_pairs, args, out_dir, scene_dir=".") -> list[str]:
    if scene_pairs is not None:
        chart = _scene_from_pairs(scene_pairs, cfg, scene_dir)
        if not isinstance(chart, RotatingChart):
            raise SceneError("chart command requires a rotating_chart scene")
    else:
        tests = [float(c) for c in args.contrasts.split(",")]
        wedges = build_chart_wedges(tests, reset_contrast=args.reset_contrast)
        chart = RotatingChart(
            args.base_lux, wedges, width=cfg.width, height=cfg.height, rotation_hz=args.rotation_hz
        )
    res, ev = characterize.chart_detection(
        cfg, chart, int(args.duration_s * 1e6), noise_limit_hz=args.noise_limit_hz
    )
    outputs = ["chart_report.json", "chart_detection.csv"]
    _write_json(os.path.join(out_dir, "chart_report.json"), res.to_dict())
    with open(os.path.join(out_dir, "chart_detection.csv"), "w", encoding="utf-8") as fh:
        fh.write(res.to_csv())
    window = int(chart.period_us)
    for i in range(min(res.n_rotations, args.accumulation_frames)):
        t0 = int(ev["t"].min()) if len(ev) else 0
        frame = readout.accumulate(ev, t0 + i * window, window, cfg.width, cfg.height)
        name = f"accumulation_{i:02d}.pgm"
        readout.accumulation_to_pgm(frame, os.path.join(out_dir, name))
        outputs.append(name)
    detected = [f"{100 * e.contrast:.2f}%{'+' if e.polarity > 0 else '-'}" for e in res.edges if e.detected]
    print(
        f"chart: detected {detected}; noise {res.noise_rate_hz_px:.2f} Hz/px "
        f"({'ok' if res.noise_ok else 'over limit'})"
    )
    return outputs


def _cmd_budget(cfg, scene_pairs, args, out_dir, scene_dir=".") -> list[str]:
    rep = characterize.photon_budget(args.lux, args.fcut, cfg, args.binned)
    son = f"{100 * rep.sigma_over_n:.3f}%" if rep.sigma_over_n is not None else "undefined"
    print(
        f"budget: L={rep.lux} lux f_cut={rep.f_cut_hz} Hz tau={1e3 * rep.tau_s:.2f} ms "
        f"N={rep.n_electrons / 1e3:.1f} ke- sigma/N={son}"
    )
    _write_json(os.path.join(out_dir, "budget.json"), rep.to_dict())
    return ["budget.json"]


def _cmd_aps(cfg, scene_pairs, args, out_dir, scene_dir=".") -> list[str]:
    if scene_pairs is None:
        raise SceneError("aps requires --scene")
    scene = _scene_from_pairs(scene_pairs, cfg, scene_dir)
    frame = readout.capture_aps(scene, int(args.t_us), int(args.exposure_us), cfg)
    readout.aps_to_pgm(frame, os.path.join(out_dir, "aps.pgm"))
    print(f"aps: {cfg.width}x{cfg.height} frame, exposure {args.exposure_us} us -> {out_dir}")
    return ["aps.pgm"]


_COMMANDS = {
    "simulate": _cmd_simulate,
    "scurve": _cmd_scurve,
    "noise": _cmd_noise,
    "chart": _cmd_chart,
    "budget": _cmd_budget,
    "aps": _cmd_aps,
}


def _run_command(command, cfg, scene_pairs, args, out_dir, scene_dir=".") -> None:
    outputs = _COMMANDS[command](cfg, scene_pairs, args, out_dir, scene_dir)
    cmd_args = {
        k: v
        for k, v in vars(args).items()
        if k not in {"func", "command", "config", "scene", "out"}
        and not any(k == f.name for f in fields(SensorConfig))
        and v is not None
    }
    _write_manifest(out_dir, command, cfg, scene_pairs, cmd_args, outputs)


class _ManifestArgs(argparse.Namespace):
    """Namespace where unspecified command arguments read as None."""

    def __getattr__(self, name):
        return None


def _cmd_rerun(args) -> None:
    with open(args.manifest, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    command = manifest["command"]
    if command not in _COMMANDS:
        raise PreconditionError(f"manifest names unknown command {command!r}")
    cfg = config_from_mapping({k: str(v) for k, v in manifest["config"].items()})
    ns = _ManifestArgs(**manifest["args"])
    out_dir = args.out or _out_dir(args, f"rerun-{command}")
    os.makedirs(out_dir, exist_ok=True)
    scene_dir = os.path.dirname(os.path.abspath(args.manifest))
    _run_command(command, cfg, manifest["scene"], ns, out_dir, scene_dir)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dvsim",
        description="Event-camera pixel-array simulator and characterization harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, scene: bool = False):
        p.add_argument("--config", help="sensor config file (flat key = value lines)")
        if scene:
            p.add_argument("--scene", help="scene file (scene.* keys, same syntax)")
        p.add_argument("--out", help="output directory (default: <command>-<timestamp>)")
        _add_config_flags(p)

    p = sub.add_parser("simulate", help="run a scene and write the event stream")
    common(p, scene=True)
    p.add_argument("--duration-ms", type=float, required=True, help="simulated time [ms]")
    p.add_argument("--format", choices=("binary", "csv", "both"), default="both")
    p.add_argument("--workers", type=int, default=1, help="row-band parallelism (output identical for any N)")
    p.add_argument("--run-key", type=int, default=0, help="extra stream nonce for independent repeats")

    p = sub.add_parser("scurve", help="step-response S-curve and contrast threshold")
    common(p)
    p.add_argument("--contrasts", required=True, help="comma-separated contrast magnitudes, e.g. 0.008,0.012")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--base-lux", type=float, default=40.0)
    p.add_argument("--polarity", choices=("on", "off", "both"), default="both")

    p = sub.add_parser("noise", help="noise-rate sweep over illuminance or cutoff")
    common(p)
    p.add_argument("--lux-list", help="comma-separated illuminances [lux]")
    p.add_argument("--fcut-list", help="comma-separated cutoff frequencies [Hz]")
    p.add_argument("--lux", type=float, default=0.21, help="illuminance for the cutoff sweep")
    p.add_argument("--duration-s", type=float, default=5.0)

    p = sub.add_parser("chart", help="rotating-chart edge-detection experiment")
    common(p, scene=True)
    p.add_argument("--contrasts", default="0.01,0.017,0.025", help="signed test-edge contrasts")
    p.add_argument("--base-lux", type=float, default=0.7)
    p.add_argument("--rotation-hz", type=float, default=5.0)
    p.add_argument("--reset-contrast", type=float, default=0.20)
    p.add_argument("--duration-s", type=float, default=1.0)
    p.add_argument("--noise-limit-hz", type=float, default=6.0)
    p.add_argument("--accumulation-frames", type=int, default=1)

    p = sub.add_parser("budget", help="photon budget and noise-floor contrast (no simulation)")
    common(p)
    p.add_argument("--lux", type=float, required=True)
    p.add_argument("--fcut", type=float, required=True)
    binned = p.add_mutually_exclusive_group()
    binned.add_argument("--binned", dest="binned", action="store_true", default=True)
    binned.add_argument("--unbinned", dest="binned", action="store_false")

    p = sub.add_parser("aps", help="global-shutter snapshot of a scene")
    common(p, scene=True)
    p.add_argument("--exposure-us", type=int, required=True)
    p.add_argument("--t-us", type=int, default=0, help="capture time")

    p = sub.add_parser("rerun", help="re-execute a run from its manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="output directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "rerun":
            _cmd_rerun(args)
            return 0
        cfg = _resolve_config(args)
        scene_pairs = _load_scene_pairs(args)
        scene_dir = os.path.dirname(os.path.abspath(args.scene)) if getattr(args, "scene", None) else "."
        out_dir = _out_dir(args, args.command)
        _run_command(args.command, cfg, scene_pairs, args, out_dir, scene_dir)
        return 0
    except (ConfigError, SceneError) as exc:
        print(f"error(config): {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error(io): {exc}", file=sys.stderr)
        return EXIT_IO
    except PreconditionError as exc:
        print(f"error(precondition): {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except ValueError as exc:  # malformed manifests, unparsable numbers
        print(f"error(config): {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
