"""Command-line entry point: ``wideaoa simulate|selfloc|music-demo|report``."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from .array_model import ArrayConfig
from .channel_sim import PropagationPath, synthesize_csi
from .experiments import (
    ExperimentConfig,
    emit_reports,
    emit_selfloc_reports,
    load_records,
    run_selfloc_benchmark,
    run_stage_simulation,
    summarize,
    summarize_selfloc,
)
from .io import profile_summary, to_jsonable, write_csi_csv, write_profile_csv
from .music import estimate_profile, profile_peaks_with_ambiguity


def _config(args) -> ExperimentConfig:
    doc = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    overrides = {
        "seed": args.seed,
        "trials": args.trials,
        "node_counts": args.nodes,
        "stages": list(args.stage) if args.stage else None,
        "mode": args.mode,
        "output_dir": args.out,
    }
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(doc)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file mirroring ExperimentConfig")
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--nodes", type=int, nargs="+", help="node counts, e.g. --nodes 2 3 5")
    p.add_argument("--stage", nargs="+", choices=["a", "b", "c", "d"])
    p.add_argument("--mode", choices=["abstract", "csi"])
    p.add_argument("--out", help="output directory")


def cmd_simulate(args) -> int:
    config = _config(args)
    records = run_stage_simulation(config)
    files = emit_reports(records, config.output_dir)
    print(json.dumps(to_jsonable(summarize(records)), indent=2, sort_keys=True))
    print(f"wrote {len(files)} files to {config.output_dir}", file=sys.stderr)
    return 0


def cmd_selfloc(args) -> int:
    config = _config(args)
    records = run_selfloc_benchmark(config)
    emit_selfloc_reports(records, config.output_dir)
    print(json.dumps(to_jsonable(summarize_selfloc(records)), indent=2, sort_keys=True))
    return 0


def cmd_music_demo(args) -> int:
    array = ArrayConfig()
    paths = [PropagationPath(math.radians(args.angle), args.tof * 1e-9)]
    if args.second_angle is not None:
        paths.append(PropagationPath(math.radians(args.second_angle), args.second_tof * 1e-9, 0.7 + 0j, False))
    frame = synthesize_csi(paths, array, snr_db=args.snr, seed=args.seed if args.seed is not None else 0)
    profile = estimate_profile(frame, array)
    families = profile_peaks_with_ambiguity(profile, array)
    out = Path(args.out or "music_demo")
    out.mkdir(parents=True, exist_ok=True)
    write_csi_csv(frame, out / "csi.csv")
    write_profile_csv(profile, out / "spectrum.csv")
    summary = profile_summary(families, profile.error_range)
    (out / "families.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    for f in summary["families"]:
        lobes = ", ".join(f"{a:.2f}" for a in f["angles_deg"])
        print(f"family tof={f['tof_ns']:.1f} ns power={f['power']:.3g}: lobes [{lobes}] deg")
    return 0


def cmd_report(args) -> int:
    if not args.input:
        raise SystemExit("report needs --input <trials.jsonl or trials_stage_x.csv>")
    records = []
    for path in args.input:
        records.extend(load_records(path))
    out = args.out or "report"
    emit_reports(records, out)
    print(json.dumps(to_jsonable(summarize(records)), indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wideaoa", description="AOA localization with wide-spaced two-antenna arrays")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="four-stage target localization Monte Carlo")
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("selfloc", help="BTS vs ISU sequential-join benchmark")
    _common(p)
    p.set_defaults(func=cmd_selfloc)

    p = sub.add_parser("music-demo", help="synthesize one CSI frame and run MUSIC on it")
    _common(p)
    p.add_argument("--angle", type=float, default=20.0, help="direct-path AOA, degrees")
    p.add_argument("--tof", type=float, default=20.0, help="direct-path ToF, ns")
    p.add_argument("--second-angle", type=float, help="optional reflected-path AOA, degrees")
    p.add_argument("--second-tof", type=float, default=60.0, help="reflected-path ToF, ns")
    p.add_argument("--snr", type=float, default=20.0, help="SNR in dB")
    p.set_defaults(func=cmd_music_demo)

    p = sub.add_parser("report", help="rebuild CDF/summary reports from trial logs")
    _common(p)
    p.add_argument("--input", nargs="+", help="trial log(s): .jsonl or per-stage .csv")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
