"""Command line front end.

Exit codes: 0 success, 1 acceptance failure, 2 infeasible synthesis or
certification, 3 invalid configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, bundle
from .config import load_config
from .errors import ConfigError, InfeasibleError, SimulationDiverged
from .pipeline import build_plant, run_certification, run_simulation, run_synthesis
from .simulator import SimTrace

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_ACCEPTANCE, EXIT_INFEASIBLE, EXIT_CONFIG = 0, 1, 2, 3

CONTROLLER_FILE = "controller.txt"
CERTIFICATE_FILE = "certificate.txt"
TRACE_FILE = "trace.csv"


def _out_dir(args, cfg):
    return Path(args.out) if args.out else cfg.output_dir


def _write_json(path, obj):
    bundle.atomic_write_text(path, json.dumps(analysis._jsonable(obj), indent=2, sort_keys=True) + "\n")


def _synth(cfg, out, plant=None):
    controller, report, plant = run_synthesis(cfg, plant)
    meta = {"config": cfg.name, "objective": cfg.synthesis.objective, "structure": cfg.synthesis.structure}
    bundle.write_controller(out / CONTROLLER_FILE, controller, meta)
    _write_json(
        out / "verification.json",
        {
            "verification": report.as_dict(),
            "references": plant.sigma.as_record(),
            "regulator": {
                "residual_dynamics": plant.sylvester.residual_dynamics,
                "residual_output": plant.sylvester.residual_output,
                "condition": plant.sylvester.condition,
            },
        },
    )
    print(f"controller written to {out / CONTROLLER_FILE}; verification {'passed' if report.passed else 'FAILED'}")
    return controller, report, plant


def _certify(cfg, out):
    result = run_certification(cfg)
    bundle.write_certificate(out / CERTIFICATE_FILE, result, {"config": cfg.name})
    _write_json(out / "certification.json", result.as_dict())
    if result.feasible:
        print(f"certificate written to {out / CERTIFICATE_FILE}; smallest vertex margin {min(result.vertex_margins.values()):.6g}")
    else:
        v = result.worst_vertex
        print(
            f"certification infeasible on box [{cfg.certification_box.eta_low}, {cfg.certification_box.eta_high}]: "
            f"most violated vertex (eta_u, eta_l) = ({v[0]:g}, {v[1]:g}) with margin "
            f"{result.vertex_margins[v]:.6g}, direction {np.array2string(result.worst_direction, precision=4)}",
            file=sys.stderr,
        )
    return result


def _load_Q(out):
    path = out / CERTIFICATE_FILE
    if not path.exists():
        return None
    sections, meta = bundle.read_bundle(path)
    return sections["Q_phase"] if meta.get("feasible") == "true" else None


def cmd_synth(args, cfg):
    out = _out_dir(args, cfg)
    _, report, _ = _synth(cfg, out)
    return EXIT_OK if report.passed else EXIT_ACCEPTANCE


def cmd_certify(args, cfg):
    result = _certify(cfg, _out_dir(args, cfg))
    return EXIT_OK if result.feasible else EXIT_INFEASIBLE


def cmd_simulate(args, cfg):
    out = _out_dir(args, cfg)
    ctrl_path = Path(args.controller) if args.controller else out / CONTROLLER_FILE
    controller = bundle.read_controller(ctrl_path)
    trace = run_simulation(cfg, controller, Q_phase=_load_Q(out))
    path = out / TRACE_FILE
    import io

    buf = io.StringIO()
    trace.write_csv(buf)
    bundle.atomic_write_text(path, buf.getvalue())
    print(f"trace with {len(trace)} rows written to {path}")
    return EXIT_OK


def cmd_analyze(args, cfg):
    out = _out_dir(args, cfg)
    ctrl_path = Path(args.controller) if args.controller else out / CONTROLLER_FILE
    trace_path = Path(args.trace) if args.trace else out / TRACE_FILE
    controller = bundle.read_controller(ctrl_path)
    trace = SimTrace.read_csv(trace_path)
    plant = build_plant(cfg)
    summary = analysis.report(
        trace, controller, None, plant.sigma, spec=plant.spec, out_dir=out, transient_periods=cfg.transient_periods
    )
    return _print_checks(summary)


def _print_checks(summary):
    for name, ok in sorted(summary["checks"].items()):
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return EXIT_OK if summary.get("all_checks_pass", True) in (True, None) else EXIT_ACCEPTANCE


def cmd_pipeline(args, cfg):
    out = _out_dir(args, cfg)
    controller, report, plant = _synth(cfg, out)
    cert = _certify(cfg, out)
    trace = run_simulation(cfg, controller, plant, Q_phase=cert.Q_phase if cert.feasible else None)
    summary = analysis.report(
        trace,
        controller,
        cert,
        plant.sigma,
        spec=plant.spec,
        out_dir=out,
        verification=report.as_dict(),
        transient_periods=cfg.transient_periods,
        plots=args.plots,
    )
    status = _print_checks(summary)
    print(f"{'PASS' if report.passed else 'FAIL'}  controller_verification")
    print(f"{'PASS' if cert.feasible else 'FAIL'}  certification")
    if not cert.feasible:
        return EXIT_INFEASIBLE
    if not report.passed:
        return EXIT_ACCEPTANCE
    return status


COMMANDS = {
    "synth": (cmd_synth, "synthesize and verify the tracking controller"),
    "certify": (cmd_certify, "search a common Lyapunov certificate over the insertion-index box"),
    "simulate": (cmd_simulate, "simulate the closed loop with a stored controller"),
    "analyze": (cmd_analyze, "spectral and steady-state report for a stored trace"),
    "pipeline": (cmd_pipeline, "run synth, certify, simulate and analyze"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="mmcctl", description="MMC current-control synthesis and verification")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--out", help="output directory (default: output_dir from the config)")
        p.add_argument("--verbose", "-v", action="store_true")
        if name in ("simulate", "analyze"):
            p.add_argument("--controller", help=f"controller bundle (default: <out>/{CONTROLLER_FILE})")
        if name == "analyze":
            p.add_argument("--trace", help=f"trace CSV (default: <out>/{TRACE_FILE})")
        if name == "pipeline":
            p.add_argument("--plots", action="store_true", help="also write SVG plots (needs matplotlib)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command][0](args, cfg)
    except ConfigError as exc:
        print(f"invalid configuration ({exc.field}): {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        if exc.diagnostics:
            print(json.dumps(analysis._jsonable(exc.diagnostics), sort_keys=True), file=sys.stderr)
        return EXIT_INFEASIBLE
    except SimulationDiverged as exc:
        print(f"simulation diverged: {exc}", file=sys.stderr)
        return EXIT_ACCEPTANCE
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if isinstance(exc, FileNotFoundError) else EXIT_ACCEPTANCE


if __name__ == "__main__":
    sys.exit(main())
