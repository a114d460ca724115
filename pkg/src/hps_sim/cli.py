"""Command-line entry point.

    hps-sim simulate|kkt|verify|reproduce [--scenario PATH] [--case i|ii]
            [--t-final S] [--output DIR] [--set k=v]...

Exit codes: 0 success, 1 input error, 2 non-convergence, 3 verification failure.
Inputs are parsed and validated before anything is written, so an input error
leaves no partial outputs behind.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .analysis import storage_channels
from .dynamics import DegenerateScenarioError
from .integrator import default_tolerance
from .kkt import SingularKKTError, current_sharing_error, solve_kkt
from .scenario import ScenarioError, load_scenario
from .workflows import format_table, reproduce, run_simulation, sim_config, verify

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED, EXIT_VERIFY = 0, 1, 2, 3
MONITOR_COLUMNS = ("S_p", "S_h", "S_c", "S")


@dataclass
class RunManifest:
    scenario_path: str | None
    command: str
    overrides: list[str]
    output_dir: str
    outputs: list[str] = field(default_factory=list)
    checks: dict = field(default_factory=dict)
    wall_clock_seconds: float = 0.0

    def write(self, directory: Path) -> Path:
        path = directory / "manifest.json"
        path.write_text(_json(asdict(self)))
        return path


def _json(obj) -> str:
    """Deterministic JSON; floats keep full round-trip precision."""
    return json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n"


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _load(args):
    params, raw = load_scenario(args.scenario, case=args.case, overrides=args.set)
    if args.t_final is not None and not args.t_final > 0:
        raise ScenarioError("--t-final must be positive")
    return params, raw


def cmd_simulate(args, manifest: RunManifest) -> int:
    params, raw = _load(args)
    # validate the run configuration before touching the output directory
    sim_config(raw, args.t_final, args.output_step)
    sys_, traj = run_simulation(params, raw, args.t_final, args.output_step)
    extra = ()
    if args.monitors:
        traj.monitors.update(storage_channels(params, sys_, traj.states))
        extra = MONITOR_COLUMNS
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    traj.write_csv(out / "trajectory.csv", sys_.state_names(), extra)
    summary = {
        "converged": traj.converged,
        "converged_time": traj.converged_time,
        "t_final": float(traj.times[-1]),
        "final_residual": float(traj.monitors["residual"][-1]),
        "tolerance": default_tolerance(sys_),
        "terminal": {k: sys_.block(traj.final, k) for k in ("z_l", "p", "I_td", "V_d", "s*")},
    }
    (out / "summary.json").write_text(_json(summary))
    manifest.outputs += ["trajectory.csv", "summary.json"]
    if args.export_system:
        manifest.outputs += [p.name for p in sys_.export(out)]
    manifest.checks["convergence"] = traj.converged
    z = sys_.block(traj.final, "z_l")
    print(f"{'converged' if traj.converged else 'NOT converged'} at t = {traj.times[-1]:g} s; "
          f"residual {summary['final_residual']:.3g} (tol {summary['tolerance']:.3g})")
    print("terminal z_l = " + " ".join(f"{v:.4f}" for v in z))
    return EXIT_OK if traj.converged else EXIT_NOT_CONVERGED


def cmd_kkt(args, manifest: RunManifest) -> int:
    params, _ = _load(args)
    sol = solve_kkt(params)
    doc = sol.to_dict()
    doc["current_sharing_error"] = current_sharing_error(sol.primal, params.pi_c)
    text = _json(doc)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "kkt.json").write_text(text)
    manifest.outputs.append("kkt.json")
    ok = max(sol.stationarity_residual, sol.feasibility_residual) < 1e-9 * (1 + np.linalg.norm(sol.vector()))
    manifest.checks["kkt_residual"] = bool(ok)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_verify(args, manifest: RunManifest) -> int:
    params, raw = _load(args)
    if args.t_final is not None:
        raw = {**raw, "simulation": {**raw.get("simulation", {}), "t_final": args.t_final}}
    results = verify(params, raw)
    sol = solve_kkt(params)
    report = {
        "checks": [asdict(r) for r in results],
        "passed": all(r.passed for r in results),
        "I_td_bar": sol.primal["I_td"],
    }
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "verify.json").write_text(_json(report))
    manifest.outputs.append("verify.json")
    for r in results:
        manifest.checks[r.name] = r.passed
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<20} {r.value:.3g} (threshold {r.threshold:.3g})  {r.detail}")
    print("I_td_bar = " + " ".join(f"{v:.4g}" for v in sol.primal["I_td"]))
    return EXIT_OK if report["passed"] else EXIT_VERIFY


def cmd_reproduce(args, manifest: RunManifest) -> int:
    if args.case is not None:
        raise ScenarioError("reproduce always runs both cases; drop --case")
    rows, info = reproduce(overrides=args.set, path=args.scenario)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"rows": [r.to_dict() for r in rows],
           "cases": {k: {kk: vv for kk, vv in v.items() if kk != "seconds"} for k, v in info.items()}}
    (out / "reproduce.json").write_text(_json(doc))
    manifest.outputs.append("reproduce.json")
    manifest.checks.update({f"{r.quantity} [{r.index + 1}]": r.passed for r in rows})
    print(format_table(rows))
    n_bad = sum(not r.passed for r in rows)
    print(f"\n{len(rows) - n_bad}/{len(rows)} entries within tolerance")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "kkt": cmd_kkt, "verify": cmd_verify, "reproduce": cmd_reproduce}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hps-sim", description="Human-physical microgrid simulator")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--scenario", default=None, help="scenario JSON (default: bundled reference scenario)")
    ap.add_argument("--case", choices=("i", "ii"), default=None, help="social case override")
    ap.add_argument("--t-final", type=float, default=None, help="simulation horizon in seconds")
    ap.add_argument("--output-step", type=float, default=None, help="sampling interval of the trajectory")
    ap.add_argument("--output", default="hps_out", help="output directory")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="dotted-path override applied before validation (repeatable)")
    ap.add_argument("--monitors", action="store_true", help="append storage channels to the trajectory CSV")
    ap.add_argument("--export-system", action="store_true", help="also write M.mtx, b.vec and index_map.json")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    manifest = RunManifest(args.scenario, args.command, list(args.set), args.output)
    t0 = time.perf_counter()
    try:
        code = COMMANDS[args.command](args, manifest)
    except (ScenarioError, SingularKKTError, DegenerateScenarioError, ValueError) as exc:
        print(f"hps-sim: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    manifest.wall_clock_seconds = time.perf_counter() - t0
    manifest.outputs.append(manifest.write(Path(args.output)).name)
    return code


if __name__ == "__main__":
    sys.exit(main())
