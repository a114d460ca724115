"""End-to-end workflows shared by the CLI, the scripts and the acceptance tests."""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .analysis import dissipation_check, metrics
from .dynamics import (
    ClosedLoopSystem,
    assemble_closed_loop,
    closed_loop_rhs,
    equilibrium,
    spectrum_report,
)
from .integrator import SimConfig, Trajectory, default_tolerance, simulate
from .kkt import solve_kkt
from .model import (
    HumanParams,
    LineParams,
    MonitorConfig,
    NodeParams,
    ScenarioParams,
    SocialCase,
    WelfareWeights,
    controller_P1,
    steady_norms,
    validate,
)
from .scenario import ScenarioError, reference_scenario


# ---------------------------------------------------------------------------
# initial conditions and simulation


def initial_state(params: ScenarioParams, sys: ClosedLoopSystem, spec: dict | None = None) -> np.ndarray:
    """Build x0 from an ``initial_state`` section.

    ``from`` is ``"equilibrium"`` (default: start at the closed-loop rest
    point) or ``"zero"``; every other key names a state block whose values
    replace the base, scalars broadcast.
    """
    spec = dict(spec or {})
    base = spec.pop("from", "equilibrium")
    if base == "equilibrium":
        x0 = equilibrium(sys)
    elif base == "zero":
        x0 = np.zeros(sys.n)
    else:
        raise ScenarioError(f"initial_state.from must be 'equilibrium' or 'zero', got {base!r}")
    for name, value in spec.items():
        if name not in sys.index_map:
            raise ScenarioError(f"initial_state names unknown block {name!r}")
        sl = sys.index_map[name]
        arr = np.asarray(value, dtype=float)
        if arr.ndim and arr.shape != (sl.stop - sl.start,):
            raise ScenarioError(f"initial_state.{name}: expected {sl.stop - sl.start} entries, got {arr.size}")
        x0[sl] = arr
    return x0


def sim_config(raw: dict, t_final: float | None = None, output_step: float | None = None) -> SimConfig:
    sim = raw.get("simulation", {})
    t_final = float(t_final if t_final is not None else sim.get("t_final", 60.0))
    step = float(output_step if output_step is not None else sim.get("output_step", 0.05))
    # the full horizon is always recorded: the default tolerance scales with
    # |b| and can be met while the slow norm states are still moving
    return SimConfig(t_final=t_final, output_step=min(step, t_final), stop_on_convergence=False)


def run_simulation(params: ScenarioParams, raw: dict, t_final: float | None = None,
                   output_step: float | None = None) -> tuple[ClosedLoopSystem, Trajectory]:
    sys = assemble_closed_loop(params)
    x0 = initial_state(params, sys, raw.get("initial_state"))
    return sys, simulate(sys, x0, sim_config(raw, t_final, output_step))


def long_horizon_state(sys: ClosedLoopSystem, x0=None, decades: float = 12.0, samples: int = 200) -> np.ndarray:
    """Terminal state of an exact-step run long enough for the slowest mode
    to decay by ``decades`` orders of magnitude (zero start by default)."""
    rate = -float(np.linalg.eigvals(sys.M).real.max())
    if rate <= 0:
        raise ValueError(f"closed loop is not asymptotically stable (max Re = {-rate:.3g})")
    t_final = decades * math.log(10.0) / rate
    x0 = np.zeros(sys.n) if x0 is None else x0
    cfg = SimConfig(t_final=t_final, output_step=t_final / samples, stop_on_convergence=False)
    return simulate(sys, x0, cfg).final


# ---------------------------------------------------------------------------
# randomized scenarios


def step1_monitor(params: ScenarioParams, margin: float = 1.1, Q_2: float = 1e6) -> MonitorConfig:
    """Monitor weights meeting the sufficiency lines with the given margin.

    zeta_2 and zeta_3 are set just above the smallest values allowed by the
    first two lines, and Q_1 to ``margin`` times what the third line needs.
    """
    z2 = 1.05 * float(np.max(params.I_Ld * params.R_L / 2))
    z3 = 1.05 * max(float(np.max(-params.I_Lq * params.R_L / 2)), 1e-3)
    need = z2 * params.I_Ld / 2 - z3 * params.I_Lq / 2
    Q_1 = margin * np.maximum(need, 1.0)
    return MonitorConfig(Q_1=Q_1, Q_2=np.full(params.N, Q_2), zeta_2=z2, zeta_3=z3)


def random_scenario(rng: np.random.Generator, base: ScenarioParams | None = None) -> ScenarioParams:
    """A valid scenario scattered around *base* (the bundled one by default).

    Electrical and human parameters vary by up to 30 %, welfare weights by a
    factor of two either way, and the social case is drawn at random.  The
    controller gains are those of *base*; the monitor weights are re-derived
    so the sufficiency lines keep holding.
    """
    base = reference_scenario("i") if base is None else base
    N = base.N

    def jitter(v, lo=0.7, hi=1.3):
        return float(v) * rng.uniform(lo, hi)

    nodes = [NodeParams(C_t=jitter(nd.C_t), L_t=jitter(nd.L_t), R_t=jitter(nd.R_t), R_L=jitter(nd.R_L),
                        I_Ld=jitter(nd.I_Ld), I_Lq=jitter(nd.I_Lq), V_r=nd.V_r, pi_c=jitter(1.0, 0.8, 1.2),
                        pi_u=jitter(1.0, 0.8, 1.2))
             for nd in base.nodes]
    lines = [LineParams(R_k=jitter(ln.R_k), L_k=jitter(ln.L_k)) for ln in base.lines]
    human = HumanParams(a=rng.uniform(0.3, 0.8, N), c=rng.uniform(0.05, 0.2, N), d=rng.uniform(0.05, 0.2, N),
                        p_ego=rng.uniform(0.75, 0.95, N), p_bio=rng.uniform(0.45, 0.7, N))
    w = base.weights
    weights = WelfareWeights(*(v * math.exp(rng.uniform(-math.log(2), math.log(2))) for v in w.as_tuple()))
    case = SocialCase.CASE_II if rng.random() < 0.5 else SocialCase.CASE_I
    params = base.replace(nodes=tuple(nodes), lines=tuple(lines), human=human, weights=weights,
                          gains=base.gains, social_case=case)
    params = params.replace(monitor=step1_monitor(params))
    validate(params)
    return params


# ---------------------------------------------------------------------------
# verification suite


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def assembly_error(params: ScenarioParams, sys: ClosedLoopSystem, samples: int = 1000, seed: int = 0) -> float:
    """Largest mismatch between M x + b and the block-wise right-hand side.

    Measured relative to 1 + | |M| |x| + |b| |, the size of the terms summed
    in either route, on standard-normal states.
    """
    rng = np.random.default_rng(seed)
    P_1 = controller_P1(params)
    absM = np.abs(sys.M)
    worst = 0.0
    for _ in range(samples):
        x = rng.standard_normal(sys.n)
        diff = np.linalg.norm(sys.rhs(x) - closed_loop_rhs(params, x, P_1))
        worst = max(worst, diff / (1.0 + np.linalg.norm(absM @ np.abs(x) + np.abs(sys.b))))
    return worst


def relative_gap(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def check_threads() -> int:
    try:
        return max(1, int(os.environ.get("HPS_SIM_THREADS", "1")))
    except ValueError:
        return 1


def verify(params: ScenarioParams, raw: dict | None = None, threads: int | None = None) -> list[CheckResult]:
    """Run every structural and numerical check on one scenario."""
    raw = raw or {}
    sys = assemble_closed_loop(params)
    xbar = equilibrium(sys)
    kkt = solve_kkt(params)
    idx = sys.index_map
    ctrl = xbar[idx["z_l*"].start:]

    def c_assembly():
        err = assembly_error(params, sys)
        return CheckResult("assembly", err <= 1e-12, err, 1e-12, "M x + b vs block-wise right-hand side")

    def c_spectrum():
        rep = spectrum_report(sys)
        return CheckResult("spectrum", rep["stable"], rep["max_real"], 1e-9,
                           f"{rep['n_axis']} axis eigenvalues, {len(rep['defective'])} defective")

    def c_kkt_agreement():
        gap = relative_gap(ctrl, kkt.vector())
        return CheckResult("equilibrium_vs_kkt", gap <= 1e-6, gap, 1e-6, "controller blocks vs direct KKT solve")

    def c_kkt_residual():
        thr = 1e-9 * (1.0 + float(np.linalg.norm(kkt.vector())))
        val = max(kkt.stationarity_residual, kkt.feasibility_residual)
        return CheckResult("kkt_residual", val < thr, val, thr, "stationarity and feasibility")

    def c_dissipation():
        traj = run_simulation(params, raw)[1]
        rep = dissipation_check(traj, params, sys=sys)
        detail = rep.step1.describe() if rep.step1.ok else f"violated line {rep.violated_line}: {rep.step1.describe()}"
        return CheckResult("dissipation", rep.passed, rep.max_increment, rep.threshold, detail)

    def c_convergence():
        traj = run_simulation(params, raw)[1]
        tol = default_tolerance(sys)
        r = float(traj.monitors["residual"][-1])
        return CheckResult("convergence", r < tol, r, tol, f"|Mx+b| at t = {traj.times[-1]:g} s")

    def c_matching():
        m = metrics(params, xbar)
        return CheckResult("current_matching", m.current_matching_residual < 1e-8, m.current_matching_residual, 1e-8,
                           "total load minus total generation, A")

    def c_vq():
        v = float(np.abs(xbar[idx["V_q"]]).max())
        return CheckResult("V_q_zero", v < 1e-8, v, 1e-8, "max |V_q| at equilibrium, V")

    def c_behaviour():
        z, s, p = xbar[idx["z_l"]], xbar[idx["s*"]], xbar[idx["p"]]
        err = float(np.abs(z - (p - params.human.h * s)).max())
        return CheckResult("behaviour_identity", err < 1e-6, err, 1e-6, "z_l - (p_bar - H s)")

    def c_norms():
        err = float(np.abs(xbar[idx["p"]] - steady_norms(params.human, params.laplacian, params.social_case)).max())
        return CheckResult("steady_norms", err < 1e-9, err, 1e-9, "p block vs closed-form norms")

    checks = [c_assembly, c_spectrum, c_kkt_agreement, c_kkt_residual, c_dissipation, c_convergence,
              c_matching, c_vq, c_behaviour, c_norms]
    threads = check_threads() if threads is None else threads
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda f: f(), checks))
    return [f() for f in checks]


# ---------------------------------------------------------------------------
# reproduction of the reported steady values


@dataclass
class Row:
    quantity: str
    index: int
    reference: float
    computed: float
    tolerance: float
    relative: bool = False

    @property
    def error(self) -> float:
        e = abs(self.computed - self.reference)
        return e / abs(self.reference) if self.relative else e

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(error=self.error, passed=self.passed)
        return d


def pi_c_sweep(params: ScenarioParams, node: int = 3, value: float = 100.0) -> np.ndarray:
    """Optimal generated d-currents when one prosumer's generation cost weight is raised."""
    nodes = list(params.nodes)
    nd = nodes[node]
    nodes[node] = NodeParams(**{**asdict(nd), "pi_c": value})
    return solve_kkt(params.replace(nodes=tuple(nodes))).primal["I_td"]


def reproduce(overrides=(), path=None) -> tuple[list[Row], dict]:
    """Case i and case ii end to end, compared with the reference values."""
    from .scenario import load_scenario

    rows: list[Row] = []
    info = {}
    for case in ("i", "ii"):
        params, raw = load_scenario(path, case=case, overrides=overrides)
        ref = raw.get("reported_values", {})
        t0 = time.perf_counter()
        sys, traj = run_simulation(params, raw)
        xbar = equilibrium(sys)
        idx = sys.index_map
        m = metrics(params, xbar)
        info[case] = {
            "converged": traj.converged,
            "terminal_gap": relative_gap(traj.final, xbar),
            "seconds": time.perf_counter() - t0,
            "metrics": m.to_dict(),
        }
        p_bar, z, s = xbar[idx["p"]], xbar[idx["z_l"]], xbar[idx["s*"]]
        ident = np.abs(z - (p_bar - params.human.h * s))
        rows += [Row(f"z_l - (p - H s) case {case}", k, 0.0, float(v), 1e-6) for k, v in enumerate(ident)]
        if case == "i":
            rows += [Row("p_bar case i", k, r, float(v), 1e-6) for k, (r, v) in enumerate(zip(ref["p_bar_case_i"], p_bar))]
            rows += [Row("z_l case i", k, r, float(v), 0.005) for k, (r, v) in enumerate(zip(ref["z_l_case_i"], z))]
            rows += [Row("s case i", k, r, float(v), 0.01) for k, (r, v) in enumerate(zip(ref["s_bar"], s))]
            sweep = pi_c_sweep(params)
            rows += [Row("I_td (pi_c4 = 100)", k, r, float(v), 0.10, relative=True)
                     for k, (r, v) in enumerate(zip(ref["I_td_pi_c4_100"], sweep))]
            k_red = 0
        else:
            rows += [Row("z_l case ii", k, r, float(v), 0.02) for k, (r, v) in enumerate(zip(ref["z_l_case_ii"], z))]
            k_red = 1
        rows.append(Row(f"reduction A case {case}", 0, ref["reduction_amps"][k_red], m.consumption_reduction_amps, 0.5))
        rows.append(Row(f"reduction % case {case}", 0, ref["reduction_percent"][k_red],
                        m.consumption_reduction_percent, 0.5))
    return rows, info


def format_table(rows: list[Row]) -> str:
    head = f"{'quantity':<28} {'#':>2} {'reference':>11} {'computed':>13} {'error':>10} {'tol':>7}  verdict"
    out = [head, "-" * len(head)]
    for r in rows:
        tol = f"{r.tolerance:.0%}" if r.relative else f"{r.tolerance:g}"
        err = f"{r.error:.2%}" if r.relative else f"{r.error:.3g}"
        out.append(f"{r.quantity:<28} {r.index + 1:>2} {r.reference:>11.6g} {r.computed:>13.6g} {err:>10} {tol:>7}  "
                   f"{'ok' if r.passed else 'MISMATCH'}")
    return "\n".join(out)
