"""Storage-function monitors, the dissipation check and welfare metrics.

The three storage functions are quadratic in time derivatives, so along a
trajectory of the affine closed loop they are quadratic forms in
y = M x + b.  ``storage_weight_matrix`` collects them into one block-diagonal
W with  S = y^T W y,  which is what the trajectory check evaluates.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dynamics import (
    CONTROLLER_BLOCKS,
    ClosedLoopSystem,
    ControllerState,
    PlantState,
    assemble_closed_loop,
    split_state,
)
from .kkt import current_sharing_error
from .model import (
    GAIN_NAMES,
    ControllerGains,
    MonitorConfig,
    ScenarioParams,
    current_matching_residual,
    lyapunov_solve,
)


def _as_matrix(P) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    return np.diag(P) if P.ndim == 1 else P


# ---------------------------------------------------------------------------
# storage functions


def storage_physical(params: ScenarioParams, dx_s: PlantState) -> float:
    """Electrical energy stored in the derivative coordinates (line L, not L_t, on line currents)."""
    C, Lt, L = params.C_t, params.L_t, params.L_line
    d = dx_s
    return 0.5 * float(C @ d.V_d ** 2 + C @ d.V_q ** 2 + Lt @ d.I_td ** 2 + Lt @ d.I_tq ** 2
                       + L @ d.I_d ** 2 + L @ d.I_q ** 2)


def storage_human(P_1, P_2, dz_l, dp_tilde) -> float:
    """S_h = dz^T P_1 dz + dp~^T P_2 dp~, with p~ = p_bar - p (so dp~ = -dp)."""
    dz, dp = np.asarray(dz_l, float), np.asarray(dp_tilde, float)
    return float(dz @ _as_matrix(P_1) @ dz + dp @ _as_matrix(P_2) @ dp)


def storage_controller(gains: ControllerGains, dx_c: ControllerState) -> float:
    """Half the tau-weighted squared speed of every controller block."""
    v = dx_c.as_vector()
    tau = np.concatenate(gains.vectors())
    return 0.5 * float(tau @ v ** 2)


def human_weights(params: ScenarioParams, monitor: MonitorConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(P_1, P_2) from the monitor's Q_1, Q_2 via the two Lyapunov equations."""
    mon = params.monitor if monitor is None else monitor
    P_1 = lyapunov_solve(np.diag(params.human.a), mon.Q_1)
    P_2 = lyapunov_solve(params.norm_matrix(), mon.Q_2)
    return P_1, P_2


def storage_weight_matrix(params: ScenarioParams, sys: ClosedLoopSystem,
                          monitor: MonitorConfig | None = None) -> np.ndarray:
    """W with S_p + S_h + S_c = y^T W y, y the closed-loop state derivative."""
    W = np.zeros((sys.n, sys.n))
    im = sys.index_map
    P_1, P_2 = human_weights(params, monitor)

    def put(name, block):
        W[im[name], im[name]] += block

    for name, wt in (("V_d", params.C_t), ("V_q", params.C_t), ("I_td", params.L_t), ("I_tq", params.L_t),
                     ("I_d", params.L_line), ("I_q", params.L_line)):
        put(name, np.diag(0.5 * wt))
    put("z_l", P_1)
    put("p", P_2)
    for name, g in zip(CONTROLLER_BLOCKS, GAIN_NAMES):
        put(name, np.diag(0.5 * getattr(params.gains, g)))
    return W


PHYSICAL_BLOCKS = ("V_d", "V_q", "I_td", "I_tq", "I_d", "I_q")
HUMAN_BLOCKS = ("z_l", "p")


def storage_channels(params: ScenarioParams, sys: ClosedLoopSystem, states,
                     monitor: MonitorConfig | None = None) -> dict[str, np.ndarray]:
    """S_p, S_h, S_c and their sum at every row of *states*."""
    W = storage_weight_matrix(params, sys, monitor)
    Y = np.atleast_2d(states) @ sys.M.T + sys.b
    im = sys.index_map
    out = {}
    for key, names in (("S_p", PHYSICAL_BLOCKS), ("S_h", HUMAN_BLOCKS), ("S_c", CONTROLLER_BLOCKS)):
        cols = np.concatenate([np.arange(sys.n)[im[nm]] for nm in names])
        Yk = Y[:, cols]
        out[key] = np.einsum("ij,jk,ik->i", Yk, W[np.ix_(cols, cols)], Yk)
    out["S"] = out["S_p"] + out["S_h"] + out["S_c"]
    return out


def storage_terms(params: ScenarioParams, sys: ClosedLoopSystem, x,
                  monitor: MonitorConfig | None = None) -> tuple[float, float, float]:
    """(S_p, S_h, S_c) at one closed-loop state, block by block."""
    dxs, dxc = split_state(sys.rhs(np.asarray(x, float)), sys.N, sys.E)
    P_1, P_2 = human_weights(params, monitor)
    return (storage_physical(params, dxs), storage_human(P_1, P_2, dxs.z_l, -dxs.p),
            storage_controller(params.gains, dxc))


# ---------------------------------------------------------------------------
# sufficiency conditions on the monitor weights

STEP1_LINES = (
    "V_d line: R_L^-1 - I_Ld/(2 zeta_2)",
    "V_q line: R_L^-1 + I_Lq/(2 zeta_3)",
    "z_l line: Q_1 - P_1 A/zeta_1 - zeta_2 I_Ld/2 + zeta_3 I_Lq/2",
    "p line: Q_2 - zeta_1 P_1 A",
)


@dataclass
class Step1Report:
    zeta_1: float
    min_eigs: list          # smallest eigenvalue of each of the four line matrices
    violated: list          # 1-based indices of lines that are not positive semidefinite

    @property
    def ok(self) -> bool:
        return not self.violated

    def describe(self) -> str:
        if self.ok:
            return f"all four lines nonnegative (zeta_1 = {self.zeta_1:.6g})"
        return "; ".join(f"line {k} ({STEP1_LINES[k - 1]}) has min eigenvalue {self.min_eigs[k - 1]:.4g}"
                         for k in self.violated)


def _sym_min_eig(X: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (X + X.T)).min())


def step1_line_matrices(params: ScenarioParams, monitor: MonitorConfig, zeta_1: float) -> list[np.ndarray]:
    D = np.diag
    iRL = D(1.0 / params.R_L)
    P_1, _ = human_weights(params, monitor)
    P1A = P_1 @ D(params.human.a)
    z2, z3 = monitor.zeta_2, monitor.zeta_3
    return [
        iRL - D(params.I_Ld) / (2 * z2),
        iRL + D(params.I_Lq) / (2 * z3),
        _as_matrix(monitor.Q_1) - P1A / zeta_1 - z2 * D(params.I_Ld) / 2 + z3 * D(params.I_Lq) / 2,
        _as_matrix(monitor.Q_2) - zeta_1 * P1A,
    ]


def _broadcast_monitor(params: ScenarioParams, monitor: MonitorConfig) -> MonitorConfig:
    N = params.N
    q1 = np.broadcast_to(monitor.Q_1, (N,)) if monitor.Q_1.ndim == 1 else monitor.Q_1
    q2 = np.broadcast_to(monitor.Q_2, (N,)) if monitor.Q_2.ndim == 1 else monitor.Q_2
    return MonitorConfig(np.array(q1), np.array(q2), monitor.zeta_2, monitor.zeta_3)


def step1_sufficiency(params: ScenarioParams, monitor: MonitorConfig | None = None,
                      tol: float = 1e-12) -> Step1Report:
    """Check the four sufficiency lines, choosing zeta_1 by bisection.

    Line 3 improves and line 4 worsens as zeta_1 grows, so the smallest
    zeta_1 that makes line 3 nonnegative is the best possible choice.
    """
    mon = _broadcast_monitor(params, params.monitor if monitor is None else monitor)

    def line3(z1):
        return _sym_min_eig(step1_line_matrices(params, mon, z1)[2])

    lo, hi = 1e-12, 1e12
    if line3(hi) < -tol:
        zeta_1 = hi
    elif line3(lo) >= -tol:
        zeta_1 = lo
    else:
        # bisection in log space: zeta_1 spans many decades
        for _ in range(200):
            mid = math.sqrt(lo * hi)
            if line3(mid) >= -tol:
                hi = mid
            else:
                lo = mid
            if hi / lo < 1 + 1e-12:
                break
        zeta_1 = hi
    eigs = [_sym_min_eig(X) for X in step1_line_matrices(params, mon, zeta_1)]
    scale = [max(1.0, float(np.abs(X).max())) for X in step1_line_matrices(params, mon, zeta_1)]
    violated = [k + 1 for k, (e, s) in enumerate(zip(eigs, scale)) if e < -tol * s]
    return Step1Report(zeta_1=zeta_1, min_eigs=eigs, violated=violated)


def step1_line_terms(params: ScenarioParams, sys: ClosedLoopSystem, states: np.ndarray,
                     report: Step1Report, monitor: MonitorConfig | None = None) -> np.ndarray:
    """The four quadratic terms of the dissipation bound at every sample, shape (samples, 4).

    Each term is minus a quadratic form in the relevant derivative, so a
    positive entry marks the line that breaks the bound at that sample.
    """
    mon = _broadcast_monitor(params, params.monitor if monitor is None else monitor)
    mats = step1_line_matrices(params, mon, report.zeta_1)
    Y = np.atleast_2d(states) @ sys.M.T + sys.b
    im = sys.index_map
    blocks = [Y[:, im["V_d"]], Y[:, im["V_q"]], Y[:, im["z_l"]], Y[:, im["p"]]]
    return np.stack([-np.einsum("ij,jk,ik->i", v, X, v) for v, X in zip(blocks, mats)], axis=1)


# ---------------------------------------------------------------------------
# dissipation along a trajectory


@dataclass
class DissipationReport:
    storage: np.ndarray = field(repr=False)
    max_increment: float
    threshold: float
    monotone: bool
    step1: Step1Report
    violated_line: int | None
    certificate: float | None = None

    @property
    def passed(self) -> bool:
        return self.monotone and self.step1.ok

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "monotone": self.monotone,
            "max_increment": self.max_increment,
            "threshold": self.threshold,
            "max_storage": float(self.storage.max()),
            "zeta_1": self.step1.zeta_1,
            "step1_min_eigs": self.step1.min_eigs,
            "step1_violated": self.step1.violated,
            "violated_line": self.violated_line,
            "certificate_max_eig": self.certificate,
        }


def dissipation_check(trajectory, params: ScenarioParams, monitor: MonitorConfig | None = None,
                      sys: ClosedLoopSystem | None = None, certificate: bool = False) -> DissipationReport:
    """S = S_p + S_h + S_c must not increase between consecutive samples.

    Passes when the largest increment is at most 1e-9 (1 + max S) and the
    monitor weights satisfy the sufficiency lines.  When they do not, the
    lines are taken in the order the constants are chosen (zeta_2, zeta_3,
    then Q_1 with zeta_1, then Q_2) and the first one whose quadratic term
    turns positive along the trajectory is named; a later line usually
    fails only as a consequence of an earlier one.
    With ``certificate`` the largest eigenvalue of sym(W M) is included: a
    nonpositive value proves dissipation for every trajectory.
    """
    mon = params.monitor if monitor is None else monitor
    if sys is None:
        sys = assemble_closed_loop(params)
    W = storage_weight_matrix(params, sys, mon)
    X = np.atleast_2d(trajectory.states)
    Y = X @ sys.M.T + sys.b
    S = np.einsum("ij,jk,ik->i", Y, W, Y)
    inc = float(np.diff(S).max()) if S.size > 1 else 0.0
    thr = 1e-9 * (1.0 + float(S.max()))
    rep = step1_sufficiency(params, mon)
    violated = None
    if not rep.ok:
        terms = step1_line_terms(params, sys, X, rep, mon).max(axis=0)
        positive = [k + 1 for k in range(4) if terms[k] > 0 and k + 1 in rep.violated]
        violated = positive[0] if positive else rep.violated[0]
    cert = None
    if certificate:
        G = W @ sys.M
        cert = float(np.linalg.eigvalsh(G + G.T).max())
    return DissipationReport(S, max(inc, 0.0), thr, inc <= thr, rep, violated, cert)


# ---------------------------------------------------------------------------
# metrics at an equilibrium


def consumption_reduction(I_Ld, z_l) -> tuple[float, float]:
    """(1^T I_Ld (1 - z_l) in A, the same as a percentage of 1^T I_Ld)."""
    I_Ld, z_l = np.asarray(I_Ld, float), np.asarray(z_l, float)
    amps = float(I_Ld @ (1.0 - z_l))
    return amps, 100.0 * amps / float(I_Ld.sum())


@dataclass
class MetricReport:
    consumption_reduction_amps: float
    consumption_reduction_percent: float
    current_sharing_error: float
    voltage_rmse: float
    max_abs_V_q: float
    current_matching_residual: float
    z_l: list
    p: list
    s: list
    I_td: list
    V_d: list

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=float)


def metrics(params: ScenarioParams, x_bar: np.ndarray) -> MetricReport:
    xs, xc = split_state(np.asarray(x_bar, float), params.N, params.E)
    amps, pct = consumption_reduction(params.I_Ld, xs.z_l)
    return MetricReport(
        consumption_reduction_amps=amps,
        consumption_reduction_percent=pct,
        current_sharing_error=current_sharing_error({"I_td": xs.I_td}, params.pi_c),
        voltage_rmse=float(np.linalg.norm(xs.V_d - params.V_r) / math.sqrt(params.N)),
        max_abs_V_q=float(np.abs(xs.V_q).max()),
        current_matching_residual=abs(current_matching_residual(params, xs.z_l, xs.V_d, xs.I_td)),
        z_l=xs.z_l.tolist(), p=xs.p.tolist(), s=xc.s_star.tolist(),
        I_td=xs.I_td.tolist(), V_d=xs.V_d.tolist(),
    )
