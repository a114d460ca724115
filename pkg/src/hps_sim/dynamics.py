"""Open-loop plant, primal-dual controller and their interconnection.

The closed loop is affine, so besides the block-wise right-hand sides the
module assembles an explicit pair (M, b) with  dx/dt = M x + b.  The two
routes are built independently; tests compare them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .model import PortMode, ScenarioParams, SocialCase, COND_WARN, controller_P1

PLANT_BLOCKS = ("V_d", "V_q", "I_td", "I_tq", "I_d", "I_q", "z_l", "p")
CONTROLLER_BLOCKS = ("z_l*", "I_td*", "I_tq*", "u_d*", "u_q*", "V_d*", "s*",
                     "lambda_a", "lambda_b", "lambda_c", "lambda_d", "lambda_e")


def block_sizes(N: int, E: int) -> dict[str, int]:
    sizes = {name: N for name in PLANT_BLOCKS + CONTROLLER_BLOCKS}
    sizes["I_d"] = sizes["I_q"] = E
    return sizes


def build_index_map(N: int, E: int) -> dict[str, slice]:
    sizes = block_sizes(N, E)
    out, k = {}, 0
    for name in PLANT_BLOCKS + CONTROLLER_BLOCKS:
        out[name] = slice(k, k + sizes[name])
        k += sizes[name]
    return out


@dataclass(eq=False)
class PlantState:
    V_d: np.ndarray
    V_q: np.ndarray
    I_td: np.ndarray
    I_tq: np.ndarray
    I_d: np.ndarray
    I_q: np.ndarray
    z_l: np.ndarray
    p: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(getattr(self, f.name), float) for f in fields(self)])

    @classmethod
    def zeros(cls, N: int, E: int) -> "PlantState":
        return cls(*(np.zeros(E if f.name in ("I_d", "I_q") else N) for f in fields(cls)))


@dataclass(eq=False)
class ControllerState:
    z_l_star: np.ndarray
    I_td_star: np.ndarray
    I_tq_star: np.ndarray
    u_d_star: np.ndarray
    u_q_star: np.ndarray
    V_d_star: np.ndarray
    s_star: np.ndarray
    lambda_a: np.ndarray
    lambda_b: np.ndarray
    lambda_c: np.ndarray
    lambda_d: np.ndarray
    lambda_e: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(getattr(self, f.name), float) for f in fields(self)])

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "ControllerState":
        return cls(*np.split(np.asarray(v, float), 12))

    @classmethod
    def zeros(cls, N: int) -> "ControllerState":
        return cls(*(np.zeros(N) for _ in range(12)))


@dataclass(eq=False)
class PortValues:
    p_A: np.ndarray
    p_B: np.ndarray
    p_C: np.ndarray
    u_d: np.ndarray
    u_q: np.ndarray
    s: np.ndarray


def split_state(x: np.ndarray, N: int, E: int) -> tuple[PlantState, ControllerState]:
    idx = build_index_map(N, E)
    plant = PlantState(*(x[idx[name]].copy() for name in PLANT_BLOCKS))
    ctrl = ControllerState(*(x[idx[name]].copy() for name in CONTROLLER_BLOCKS))
    return plant, ctrl


def join_state(plant: PlantState, ctrl: ControllerState) -> np.ndarray:
    return np.concatenate([plant.as_vector(), ctrl.as_vector()])


# ---------------------------------------------------------------------------
# block-wise right-hand sides


def plant_rhs(params: ScenarioParams, xs: PlantState, u_d, u_q, s) -> PlantState:
    w = params.omega_0
    B = params.B
    C_t, L_t, R_t, R_L = params.C_t, params.L_t, params.R_t, params.R_L
    R, L = params.R_line, params.L_line
    hp = params.human
    for name, v, n in (("V_d", xs.V_d, params.N), ("I_d", xs.I_d, params.E), ("u_d", u_d, params.N)):
        if np.shape(v) != (n,):
            raise ValueError(f"{name} has shape {np.shape(v)}, expected ({n},)")

    dV_d = (-xs.V_d / R_L + w * C_t * xs.V_q + xs.I_td + B @ xs.I_d - params.I_Ld * xs.z_l) / C_t
    dV_q = (-w * C_t * xs.V_d - xs.V_q / R_L + xs.I_tq + B @ xs.I_q - params.I_Lq * xs.z_l) / C_t
    dI_td = (-xs.V_d - R_t * xs.I_td + w * L_t * xs.I_tq + u_d) / L_t
    dI_tq = (-xs.V_q - w * L_t * xs.I_td - R_t * xs.I_tq + u_q) / L_t
    dI_d = (-B.T @ xs.V_d - R * xs.I_d + w * L * xs.I_q) / L
    dI_q = (-B.T @ xs.V_q - w * L * xs.I_d - R * xs.I_q) / L
    dz_l = hp.a * (xs.p - xs.z_l - hp.h * s)
    dp = hp.c * (hp.p_ego - xs.p) + hp.d * (hp.p_bio - xs.p)
    if params.social_case is SocialCase.CASE_II:
        dp = dp - params.laplacian @ xs.p
    return PlantState(dV_d, dV_q, dI_td, dI_tq, dI_d, dI_q, dz_l, dp)


def controller_rhs(params: ScenarioParams, xc: ControllerState, p_A, p_B, p_C, p_bar) -> ControllerState:
    """Primal descent / dual ascent on the welfare Lagrangian.

    The lambda_e term in the z_l* row carries a minus sign: that is the
    derivative of the Lagrangian's last constraint with respect to z_l*.
    """
    al, be, ga, de, ep, et = params.weights.as_tuple()
    g = params.gains
    w = params.omega_0
    L_t, R_t = params.L_t, params.R_t
    G_a, G_b = params.coupling
    h = params.human.h
    if np.shape(xc.z_l_star) != (params.N,):
        raise ValueError(f"controller state has length {np.size(xc.z_l_star)}, expected {params.N}")

    grad_z = -al * params.pi_u * params.I_L2 * (1 - xc.z_l_star) + params.I_Ld * xc.lambda_a \
        + params.I_Lq * xc.lambda_b - xc.lambda_e
    grad_td = be * params.pi_c * xc.I_td_star - xc.lambda_a + R_t * xc.lambda_c - w * L_t * xc.lambda_d
    grad_tq = -xc.lambda_b - w * L_t * xc.lambda_c - R_t * xc.lambda_d
    grad_ud = ga * xc.u_d_star - xc.lambda_c + p_A
    grad_uq = de * xc.u_q_star + xc.lambda_d + p_B
    grad_V = ep * (xc.V_d_star - params.V_r) - G_a.T @ xc.lambda_a + G_b.T @ xc.lambda_b + xc.lambda_c
    grad_s = et * xc.s_star - h * xc.lambda_e + p_C

    con_a = params.I_Ld * xc.z_l_star - xc.I_td_star - G_a @ xc.V_d_star
    con_b = params.I_Lq * xc.z_l_star - xc.I_tq_star + G_b @ xc.V_d_star
    con_c = xc.V_d_star + R_t * xc.I_td_star - w * L_t * xc.I_tq_star - xc.u_d_star
    con_d = -w * L_t * xc.I_td_star - R_t * xc.I_tq_star + xc.u_q_star
    con_e = p_bar - xc.z_l_star - h * xc.s_star

    return ControllerState(
        -grad_z / g.tau_z, -grad_td / g.tau_td, -grad_tq / g.tau_tq, -grad_ud / g.tau_ud,
        -grad_uq / g.tau_uq, -grad_V / g.tau_V, -grad_s / g.tau_s,
        con_a / g.tau_a, con_b / g.tau_b, con_c / g.tau_c, con_d / g.tau_d, con_e / g.tau_e,
    )


def interconnect(params: ScenarioParams, xs: PlantState, xc: ControllerState, P_1,
                 ports: PortMode | str | None = None) -> PortValues:
    mode = params.ports if ports is None else PortMode(ports)
    P_1 = np.atleast_2d(np.asarray(P_1, dtype=float))
    A = np.diag(params.human.a)
    H = np.diag(params.human.h)
    gain = -2.0 * H.T @ A.T @ P_1.T
    if mode is PortMode.RAW:
        p_A, p_B, p_C = xs.I_td.copy(), xs.I_tq.copy(), gain @ xs.z_l
    else:
        p_A = xs.I_td - xc.I_td_star
        p_B = xs.I_tq - xc.I_tq_star
        p_C = gain @ (xs.z_l - xc.z_l_star)
    return PortValues(p_A, p_B, p_C, xc.u_d_star.copy(), xc.u_q_star.copy(), xc.s_star.copy())


def closed_loop_rhs(params: ScenarioParams, x: np.ndarray, P_1, ports=None) -> np.ndarray:
    xs, xc = split_state(np.asarray(x, float), params.N, params.E)
    pv = interconnect(params, xs, xc, P_1, ports)
    dxs = plant_rhs(params, xs, pv.u_d, pv.u_q, pv.s)
    dxc = controller_rhs(params, xc, pv.p_A, pv.p_B, pv.p_C, params.p_bar)
    return join_state(dxs, dxc)


# ---------------------------------------------------------------------------
# explicit LTI form


@dataclass(frozen=True, eq=False)
class ClosedLoopSystem:
    M: np.ndarray
    b: np.ndarray
    index_map: dict
    N: int
    E: int

    @property
    def n(self) -> int:
        return self.b.size

    def rhs(self, x: np.ndarray) -> np.ndarray:
        return self.M @ x + self.b

    def block(self, x: np.ndarray, name: str) -> np.ndarray:
        return np.asarray(x)[..., self.index_map[name]]

    def state_names(self) -> list[str]:
        names = []
        for block, sl in self.index_map.items():
            names.extend(f"{block}_{k + 1}" for k in range(sl.stop - sl.start))
        return names

    def export(self, directory) -> list[Path]:
        """Write ``M.mtx``, ``b.vec`` and ``index_map.json`` into *directory*."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        rows, cols = np.nonzero(self.M)
        lines = ["%%MatrixMarket matrix coordinate real general",
                 f"{self.n} {self.n} {rows.size}"]
        lines += [f"{i + 1} {j + 1} {self.M[i, j]:.17g}" for i, j in zip(rows, cols)]
        (out / "M.mtx").write_text("\n".join(lines) + "\n")
        (out / "b.vec").write_text("".join(f"{v:.17g}\n" for v in self.b))
        imap = {k: [v.start, v.stop] for k, v in self.index_map.items()}
        (out / "index_map.json").write_text(json.dumps(imap, indent=2) + "\n")
        return [out / "M.mtx", out / "b.vec", out / "index_map.json"]


def assemble_closed_loop(params: ScenarioParams, P_1=None, ports: PortMode | str | None = None) -> ClosedLoopSystem:
    N, E = params.N, params.E
    mode = params.ports if ports is None else PortMode(ports)
    if P_1 is None:
        P_1 = controller_P1(params)
    P_1 = np.atleast_2d(np.asarray(P_1, dtype=float))
    idx = build_index_map(N, E)
    n = 18 * N + 2 * E
    M = np.zeros((n, n))
    b = np.zeros(n)
    D = np.diag
    I = np.eye(N)
    w = params.omega_0
    B = params.B
    C_t, L_t, R_t, R_L = params.C_t, params.L_t, params.R_t, params.R_L
    R, L = params.R_line, params.L_line
    hp = params.human
    h = hp.h

    def put(row, col, block):
        M[idx[row], idx[col]] += block

    # grid, rows scaled by 1/C_t, 1/L_t, 1/L
    iC, iLt, iL = D(1 / C_t), D(1 / L_t), D(1 / L)
    put("V_d", "V_d", -D(1 / (R_L * C_t))); put("V_d", "V_q", w * I); put("V_d", "I_td", iC)
    put("V_d", "I_d", iC @ B); put("V_d", "z_l", -D(params.I_Ld / C_t))
    put("V_q", "V_d", -w * I); put("V_q", "V_q", -D(1 / (R_L * C_t))); put("V_q", "I_tq", iC)
    put("V_q", "I_q", iC @ B); put("V_q", "z_l", -D(params.I_Lq / C_t))
    put("I_td", "V_d", -iLt); put("I_td", "I_td", -D(R_t / L_t)); put("I_td", "I_tq", w * I); put("I_td", "u_d*", iLt)
    put("I_tq", "V_q", -iLt); put("I_tq", "I_td", -w * I); put("I_tq", "I_tq", -D(R_t / L_t)); put("I_tq", "u_q*", iLt)
    put("I_d", "V_d", -iL @ B.T); put("I_d", "I_d", -D(R / L)); put("I_d", "I_q", w * np.eye(E))
    put("I_q", "V_q", -iL @ B.T); put("I_q", "I_d", -w * np.eye(E)); put("I_q", "I_q", -D(R / L))

    # humans
    put("z_l", "p", D(hp.a)); put("z_l", "z_l", -D(hp.a)); put("z_l", "s*", -D(hp.a * h))
    put("p", "p", -params.norm_matrix())
    b[idx["p"]] = hp.c * hp.p_ego + hp.d * hp.p_bio

    # controller
    al, be, ga, de, ep, et = params.weights.as_tuple()
    g = params.gains
    G_a, G_b = params.coupling
    kz = al * params.pi_u * params.I_L2
    t = {name: 1.0 / getattr(g, name) for name in ("tau_z", "tau_td", "tau_tq", "tau_ud", "tau_uq", "tau_V",
                                                 "tau_s", "tau_a", "tau_b", "tau_c", "tau_d", "tau_e")}

    T = D(t["tau_z"])
    put("z_l*", "z_l*", -T @ D(kz)); put("z_l*", "lambda_a", -T @ D(params.I_Ld))
    put("z_l*", "lambda_b", -T @ D(params.I_Lq)); put("z_l*", "lambda_e", T)
    b[idx["z_l*"]] = t["tau_z"] * kz
    T = D(t["tau_td"])
    put("I_td*", "I_td*", -T @ D(be * params.pi_c)); put("I_td*", "lambda_a", T)
    put("I_td*", "lambda_c", -T @ D(R_t)); put("I_td*", "lambda_d", T @ D(w * L_t))
    T = D(t["tau_tq"])
    put("I_tq*", "lambda_b", T); put("I_tq*", "lambda_c", T @ D(w * L_t)); put("I_tq*", "lambda_d", T @ D(R_t))
    T = D(t["tau_ud"])
    put("u_d*", "u_d*", -ga * T); put("u_d*", "lambda_c", T)
    T = D(t["tau_uq"])
    put("u_q*", "u_q*", -de * T); put("u_q*", "lambda_d", -T)
    T = D(t["tau_V"])
    put("V_d*", "V_d*", -ep * T); put("V_d*", "lambda_a", T @ G_a.T); put("V_d*", "lambda_b", -T @ G_b.T)
    put("V_d*", "lambda_c", -T)
    b[idx["V_d*"]] = t["tau_V"] * ep * params.V_r
    T = D(t["tau_s"])
    put("s*", "s*", -et * T); put("s*", "lambda_e", T @ D(h))

    T = D(t["tau_a"])
    put("lambda_a", "z_l*", T @ D(params.I_Ld)); put("lambda_a", "I_td*", -T); put("lambda_a", "V_d*", -T @ G_a)
    T = D(t["tau_b"])
    put("lambda_b", "z_l*", T @ D(params.I_Lq)); put("lambda_b", "I_tq*", -T); put("lambda_b", "V_d*", T @ G_b)
    T = D(t["tau_c"])
    put("lambda_c", "V_d*", T); put("lambda_c", "I_td*", T @ D(R_t)); put("lambda_c", "I_tq*", -T @ D(w * L_t))
    put("lambda_c", "u_d*", -T)
    T = D(t["tau_d"])
    put("lambda_d", "I_td*", -T @ D(w * L_t)); put("lambda_d", "I_tq*", -T @ D(R_t)); put("lambda_d", "u_q*", T)
    T = D(t["tau_e"])
    put("lambda_e", "z_l*", -T); put("lambda_e", "s*", -T @ D(h))
    b[idx["lambda_e"]] = t["tau_e"] * params.p_bar

    # ports: p_A, p_B, p_C enter the u_d*, u_q*, s* rows with a plus sign inside the gradient
    port_gain = -2.0 * D(h).T @ D(hp.a).T @ P_1.T
    put("u_d*", "I_td", -D(t["tau_ud"])); put("u_q*", "I_tq", -D(t["tau_uq"]))
    put("s*", "z_l", -D(t["tau_s"]) @ port_gain)
    if mode is PortMode.INCREMENTAL:
        put("u_d*", "I_td*", D(t["tau_ud"])); put("u_q*", "I_tq*", D(t["tau_uq"]))
        put("s*", "z_l*", D(t["tau_s"]) @ port_gain)

    return ClosedLoopSystem(M=M, b=b, index_map=idx, N=N, E=E)


class DegenerateScenarioError(np.linalg.LinAlgError):
    pass


def equilibrated_condition(M: np.ndarray) -> tuple[float, np.ndarray]:
    """Condition number after scaling every row to unit max-norm.

    Rows of M carry 1/C_t, 1/L and 1/tau factors spanning ten decades, which
    inflate the raw condition number without making the solve any harder.
    Returns the condition number and the row scale used.
    """
    scale = np.abs(M).max(axis=1)
    if np.any(scale == 0):
        return np.inf, scale
    scale = 1.0 / scale
    return float(np.linalg.cond(scale[:, None] * M)), scale


def equilibrium(sys: ClosedLoopSystem) -> np.ndarray:
    cond, scale = equilibrated_condition(sys.M)
    if not np.isfinite(cond) or cond > COND_WARN:
        raise DegenerateScenarioError(f"closed-loop matrix is (near) singular, cond = {cond:.3g}")
    Ms, bs = scale[:, None] * sys.M, scale * sys.b
    x = np.linalg.solve(Ms, -bs)
    res = np.linalg.norm(sys.M @ x + sys.b)
    if res > 1e-10 * max(np.linalg.norm(sys.b), 1.0):
        # one step of iterative refinement usually recovers the lost digits
        x = x - np.linalg.solve(Ms, Ms @ x + bs)
    return x


# ---------------------------------------------------------------------------
# spectral checks


def spectrum_report(sys: ClosedLoopSystem, tol: float = 1e-9) -> dict:
    """Largest real part and a defectiveness test for imaginary-axis eigenvalues."""
    ev = np.linalg.eigvals(sys.M)
    max_re = float(ev.real.max())
    normM = np.linalg.norm(sys.M, 2)
    rank_tol = 1e-8 * normM
    defective = []
    axis = ev[np.abs(ev.real) <= tol * max(1.0, normM)]
    seen: list[complex] = []
    for lam in axis:
        if any(abs(lam - s) <= rank_tol for s in seen):
            continue
        seen.append(lam)
        mult = int(np.sum(np.abs(ev - lam) <= max(rank_tol, 1e-6 * max(1.0, abs(lam)))))
        sv = np.linalg.svd(sys.M - lam * np.eye(sys.n), compute_uv=False)
        geo = int(np.sum(sv <= rank_tol))
        if geo < mult:
            defective.append(complex(lam))
    return {"max_real": max_re, "n_axis": len(axis), "defective": defective,
            "stable": max_re <= tol and not defective}
