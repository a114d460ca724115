"""Direct solution of the social-physical welfare problem.

The problem is an equality-constrained QP, so its KKT conditions form one
square linear system

    [ H   A^T ] [x]   [-g]
    [ A    0  ] [l] = [ r]

with x the seven primal blocks and l the five multiplier blocks.  This is the
reference the primal-dual controller is checked against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ScenarioParams

PRIMAL_BLOCKS = ("z_l", "I_td", "I_tq", "u_d", "u_q", "V_d", "s")
DUAL_BLOCKS = ("lambda_a", "lambda_b", "lambda_c", "lambda_d", "lambda_e")


class SingularKKTError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class KKTSolution:
    primal: dict
    dual: dict
    objective_value: float
    stationarity_residual: float
    feasibility_residual: float

    def vector(self) -> np.ndarray:
        """Primal then dual blocks, in controller-state order."""
        return np.concatenate([self.primal[k] for k in PRIMAL_BLOCKS] + [self.dual[k] for k in DUAL_BLOCKS])

    def to_dict(self) -> dict:
        return {
            "primal": {k: v.tolist() for k, v in self.primal.items()},
            "dual": {k: v.tolist() for k, v in self.dual.items()},
            "objective_value": self.objective_value,
            "stationarity_residual": self.stationarity_residual,
            "feasibility_residual": self.feasibility_residual,
        }


def _qp_data(params: ScenarioParams, p_bar):
    N = params.N
    w = params.omega_0
    al, be, ga, de, ep, et = params.weights.as_tuple()
    G_a, G_b = params.coupling
    D, I, Z = np.diag, np.eye(N), np.zeros((N, N))
    kz = al * params.pi_u * params.I_L2

    Hq = np.zeros((7 * N, 7 * N))
    g = np.zeros(7 * N)
    diag_blocks = [kz, be * params.pi_c, np.zeros(N), np.full(N, ga), np.full(N, de), np.full(N, ep), np.full(N, et)]
    for k, v in enumerate(diag_blocks):
        Hq[k * N:(k + 1) * N, k * N:(k + 1) * N] = D(v)
    g[:N] = -kz
    g[5 * N:6 * N] = -ep * params.V_r

    h = params.human.h
    R_t, L_t = params.R_t, params.L_t
    # columns: z_l, I_td, I_tq, u_d, u_q, V_d, s
    A = np.block([
        [D(params.I_Ld), -I, Z, Z, Z, -G_a, Z],
        [D(params.I_Lq), Z, -I, Z, Z, G_b, Z],
        [Z, D(R_t), -w * D(L_t), -I, Z, I, Z],
        [Z, -w * D(L_t), -D(R_t), Z, I, Z, Z],
        [-I, Z, Z, Z, Z, Z, -D(h)],
    ])
    r = np.concatenate([np.zeros(4 * N), -np.asarray(p_bar, float)])
    return Hq, g, A, r


def assemble_kkt(params: ScenarioParams, p_bar=None) -> tuple[np.ndarray, np.ndarray]:
    p_bar = params.p_bar if p_bar is None else p_bar
    Hq, g, A, r = _qp_data(params, p_bar)
    m = A.shape[0]
    K = np.block([[Hq, A.T], [A, np.zeros((m, m))]])
    return K, np.concatenate([-g, r])


def objective(params: ScenarioParams, primal: dict) -> float:
    al, be, ga, de, ep, et = params.weights.as_tuple()
    z, Itd = np.asarray(primal["z_l"]), np.asarray(primal["I_td"])
    ud, uq, Vd, s = (np.asarray(primal[k]) for k in ("u_d", "u_q", "V_d", "s"))
    return float(
        0.5 * al * np.sum(params.pi_u * params.I_L2 * (1 - z) ** 2)
        + 0.5 * be * np.sum(params.pi_c * Itd ** 2)
        + 0.5 * ga * ud @ ud
        + 0.5 * de * uq @ uq
        + 0.5 * ep * np.sum((Vd - params.V_r) ** 2)
        + 0.5 * et * s @ s
    )


def constraint_residuals(params: ScenarioParams, primal: dict, p_bar=None) -> np.ndarray:
    p_bar = params.p_bar if p_bar is None else p_bar
    _, _, A, r = _qp_data(params, p_bar)
    x = np.concatenate([np.asarray(primal[k], float) for k in PRIMAL_BLOCKS])
    return A @ x - r


def lagrangian(params: ScenarioParams, primal: dict, dual: dict, p_bar=None) -> float:
    lam = np.concatenate([np.asarray(dual[k], float) for k in DUAL_BLOCKS])
    return objective(params, primal) + float(lam @ constraint_residuals(params, primal, p_bar))


def kkt_residuals(params: ScenarioParams, x: np.ndarray, p_bar=None) -> tuple[np.ndarray, np.ndarray]:
    """(stationarity, feasibility) residual vectors at a stacked primal-dual point."""
    p_bar = params.p_bar if p_bar is None else p_bar
    Hq, g, A, r = _qp_data(params, p_bar)
    n = Hq.shape[0]
    xp, lam = x[:n], x[n:]
    return Hq @ xp + g + A.T @ lam, A @ xp - r


def solve_kkt(params: ScenarioParams, p_bar=None) -> KKTSolution:
    p_bar = params.p_bar if p_bar is None else p_bar
    K, rhs = assemble_kkt(params, p_bar)
    cond = np.linalg.cond(K)
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularKKTError(f"KKT matrix is singular (cond = {cond:.3g}); check for vanishing weights")
    x = np.linalg.solve(K, rhs)
    stat, feas = kkt_residuals(params, x, p_bar)
    blocks = np.split(x, 12)
    primal = dict(zip(PRIMAL_BLOCKS, blocks[:7]))
    dual = dict(zip(DUAL_BLOCKS, blocks[7:]))
    return KKTSolution(
        primal=primal,
        dual=dual,
        objective_value=objective(params, primal),
        stationarity_residual=float(np.linalg.norm(stat)),
        feasibility_residual=float(np.linalg.norm(feas)),
    )


def current_sharing_error(primal: dict, pi_c) -> float:
    v = np.asarray(pi_c, float) * np.asarray(primal["I_td"], float)
    return float(v.max() - v.min())
