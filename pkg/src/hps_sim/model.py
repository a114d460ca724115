"""Domain types and closed-form algebra for the human-physical microgrid.

Everything here is a pure function of immutable inputs.  Per-node and
per-line parameters are stored as records (``NodeParams``/``LineParams``)
but most code works on the vectorised views exposed by ``ScenarioParams``.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

COND_WARN = 1e12


class SocialCase(enum.Enum):
    CASE_I = "i"
    CASE_II = "ii"

    @classmethod
    def parse(cls, value: "str | SocialCase") -> "SocialCase":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        for member in cls:
            if key in (member.value, member.name.lower(), "case" + member.value, "case_" + member.value):
                return member
        raise ValueError(f"unknown social case {value!r}; expected 'i' or 'ii'")


class PortMode(enum.Enum):
    """How the controller ports are wired to the plant.

    ``RAW`` feeds the raw plant signals (I_td, I_tq, z_l) into the
    controller.  ``INCREMENTAL`` feeds their mismatch with the controller's
    own optimisation variables, which leaves the Jacobian coupling intact
    but removes the constant port offset at the equilibrium.
    """

    INCREMENTAL = "incremental"
    RAW = "raw"


class ValidationError(ValueError):
    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("invalid scenario:\n  - " + "\n  - ".join(self.problems))


@dataclass(frozen=True)
class NodeParams:
    C_t: float
    L_t: float
    R_t: float
    R_L: float
    I_Ld: float
    I_Lq: float
    V_r: float
    pi_c: float = 1.0
    pi_u: float = 1.0


@dataclass(frozen=True)
class LineParams:
    R_k: float
    L_k: float


@dataclass(frozen=True, eq=False)
class Topology:
    incidence: np.ndarray
    social_weights: np.ndarray | None = None

    def __post_init__(self):
        inc = np.atleast_2d(np.asarray(self.incidence, dtype=float))
        object.__setattr__(self, "incidence", inc)
        n = inc.shape[0]
        w = np.zeros((n, n)) if self.social_weights is None else np.asarray(self.social_weights, dtype=float)
        object.__setattr__(self, "social_weights", w)

    @property
    def n_nodes(self) -> int:
        return self.incidence.shape[0]

    @property
    def n_lines(self) -> int:
        return self.incidence.shape[1]


@dataclass(frozen=True, eq=False)
class HumanParams:
    a: np.ndarray
    c: np.ndarray
    d: np.ndarray
    p_ego: np.ndarray
    p_bio: np.ndarray

    def __post_init__(self):
        for name in ("a", "c", "d", "p_ego", "p_bio"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))

    @property
    def h(self) -> np.ndarray:
        # incentive sensitivity is tied to the egoistic value, never set on its own
        return self.p_ego


@dataclass(frozen=True)
class WelfareWeights:
    alpha: float
    beta: float
    gamma: float
    delta: float
    epsilon: float
    eta: float

    def as_tuple(self) -> tuple[float, ...]:
        return (self.alpha, self.beta, self.gamma, self.delta, self.epsilon, self.eta)


GAIN_NAMES = ("tau_z", "tau_td", "tau_tq", "tau_ud", "tau_uq", "tau_V", "tau_s",
              "tau_a", "tau_b", "tau_c", "tau_d", "tau_e")


@dataclass(frozen=True, eq=False)
class ControllerGains:
    tau_z: np.ndarray
    tau_td: np.ndarray
    tau_tq: np.ndarray
    tau_ud: np.ndarray
    tau_uq: np.ndarray
    tau_V: np.ndarray
    tau_s: np.ndarray
    tau_a: np.ndarray
    tau_b: np.ndarray
    tau_c: np.ndarray
    tau_d: np.ndarray
    tau_e: np.ndarray

    def __post_init__(self):
        for name in GAIN_NAMES:
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))

    @classmethod
    def uniform(cls, n: int, tau: float) -> "ControllerGains":
        return cls(**{name: np.full(n, float(tau)) for name in GAIN_NAMES})

    def vectors(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in GAIN_NAMES]

    def scaled(self, factor: float) -> "ControllerGains":
        return ControllerGains(**{name: factor * getattr(self, name) for name in GAIN_NAMES})


@dataclass(frozen=True)
class GridConstants:
    f_0: float = 60.0
    R_L_open: float = 1e9

    @property
    def omega_0(self) -> float:
        return 2.0 * math.pi * self.f_0


@dataclass(frozen=True, eq=False)
class MonitorConfig:
    """Weights of the human storage function and the Young-inequality margins.

    ``Q_1`` also fixes the controller's ``P_1`` through the Lyapunov equation,
    so the port and the monitor always agree.
    """

    Q_1: np.ndarray
    Q_2: np.ndarray
    zeta_2: float = 1.0
    zeta_3: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "Q_1", np.atleast_1d(np.asarray(self.Q_1, dtype=float)))
        object.__setattr__(self, "Q_2", np.atleast_1d(np.asarray(self.Q_2, dtype=float)))

    @classmethod
    def identity(cls, n: int) -> "MonitorConfig":
        return cls(Q_1=np.ones(n), Q_2=np.ones(n))


@dataclass(frozen=True, eq=False)
class ScenarioParams:
    nodes: tuple[NodeParams, ...]
    lines: tuple[LineParams, ...]
    topology: Topology
    human: HumanParams
    weights: WelfareWeights
    gains: ControllerGains
    constants: GridConstants = field(default_factory=GridConstants)
    social_case: SocialCase = SocialCase.CASE_I
    monitor: MonitorConfig | None = None
    ports: PortMode = PortMode.INCREMENTAL

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "social_case", SocialCase.parse(self.social_case))
        object.__setattr__(self, "ports", PortMode(self.ports))
        if self.monitor is None:
            object.__setattr__(self, "monitor", MonitorConfig.identity(len(self.nodes)))

    @property
    def N(self) -> int:
        return len(self.nodes)

    @property
    def E(self) -> int:
        return len(self.lines)

    @property
    def omega_0(self) -> float:
        return self.constants.omega_0

    def _node_vec(self, name: str) -> np.ndarray:
        return np.array([getattr(nd, name) for nd in self.nodes], dtype=float)

    C_t = cached_property(lambda self: self._node_vec("C_t"))
    L_t = cached_property(lambda self: self._node_vec("L_t"))
    R_t = cached_property(lambda self: self._node_vec("R_t"))
    R_L = cached_property(lambda self: self._node_vec("R_L"))
    I_Ld = cached_property(lambda self: self._node_vec("I_Ld"))
    I_Lq = cached_property(lambda self: self._node_vec("I_Lq"))
    V_r = cached_property(lambda self: self._node_vec("V_r"))
    pi_c = cached_property(lambda self: self._node_vec("pi_c"))
    pi_u = cached_property(lambda self: self._node_vec("pi_u"))
    R_line = cached_property(lambda self: np.array([ln.R_k for ln in self.lines], dtype=float))
    L_line = cached_property(lambda self: np.array([ln.L_k for ln in self.lines], dtype=float))

    @property
    def B(self) -> np.ndarray:
        return self.topology.incidence

    @cached_property
    def I_L2(self) -> np.ndarray:
        """Squared load-current magnitudes, I_Ld**2 + I_Lq**2."""
        return self.I_Ld ** 2 + self.I_Lq ** 2

    @cached_property
    def laplacian(self) -> np.ndarray:
        return social_laplacian(self.topology)

    @cached_property
    def reduction(self) -> tuple[np.ndarray, np.ndarray]:
        return line_reduction(self.lines, self.topology, self.omega_0)

    @cached_property
    def coupling(self) -> tuple[np.ndarray, np.ndarray]:
        """(G_a, G_b) with G_a = -R_L^-1 + B J and G_b = omega_0 C_t - B K.

        These are the V_d* coefficient blocks of the two current-balance
        constraints; G_a enters with a minus sign, G_b with a plus sign.
        """
        J, K = self.reduction
        G_a = -np.diag(1.0 / self.R_L) + self.B @ J
        G_b = self.omega_0 * np.diag(self.C_t) - self.B @ K
        return G_a, G_b

    @cached_property
    def p_bar(self) -> np.ndarray:
        return steady_norms(self.human, self.laplacian, self.social_case)

    def norm_matrix(self) -> np.ndarray:
        """Matrix D_p with  dp/dt = -D_p p + C p_ego + D p_bio."""
        m = np.diag(self.human.c + self.human.d)
        if self.social_case is SocialCase.CASE_II:
            m = m + self.laplacian
        return m

    def replace(self, **changes) -> "ScenarioParams":
        from dataclasses import replace
        return replace(self, **changes)


# ---------------------------------------------------------------------------
# validation


def validate(params: ScenarioParams) -> ScenarioParams:
    """Return ``params`` unchanged if every invariant holds, else raise.

    The raised :class:`ValidationError` lists all violations, not just the
    first one.
    """
    problems: list[str] = []
    N, E = params.N, params.E
    if N < 2:
        problems.append(f"need at least 2 nodes, got {N}")
    if E < 1:
        problems.append(f"need at least 1 line, got {E}")

    for i, nd in enumerate(params.nodes, start=1):
        for name in ("C_t", "L_t", "R_t", "R_L", "pi_c"):
            v = getattr(nd, name)
            if not (np.isfinite(v) and v > 0):
                problems.append(f"node {i}: {name} must be > 0 (got {v})")
        if not (np.isfinite(nd.pi_u) and nd.pi_u >= 0):
            problems.append(f"node {i}: pi_u must be >= 0 (got {nd.pi_u})")
        if not nd.I_Ld > 0:
            problems.append(f"node {i}: I_Ld must be > 0 (got {nd.I_Ld})")
        if not nd.I_Lq <= 0:
            problems.append(f"node {i}: I_Lq must be <= 0 (inductive load, got {nd.I_Lq})")
        if not np.isfinite(nd.V_r):
            problems.append(f"node {i}: V_r must be finite")

    for k, ln in enumerate(params.lines, start=1):
        for name in ("R_k", "L_k"):
            v = getattr(ln, name)
            if not (np.isfinite(v) and v > 0):
                problems.append(f"line {k}: {name} must be > 0 (got {v})")

    inc = params.topology.incidence
    if inc.shape != (N, E):
        problems.append(f"incidence has shape {inc.shape}, expected ({N}, {E})")
    else:
        for k in range(E):
            col = inc[:, k]
            if not np.all(np.isin(col, (-1.0, 0.0, 1.0))):
                problems.append(f"line {k + 1}: incidence entries must be in {{-1, 0, +1}}")
            elif np.count_nonzero(col == 1) != 1 or np.count_nonzero(col == -1) != 1:
                problems.append(f"line {k + 1}: incidence column needs exactly one +1 and one -1")

    W = params.topology.social_weights
    if W.shape != (N, N):
        problems.append(f"social_weights has shape {W.shape}, expected ({N}, {N})")
    else:
        if np.any(W < 0):
            problems.append("social_weights must be nonnegative")
        if np.any(np.diag(W) != 0):
            problems.append("social_weights must have a zero diagonal")

    hp = params.human
    for name in ("a", "c", "d", "p_ego", "p_bio"):
        v = getattr(hp, name)
        if v.shape != (N,):
            problems.append(f"human.{name} has length {v.size}, expected {N}")
    if all(getattr(hp, nm).shape == (N,) for nm in ("a", "c", "d", "p_ego", "p_bio")):
        for i in range(N):
            lab = f"prosumer {i + 1}"
            if not hp.a[i] > 0:
                problems.append(f"{lab}: a must be > 0 (got {hp.a[i]})")
            if hp.c[i] < 0 or hp.d[i] < 0:
                problems.append(f"{lab}: c and d must be >= 0")
            if not hp.c[i] + hp.d[i] > 0:
                problems.append(f"{lab}: c + d must be > 0")
            for nm in ("p_ego", "p_bio"):
                v = getattr(hp, nm)[i]
                if not 0 <= v <= 1:
                    problems.append(f"{lab}: {nm} must lie in [0, 1] (got {v})")

    for name, v in zip(("alpha", "beta", "gamma", "delta", "epsilon", "eta"), params.weights.as_tuple()):
        if not (np.isfinite(v) and v > 0):
            problems.append(f"welfare weight {name} must be > 0 (got {v})")

    for name in GAIN_NAMES:
        v = getattr(params.gains, name)
        if v.shape != (N,):
            problems.append(f"gain {name} has length {v.size}, expected {N}")
        elif np.any(~(v > 0)):
            bad = [i + 1 for i in np.flatnonzero(~(v > 0))]
            problems.append(f"gain {name} must be > 0 at nodes {bad}")

    if not params.constants.f_0 > 0:
        problems.append(f"f_0 must be > 0 (got {params.constants.f_0})")

    mon = params.monitor
    for name in ("Q_1", "Q_2"):
        v = getattr(mon, name)
        if v.shape != (N,) or np.any(~(v > 0)):
            problems.append(f"monitor {name} must be a positive length-{N} diagonal")
    if not (mon.zeta_2 > 0 and mon.zeta_3 > 0):
        problems.append("monitor zetas must be > 0")

    if problems:
        raise ValidationError(problems)
    return params


# ---------------------------------------------------------------------------
# algebraic maps


def social_laplacian(topology: Topology) -> np.ndarray:
    W = np.asarray(topology.social_weights, dtype=float)
    if np.any(W < 0):
        raise ValueError("social weights must be nonnegative")
    W = W - np.diag(np.diag(W))
    return np.diag(W.sum(axis=1)) - W


def line_reduction(lines: Sequence[LineParams], topology: Topology, omega_0: float):
    """Return (J, K) mapping steady d-voltages to steady line currents.

    I_d = J V_d and I_q = K V_d when V_q = 0.  The inner matrix
    -R - omega_0^2 L R^-1 L is diagonal, so the inverse is elementwise.
    """
    R = np.array([ln.R_k for ln in lines], dtype=float)
    L = np.array([ln.L_k for ln in lines], dtype=float)
    inner = -R - omega_0 ** 2 * L * L / R
    J = topology.incidence.T / inner[:, None]
    K = (-omega_0 * L / R)[:, None] * J
    return J, K


def _solve(A: np.ndarray, b: np.ndarray, what: str) -> np.ndarray:
    cond = np.linalg.cond(A)
    if not np.isfinite(cond):
        raise np.linalg.LinAlgError(f"{what}: singular system")
    if cond > COND_WARN:
        warnings.warn(f"{what}: condition number {cond:.3g} exceeds {COND_WARN:.0e}", RuntimeWarning)
    return np.linalg.solve(A, b)


def steady_norms(human: HumanParams, laplacian: np.ndarray, social_case) -> np.ndarray:
    case = SocialCase.parse(social_case)
    m = np.diag(human.c + human.d)
    if case is SocialCase.CASE_II:
        m = m + laplacian
    rhs = human.c * human.p_ego + human.d * human.p_bio
    p_bar = _solve(m, rhs, "steady_norms")
    lo = np.minimum(human.p_ego, human.p_bio)
    hi = np.maximum(human.p_ego, human.p_bio)
    tol = 1e-12
    if case is SocialCase.CASE_I:
        if np.any(p_bar < lo - tol) or np.any(p_bar > hi + tol):
            raise ArithmeticError("steady norms left the value interval; inputs are inconsistent")
    elif np.any(p_bar < lo.min() - tol) or np.any(p_bar > hi.max() + tol):
        warnings.warn("case-ii steady norms outside the hull of the value anchors", RuntimeWarning)
    return p_bar


@dataclass(frozen=True, eq=False)
class GridSteadyState:
    V_d: np.ndarray
    V_q: np.ndarray
    I_td: np.ndarray
    I_tq: np.ndarray
    I_d: np.ndarray
    I_q: np.ndarray


def grid_steady_matrix(params: ScenarioParams) -> np.ndarray:
    """Coefficient matrix of the grid blocks (V_d, V_q, I_td, I_tq, I_d, I_q).

    The rows are the right-hand sides of the grid ODEs multiplied through by
    their capacitances/inductances, so  G x + (load and input terms) = 0  at
    a forced equilibrium.
    """
    N, E, w = params.N, params.E, params.omega_0
    B = params.B
    C_t, L_t, R_t, R_L = params.C_t, params.L_t, params.R_t, params.R_L
    R, L = params.R_line, params.L_line
    n = 4 * N + 2 * E
    G = np.zeros((n, n))
    sVd, sVq, sTd, sTq = (slice(k * N, (k + 1) * N) for k in range(4))
    sId, sIq = slice(4 * N, 4 * N + E), slice(4 * N + E, n)
    G[sVd, sVd] = -np.diag(1 / R_L); G[sVd, sVq] = w * np.diag(C_t); G[sVd, sTd] = np.eye(N); G[sVd, sId] = B
    G[sVq, sVd] = -w * np.diag(C_t); G[sVq, sVq] = -np.diag(1 / R_L); G[sVq, sTq] = np.eye(N); G[sVq, sIq] = B
    G[sTd, sVd] = -np.eye(N); G[sTd, sTd] = -np.diag(R_t); G[sTd, sTq] = w * np.diag(L_t)
    G[sTq, sVq] = -np.eye(N); G[sTq, sTd] = -w * np.diag(L_t); G[sTq, sTq] = -np.diag(R_t)
    G[sId, sVd] = -B.T; G[sId, sId] = -np.diag(R); G[sId, sIq] = w * np.diag(L)
    G[sIq, sVq] = -B.T; G[sIq, sId] = -w * np.diag(L); G[sIq, sIq] = -np.diag(R)
    return G


def steady_grid(params: ScenarioParams, z_l, u_d, u_q) -> GridSteadyState:
    """Forced equilibrium of the grid for constant behaviour and inputs.

    Solves the full steady state, V_q included.  V_q vanishes exactly when
    ``u_q`` is consistent with the q-axis balance (see :func:`consistent_u_q`);
    in that case the result coincides with the reduced (J, K) form.
    """
    N, E = params.N, params.E
    z_l, u_d, u_q = (np.asarray(v, dtype=float) for v in (z_l, u_d, u_q))
    G = grid_steady_matrix(params)
    rhs = np.concatenate([params.I_Ld * z_l, params.I_Lq * z_l, -u_d, -u_q, np.zeros(2 * E)])
    x = _solve(G, rhs, "steady_grid")
    s = np.cumsum([0, N, N, N, N, E, E])
    return GridSteadyState(*(x[s[k]:s[k + 1]] for k in range(6)))


def consistent_u_q(params: ScenarioParams, z_l, u_d) -> np.ndarray:
    """The q-input that makes the forced equilibrium have V_q = 0.

    Solves the reduced steady-state equations for (V_d, I_td, I_tq, u_q).
    """
    N, w = params.N, params.omega_0
    G_a, G_b = params.coupling
    z_l, u_d = np.asarray(z_l, float), np.asarray(u_d, float)
    I = np.eye(N)
    Z = np.zeros((N, N))
    # unknowns: V_d, I_td, I_tq, u_q
    A = np.block([
        [I, np.diag(params.R_t), -w * np.diag(params.L_t), Z],
        [Z, -w * np.diag(params.L_t), -np.diag(params.R_t), I],
        [G_a, I, Z, Z],
        [-G_b, Z, I, Z],
    ])
    rhs = np.concatenate([u_d, np.zeros(N), params.I_Ld * z_l, params.I_Lq * z_l])
    return _solve(A, rhs, "consistent_u_q")[3 * N:]


def reduced_grid_residuals(params: ScenarioParams, gs: GridSteadyState, z_l, u_d, u_q) -> np.ndarray:
    """Residuals of the four reduced steady-state grid equations (V_q = 0 form)."""
    w = params.omega_0
    G_a, G_b = params.coupling
    r1 = -gs.V_d - params.R_t * gs.I_td + w * params.L_t * gs.I_tq + u_d
    r2 = -w * params.L_t * gs.I_td - params.R_t * gs.I_tq + u_q
    r3 = params.I_Ld * z_l - G_a @ gs.V_d - gs.I_td
    r4 = params.I_Lq * z_l + G_b @ gs.V_d - gs.I_tq
    return np.concatenate([r1, r2, r3, r4])


def current_matching_residual(params: ScenarioParams, z_l, V_d, I_td) -> float:
    """Total load current minus total generated current (both active parts)."""
    return float(np.sum(params.I_Ld * np.asarray(z_l) + np.asarray(V_d) / params.R_L) - np.sum(I_td))


def lyapunov_solve(A_sys, Q) -> np.ndarray:
    """Solve  -A^T P - P A + Q = 0  for P, with -A Hurwitz.

    Delegates to the Bartels-Stewart solver in scipy.
    """
    from scipy.linalg import solve_continuous_lyapunov

    A_sys = np.atleast_2d(np.asarray(A_sys, dtype=float))
    Q = np.asarray(Q, dtype=float)
    if Q.ndim == 1:
        Q = np.diag(Q)
    ev = np.linalg.eigvals(A_sys)
    if np.any(ev.real <= 0):
        raise ValueError(f"-A is not Hurwitz: eigenvalue {ev[np.argmin(ev.real)]:.6g} of A has nonpositive real part")
    P = solve_continuous_lyapunov(A_sys.T, Q)
    return 0.5 * (P + P.T)


def controller_P1(params: ScenarioParams) -> np.ndarray:
    return lyapunov_solve(np.diag(params.human.a), params.monitor.Q_1)


def norms_P2(params: ScenarioParams) -> np.ndarray:
    return lyapunov_solve(params.norm_matrix(), params.monitor.Q_2)
