"""Time stepping for the affine closed loop  dx/dt = M x + b.

Exact stepping uses the augmented-matrix exponential

    expm(h [[M, b], [0, 0]]) = [[e^{hM}, (int_0^h e^{sM} ds) b], [0, 1]]

so one matrix product advances the state by h without truncation error.
RK4 is kept only as an independent cross-check on de-stiffened systems.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .dynamics import ClosedLoopSystem

# real-axis stability limit of classical RK4
RK4_STABILITY = 2.785293563405282


class Method(enum.Enum):
    EXACT = "exact"
    RK4 = "rk4"


class StepSizeError(ValueError):
    pass


@dataclass
class SimConfig:
    t_final: float = 60.0
    output_step: float = 0.05
    method: Method = Method.EXACT
    rk4_step: float = 1e-7
    convergence_tol: float | None = None
    stop_on_convergence: bool = True

    def __post_init__(self):
        self.method = Method(self.method)
        if not (self.t_final > 0 and self.output_step > 0 and self.rk4_step > 0):
            raise ValueError("t_final, output_step and rk4_step must be positive")
        if self.output_step > self.t_final:
            raise ValueError("output_step must not exceed t_final")
        if self.convergence_tol is not None and not self.convergence_tol > 0:
            raise ValueError("convergence_tol must be positive")


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    monitors: dict = field(default_factory=dict)
    converged: bool = False
    converged_time: float | None = None

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def write_csv(self, path, names: list[str], extra: tuple[str, ...] = ()) -> None:
        """Header ``t,<names>,residual[,extra...]``, 17 significant digits."""
        cols = ["residual", *extra]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["t", *names, *cols])
            for k, t in enumerate(self.times):
                row = [t, *self.states[k], *(self.monitors[c][k] for c in cols)]
                wr.writerow([f"{v:.17g}" for v in row])


def exact_propagator(sys: ClosedLoopSystem, h: float) -> tuple[np.ndarray, np.ndarray]:
    """(Phi, gamma) with x(t+h) = Phi x(t) + gamma."""
    if not h > 0:
        raise ValueError("step must be positive")
    n = sys.n
    aug = np.zeros((n + 1, n + 1))
    aug[:n, :n] = sys.M
    aug[:n, n] = sys.b
    E = expm(h * aug)
    return E[:n, :n], E[:n, n]


def step_exact(sys: ClosedLoopSystem, x: np.ndarray, h: float) -> np.ndarray:
    Phi, gamma = exact_propagator(sys, h)
    return Phi @ x + gamma


def rk4_limit(sys: ClosedLoopSystem) -> tuple[float, complex]:
    """Largest admissible RK4 step and the eigenvalue that sets it.

    Uses the real-axis bound 2.785/|lambda|, which is conservative enough for
    the lightly damped oscillatory modes here after the 0.9 safety factor
    applied by the caller.
    """
    ev = np.linalg.eigvals(sys.M)
    k = int(np.argmax(np.abs(ev)))
    lam = ev[k]
    if abs(lam) == 0:
        return math.inf, lam
    return RK4_STABILITY / abs(lam), lam


def check_rk4_step(sys: ClosedLoopSystem, h: float) -> None:
    hmax, lam = rk4_limit(sys)
    if h > 0.9 * hmax:
        raise StepSizeError(
            f"RK4 step {h:.3g} s exceeds the stability limit {0.9 * hmax:.3g} s set by eigenvalue {lam:.6g}")


def _rk4(M, b, x, h):
    k1 = M @ x + b
    k2 = M @ (x + 0.5 * h * k1) + b
    k3 = M @ (x + 0.5 * h * k2) + b
    k4 = M @ (x + h * k3) + b
    return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def step_rk4(sys: ClosedLoopSystem, x: np.ndarray, h: float, check: bool = True) -> np.ndarray:
    if not h > 0:
        raise ValueError("step must be positive")
    if check:
        check_rk4_step(sys, h)
    return _rk4(sys.M, sys.b, np.asarray(x, float), h)


def default_tolerance(sys: ClosedLoopSystem) -> float:
    return 1e-8 * (1.0 + float(np.linalg.norm(sys.b)))


def simulate(sys: ClosedLoopSystem, x0, config: SimConfig | None = None) -> Trajectory:
    cfg = config or SimConfig()
    tol = cfg.convergence_tol if cfg.convergence_tol is not None else default_tolerance(sys)
    x = np.array(x0, dtype=float)
    if x.shape != (sys.n,):
        raise ValueError(f"initial state has shape {x.shape}, expected ({sys.n},)")

    n_out = int(round(cfg.t_final / cfg.output_step))
    h_out = cfg.t_final / n_out
    if cfg.method is Method.EXACT:
        Phi, gamma = exact_propagator(sys, h_out)
        advance = lambda v: Phi @ v + gamma
    else:
        n_sub = max(1, math.ceil(h_out / cfg.rk4_step - 1e-9))
        h = h_out / n_sub
        check_rk4_step(sys, h)

        def advance(v):
            for _ in range(n_sub):
                v = _rk4(sys.M, sys.b, v, h)
            return v

    times, states, resid = [0.0], [x.copy()], [float(np.linalg.norm(sys.rhs(x)))]
    k = 0
    while k < n_out and not (cfg.stop_on_convergence and resid[-1] < tol):
        x = advance(x)
        k += 1
        times.append(k * h_out)
        states.append(x.copy())
        resid.append(float(np.linalg.norm(sys.rhs(x))))

    resid = np.array(resid)
    # converged: below tolerance at the last sample; the time is the start of
    # the final run of samples that all stay below it
    converged = bool(resid[-1] < tol)
    conv_time = None
    if converged:
        above = np.nonzero(resid >= tol)[0]
        conv_time = 0.0 if above.size == 0 else times[above[-1] + 1]
    return Trajectory(np.array(times), np.array(states), {"residual": resid}, converged, conv_time)


@dataclass
class TimescaleReport:
    eigenvalues: np.ndarray
    clusters: dict          # decade exponent -> sorted decay rates |Re lambda|
    fastest: float
    slowest: float
    stiffness: float

    def summary(self) -> str:
        lines = [f"decade 1e{k:+d}: {len(v)} modes, |Re| in [{v.min():.4g}, {v.max():.4g}]"
                 for k, v in sorted(self.clusters.items())]
        lines.append(f"stiffness ratio {self.stiffness:.3g}")
        return "\n".join(lines)


def timescale_report(sys: ClosedLoopSystem, zero_tol: float = 1e-9) -> TimescaleReport:
    ev = np.linalg.eigvals(sys.M)
    rates = np.abs(ev.real)
    rates = rates[rates > zero_tol]
    decades = np.floor(np.log10(rates)).astype(int)
    clusters = {int(k): np.sort(rates[decades == k]) for k in np.unique(decades)}
    return TimescaleReport(ev, clusters, float(rates.max()), float(rates.min()),
                           float(rates.max() / rates.min()))
