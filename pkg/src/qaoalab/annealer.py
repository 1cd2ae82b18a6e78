"""Continuous annealing along a Gamma(Theta) path.

The state obeys

    i d/dTheta |psi> = [s H_x + Gamma'(Theta) H] |psi>,   |psi(0)> = |+>^n,

where ``s`` is the schedule's ``mixer_sign``. With ``s = +1`` this is the
Theta-parameterized annealing equation as written; ``s = -1`` is the same
equation in the signed variable ``-Theta`` and replays schedules whose mixer
angles are negative.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .problems import EnergyTable
from .simulator import StateVector, output_distribution, plus_state
from .trajectory import ContinuousSchedule

logger = logging.getLogger(__name__)

INTEGRATORS = ("rk4", "trotter")
MIN_STEPS = 100
PHASE_GUARD = 0.5


class StepSizeError(ValueError):
    pass


@dataclass
class AnnealRun:
    schedule: ContinuousSchedule
    steps: int
    integrator: str
    final_state: StateVector
    final_norm: float
    tol: float = 1e-8
    step_history: list = field(default_factory=list)

    def manifest(self, instance_id: str = "", schedule_ref: str = "") -> dict:
        return {
            "instance_id": instance_id,
            "schedule_ref": schedule_ref,
            "steps": self.steps,
            "integrator": self.integrator,
            "final_norm": self.final_norm,
            "fidelity_checks": {"norm_drift": abs(self.final_norm - 1.0)},
        }


def _grid_slopes(cs: ContinuousSchedule, grid: np.ndarray):
    mids = 0.5 * (grid[1:] + grid[:-1])
    return mids, cs.dgamma(mids)


def hamiltonian_bound(t: EnergyTable, cs: ContinuousSchedule, samples: int = 2001) -> float:
    """Upper bound on ||s H_x + Gamma' H|| along the path (sampled Gamma')."""
    grid = np.linspace(0.0, cs.theta_max, samples)
    slope = float(np.max(np.abs(cs.dgamma(grid))))
    if cs.kind == "linear":
        slope = max(slope, float(np.max(np.abs(cs._interp.slopes))))
    return t.n + slope * float(np.max(np.abs(t.raw)))


def knot_grid(cs: ContinuousSchedule, steps: int) -> np.ndarray:
    """Theta nodes with every knot on the grid and no step longer than Theta_max / steps.

    Gamma' is only piecewise smooth, so steps that straddle a knot would
    lose the integrator's order.
    """
    theta = cs.knots[:, 0]
    pieces = [np.linspace(a, b, max(1, math.ceil(steps * (b - a) / cs.theta_max - 1e-9)) + 1)[:-1]
              for a, b in zip(theta[:-1], theta[1:])]
    return np.append(np.concatenate(pieces), theta[-1])


def _rk4_damping(t: EnergyTable, cs: ContinuousSchedule, steps: int) -> float:
    """Estimated RK4 norm loss: sum over steps of (h ||H(mid)||)^6 / 144."""
    grid = knot_grid(cs, steps)
    _, slopes = _grid_slopes(cs, grid)
    local = t.n + np.abs(slopes) * float(np.max(np.abs(t.raw)))
    return float(np.sum((np.diff(grid) * local) ** 6) / 144.0)


def default_steps(t: EnergyTable, cs: ContinuousSchedule, tol: float = 1e-8) -> int:
    """ceil(50 max(Theta_max n, Gamma_max W)), raised until the phase guard holds
    and the estimated RK4 norm loss stays below ``tol / 2``."""
    base = math.ceil(50 * max(cs.theta_max * t.n, cs.gamma_max * t.width))
    guard = math.ceil(cs.theta_max * hamiltonian_bound(t, cs) / PHASE_GUARD) + 1
    steps = max(MIN_STEPS, base, guard)
    for _ in range(20):
        loss = _rk4_damping(t, cs, steps)
        if loss <= 0.5 * tol:
            break
        steps = math.ceil(steps * (loss / (0.5 * tol)) ** 0.2) + 1
    return steps


def _check_schedule(cs: ContinuousSchedule):
    theta = cs.knots[:, 0]
    gamma = cs.knots[:, 1]
    if np.any(np.diff(theta) <= 0) or np.any(np.diff(gamma) < 0):
        raise ValueError("annealing schedule must be monotone")


def _sweep(t: EnergyTable, cs: ContinuousSchedule, psi: np.ndarray, grid: np.ndarray, integrator: str,
           backward: bool, history):
    """One pass over ``grid`` in place; appends per-step norms to ``history`` when given."""
    n = t.n
    energies = t.raw
    sign = float(cs.mixer_sign)
    direction = -1.0 if backward else 1.0
    steps = grid.size - 1
    order = range(steps - 1, -1, -1) if backward else range(steps)
    if integrator == "trotter":
        _, slopes = _grid_slopes(cs, grid)
        for k in order:
            h = direction * (grid[k + 1] - grid[k])
            # exp(-i h/2 s H_x) is the kernel mixer with angle s h
            _kernels.mixer(psi, n, sign * h)
            _kernels.phase(psi, energies, h * float(slopes[k]))
            _kernels.mixer(psi, n, sign * h)
            if history is not None:
                history.append(float(np.linalg.norm(psi)))
        return
    k1, k2, k3, k4, work = (np.empty_like(psi) for _ in range(5))
    coefs = np.empty(3)
    piecewise = cs.kind == "linear"
    for k in order:
        a, b = grid[k], grid[k + 1]
        h = direction * (b - a)
        if piecewise:
            # constant within a segment; end values at knots would pick up the neighbour's slope
            coefs[:] = cs.dgamma(0.5 * (a + b))
        else:
            coefs[:] = cs.dgamma(np.array((b, 0.5 * (a + b), a) if backward else (a, 0.5 * (a + b), b)))
        _kernels.rk4_step(psi, energies, n, sign, coefs, h, k1, k2, k3, k4, work)
        if history is not None:
            history.append(float(np.linalg.norm(psi)))


def evolve(t: EnergyTable, cs: ContinuousSchedule, state: StateVector, steps: int | None = None,
           integrator: str = "rk4", backward: bool = False, grid=None, record: bool = False,
           guard: bool = True, tol: float = 1e-8, max_refinements: int = 4) -> AnnealRun:
    """Propagate ``state`` over [0, Theta_max], or back from Theta_max to 0.

    The default grid puts every schedule knot on a node (see ``knot_grid``),
    so the step count can exceed ``steps`` by up to the number of segments.
    When ``steps`` is left to ``default_steps`` and an RK4 pass loses more
    than ``tol`` of norm, the step count doubles and the pass is repeated.
    ``grid`` overrides the nodes explicitly. ``guard=False`` lifts the
    per-step phase limit, which only makes sense for splitting runs that
    deliberately use coarse steps.
    """
    if integrator not in INTEGRATORS:
        raise ValueError(f"integrator must be one of {INTEGRATORS}")
    if state.n != t.n:
        raise ValueError("state and energy table sizes differ")
    _check_schedule(cs)
    adaptive = grid is None and steps is None and integrator == "rk4"
    if grid is None:
        steps = default_steps(t, cs, tol) if steps is None else int(steps)
        if steps < 1:
            raise ValueError("steps must be positive")
        grid = knot_grid(cs, steps)
    else:
        grid = np.asarray(grid, dtype=np.float64)
        if grid.size < 2 or np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be strictly increasing")
    bound = hamiltonian_bound(t, cs)
    if guard and bound * float(np.max(np.diff(grid))) >= PHASE_GUARD:
        h_max = float(np.max(np.diff(grid)))
        raise StepSizeError(f"||H|| dTheta = {bound * h_max:.3g} exceeds {PHASE_GUARD}; use more steps")

    norm0 = state.norm()
    for attempt in range(max_refinements + 1):
        psi = state.amp.copy()
        history = [] if record else None
        _sweep(t, cs, psi, grid, integrator, backward, history)
        norm = float(np.linalg.norm(psi))
        drift = abs(norm - norm0)
        if not adaptive or drift <= tol or attempt == max_refinements:
            break
        steps *= 2
        grid = knot_grid(cs, steps)
    if integrator == "rk4":
        if drift > tol:
            logger.warning("RK4 norm drift %.3g over %d steps", drift, grid.size - 1)
        psi /= norm / norm0
    return AnnealRun(schedule=cs, steps=grid.size - 1, integrator=integrator, final_state=StateVector(t.n, psi),
                     final_norm=norm, tol=tol, step_history=history or [])


def integrate_qa(t: EnergyTable, cs: ContinuousSchedule, steps: int | None = None,
                 integrator: str = "rk4", grid=None) -> StateVector:
    return anneal(t, cs, steps, integrator, grid).final_state


def anneal(t: EnergyTable, cs: ContinuousSchedule, steps: int | None = None,
           integrator: str = "rk4", grid=None) -> AnnealRun:
    if steps is not None and grid is None and steps < MIN_STEPS:
        raise StepSizeError(f"steps must be >= {MIN_STEPS}")
    return evolve(t, cs, plus_state(t.n), steps, integrator, grid=grid)


def qa_endpoint_distribution(t: EnergyTable, cs: ContinuousSchedule, steps: int | None = None,
                             integrator: str = "rk4"):
    return output_distribution(integrate_qa(t, cs, steps, integrator), t)
