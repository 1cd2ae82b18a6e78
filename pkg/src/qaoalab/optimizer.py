"""Angle optimization for QAOA circuits.

p = 1 is solved by a coarse grid followed by local refinement. Deeper
circuits are built one layer at a time: the optimum at p - 1 is stretched
onto p layers by interpolating its integrated-angle path (total resources
preserved), then refined together with a few Gaussian-perturbed copies.

Reported schedules are put in a canonical gauge using two exact symmetries
of the circuit: ``theta -> theta + 2 pi`` (a global phase per layer) wraps
mixer angles into (-pi, pi], and the conjugation ``(gamma, theta) ->
(-gamma, -theta)`` leaves all probabilities unchanged and makes
``sum(gamma) > 0``. On the energy-minimizing branch this leaves the mixer
angles negative; the relative sign between cost and mixer angles is not a
gauge freedom.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from . import _kernels
from .interp import MonotoneCubic
from .problems import EnergyTable
from .simulator import AngleSchedule, ground_overlap, qaoa_expectation, run_qaoa

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizeConfig:
    """Optimizer settings.

    ``tol`` is an absolute energy tolerance in raw units; ``None`` means
    ``1e-8 * (e_max - e_min)`` of the instance at hand. ``gradient`` picks
    how derivative-based descent gets its gradient: ``"adjoint"`` (exact,
    about three circuit evaluations) or ``"fd"`` (central differences with
    ``grad_step``, 4p evaluations). ``local="nelder-mead"`` switches to the
    derivative-free simplex.
    """

    restarts: int = 1
    max_evals: int = 5000
    grad_step: float = 1e-4
    tol: float | None = None
    strategy: str = "auto"
    seed: int = 0
    local: str = "lbfgs"
    gradient: str = "adjoint"
    grid_size: int = 48
    gamma_cap_factor: float = 4.0 * math.pi
    perturbation: float = 0.05

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.grad_step <= 0:
            raise ValueError("grad_step must be positive")
        if self.tol is not None and self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.strategy not in ("auto", "grid+local", "extend+local"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.local not in ("lbfgs", "nelder-mead"):
            raise ValueError(f"unknown local method {self.local!r}")
        if self.gradient not in ("adjoint", "fd"):
            raise ValueError(f"unknown gradient {self.gradient!r}")

    def tol_for(self, t: EnergyTable) -> float:
        return self.tol if self.tol is not None else 1e-8 * t.width


@dataclass(frozen=True)
class OptimResult:
    schedule: AngleSchedule
    value: float
    evals: int
    converged: bool
    ground_overlap: float

    def to_json(self, instance_id: str = "", seed: int | None = None) -> dict:
        return {
            "instance_id": instance_id,
            "p": self.schedule.p,
            "gamma": [float(v) for v in self.schedule.gamma],
            "theta": [float(v) for v in self.schedule.theta],
            "value": float(self.value),
            "ground_overlap": float(self.ground_overlap),
            "evals": int(self.evals),
            "seed": seed,
        }

    def save(self, path, instance_id: str = "", seed: int | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_json(instance_id, seed), indent=1))

    @staticmethod
    def load_schedule(path) -> AngleSchedule:
        data = json.loads(Path(path).read_text())
        return AngleSchedule(data["gamma"], data["theta"])


def canonicalize(s: AngleSchedule) -> AngleSchedule:
    theta = np.mod(s.theta + math.pi, 2 * math.pi) - math.pi
    theta = np.where(theta == -math.pi, math.pi, theta)
    gamma = s.gamma
    if gamma.sum() < 0:
        gamma, theta = -gamma, -theta
    return AngleSchedule(gamma, theta)


def objective_gradient(t: EnergyTable, s: AngleSchedule, step: float) -> np.ndarray:
    """Central finite-difference gradient, ordered (d/dgamma_1..p, d/dtheta_1..p)."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = s.as_vector()
    grad = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        up = qaoa_expectation(t, AngleSchedule.from_vector(x + e))
        down = qaoa_expectation(t, AngleSchedule.from_vector(x - e))
        grad[i] = (up - down) / (2 * step)
    return grad


def adjoint_gradient(t: EnergyTable, s: AngleSchedule) -> tuple[float, np.ndarray]:
    value, gg, gt = _kernels.qaoa_value_and_grad(t.raw, t.n, s.gamma, s.theta)
    return float(value), np.concatenate([gg, gt])


class _Counted:
    def __init__(self, t: EnergyTable, cfg: OptimizeConfig):
        self.t = t
        self.cfg = cfg
        self.evals = 0

    def value(self, x):
        self.evals += 1
        p = x.size // 2
        psi = _kernels.qaoa_state(self.t.raw, self.t.n, x[:p], x[p:])
        return float(_kernels.expectation(psi, self.t.raw))

    def value_and_grad(self, x):
        p = x.size // 2
        if self.cfg.gradient == "adjoint":
            self.evals += 3
            v, gg, gt = _kernels.qaoa_value_and_grad(self.t.raw, self.t.n, x[:p], x[p:])
            return float(v), np.concatenate([gg, gt])
        v = self.value(x)
        self.evals += 4 * p
        return v, objective_gradient(self.t, AngleSchedule.from_vector(x), self.cfg.grad_step)


def _newton_polish(counter: _Counted, x: np.ndarray, tol: float, rounds: int = 4, step: float = 1e-5):
    """Newton steps on the gradient alone, with a finite-difference Hessian.

    Near the optimum the remaining decrease of the objective falls below
    floating-point resolution, so line searches stall while the gradient is
    still well above ``tol``. Steps use |eigenvalues| so saddle directions
    are not followed uphill, and are accepted only if the gradient shrinks
    and the value does not rise beyond round-off.
    """
    value, grad = counter.value_and_grad(x)
    d = x.size
    for _ in range(rounds):
        if np.max(np.abs(grad)) < tol:
            break
        hess = np.empty((d, d))
        for i in range(d):
            e = np.zeros(d)
            e[i] = step
            hess[:, i] = (counter.value_and_grad(x + e)[1] - counter.value_and_grad(x - e)[1]) / (2 * step)
        w, v = np.linalg.eigh(0.5 * (hess + hess.T))
        keep = np.abs(w) > 1e-8 * np.max(np.abs(w))
        trial = x - v[:, keep] @ ((v[:, keep].T @ grad) / np.abs(w[keep]))
        t_value, t_grad = counter.value_and_grad(trial)
        if np.max(np.abs(t_grad)) < np.max(np.abs(grad)) and t_value <= value + 1e-12 * max(1.0, abs(value)):
            x, value, grad = trial, t_value, t_grad
        else:
            break
    return x, value


def _local(t: EnergyTable, x0: np.ndarray, cfg: OptimizeConfig, counter: _Counted):
    tol = cfg.tol_for(t)
    start_value = counter.value(x0)
    if cfg.local == "lbfgs":
        scale = max(abs(start_value), 1.0)
        res = minimize(counter.value_and_grad, x0, jac=True, method="L-BFGS-B",
                       options={"maxfun": cfg.max_evals, "maxiter": cfg.max_evals,
                                "ftol": tol / scale, "gtol": tol, "maxls": 40})
        converged = bool(res.success)
    else:
        res = minimize(counter.value, x0, method="Nelder-Mead",
                       options={"maxfev": cfg.max_evals, "fatol": tol, "xatol": 1e-10,
                                "adaptive": True})
        converged = bool(res.success)
    x, value = res.x, float(res.fun)
    if np.all(np.isfinite(x)):
        x, value = _newton_polish(counter, x, tol)
    if value > start_value:
        # descent property: never hand back something worse than the start
        x, value, converged = x0, start_value, False
    return x, value, converged


def _result(t: EnergyTable, x: np.ndarray, value: float, evals: int, converged: bool) -> OptimResult:
    sched = canonicalize(AngleSchedule.from_vector(x))
    state = run_qaoa(t, sched)
    return OptimResult(schedule=sched, value=value, evals=evals, converged=converged,
                       ground_overlap=ground_overlap(state, t))


def p1_grid(t: EnergyTable, cfg: OptimizeConfig):
    """Grid over gamma in (0, gamma_cap] and theta in (-pi, pi).

    ``gamma_cap = gamma_cap_factor / (e_max - e_min)``; the sign of gamma is
    fixed by the conjugation symmetry, theta keeps both signs.
    """
    k = cfg.grid_size
    gamma_cap = cfg.gamma_cap_factor / t.width
    gammas = gamma_cap * np.arange(1, k + 1) / k
    thetas = -math.pi + 2 * math.pi * (np.arange(k) + 0.5) / k
    values = np.empty((k, k))
    for i, g in enumerate(gammas):
        for j, th in enumerate(thetas):
            psi = _kernels.qaoa_state(t.raw, t.n, np.array([g]), np.array([th]))
            values[i, j] = _kernels.expectation(psi, t.raw)
    return gammas, thetas, values


def optimize_p1(t: EnergyTable, cfg: OptimizeConfig = OptimizeConfig()) -> OptimResult:
    counter = _Counted(t, cfg)
    gammas, thetas, values = p1_grid(t, cfg)
    counter.evals += values.size
    order = np.argsort(values, axis=None, kind="stable")
    best = None
    for flat in order[: cfg.restarts]:
        i, j = np.unravel_index(flat, values.shape)
        x, value, conv = _local(t, np.array([gammas[i], thetas[j]]), cfg, counter)
        if best is None or value < best[1]:
            best = (x, value, conv)
    return _result(t, best[0], best[1], counter.evals, best[2])


def extend_schedule(prev: AngleSchedule) -> AngleSchedule:
    """Resample the integrated-angle path of ``prev`` onto p + 1 layers.

    Cumulative sums sit on nodes ``k / p``; a monotone cubic through them is
    read off at ``k / (p + 1)`` and differenced back into angles, so the
    totals ``sum(gamma)`` and ``sum(theta)`` are kept exactly.
    """
    p = prev.p
    old = np.linspace(0.0, 1.0, p + 1)
    new = np.linspace(0.0, 1.0, p + 2)
    out = []
    for angles in (prev.gamma, prev.theta):
        cum = np.concatenate([[0.0], np.cumsum(angles)])
        if p == 1:
            resampled = cum[-1] * new
        else:
            resampled = MonotoneCubic(old, cum)(new)
        resampled[-1] = cum[-1]
        out.append(np.diff(resampled))
    return AngleSchedule(out[0], out[1])


def optimize_p(t: EnergyTable, p: int, cfg: OptimizeConfig = OptimizeConfig(),
               previous: OptimResult | None = None) -> OptimResult:
    """Optimize a p-layer circuit, warm-started from the (p-1)-layer optimum.

    ``previous`` supplies that optimum; otherwise the chain is run from p = 1.
    If every start ends above the (p-1) value, the (p-1) schedule padded with
    an idle layer is refined as a fallback, which can always reach it.
    """
    if p == 1:
        return optimize_p1(t, cfg)
    if p < 1:
        raise ValueError("p must be >= 1")
    if previous is None:
        for previous in optimize_chain(t, p - 1, cfg):
            pass
    elif previous.schedule.p != p - 1:
        raise ValueError("previous result must have p - 1 layers")
    counter = _Counted(t, cfg)
    rng = np.random.default_rng([int(cfg.seed) % 2**63, p])
    warm = extend_schedule(previous.schedule).as_vector()
    starts = [warm] + [warm + rng.normal(0.0, cfg.perturbation, size=warm.size)
                       for _ in range(cfg.restarts)]
    best = None
    for x0 in starts:
        x, value, conv = _local(t, x0, cfg, counter)
        if best is None or value < best[1]:
            best = (x, value, conv)
    tol = cfg.tol_for(t)
    if best[1] > previous.value + tol:
        prev = previous.schedule
        padded = np.concatenate([prev.gamma, [0.0], prev.theta, [0.0]])
        x, value, conv = _local(t, padded, cfg, counter)
        if value < best[1]:
            best = (x, value, conv)
    return _result(t, best[0], best[1], counter.evals, best[2])


def optimize_chain(t: EnergyTable, p_max: int, cfg: OptimizeConfig = OptimizeConfig()):
    """Yield optimal results for p = 1 .. p_max, each warm-started from the last."""
    result = optimize_p1(t, cfg)
    yield result
    for p in range(2, p_max + 1):
        result = optimize_p(t, p, cfg, result)
        yield result


def config_from_dict(data: dict) -> OptimizeConfig:
    fields = set(OptimizeConfig.__dataclass_fields__)
    return OptimizeConfig(**{k: v for k, v in data.items() if k in fields})


def config_to_dict(cfg: OptimizeConfig) -> dict:
    return asdict(cfg)


def with_seed(cfg: OptimizeConfig, seed: int) -> OptimizeConfig:
    return replace(cfg, seed=seed)
