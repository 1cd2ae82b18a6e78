"""Integrated-angle paths, the polar circle law and continuous schedules.

A schedule with angles ``gamma_i`` and ``theta_i`` traces the path

    Theta_n = 1/2 |sum_{m<=n} theta_m|,   Gamma_n = sum_{m<=n} gamma_m,

starting at (0, 0). Energy-minimizing circuits rotate the mixer against
the cost phase, so the mixer angles of a canonical schedule are usually
negative. The path stores magnitudes together with ``mixer_sign``, which
is what the annealer needs to replay the same Hamiltonian path.

Polar coordinates come in two frames:

* ``"cumulative"``: ``(Theta/Theta_max, Gamma/Gamma_max)``, running from
  (0, 0) to (1, 1);
* ``"annealing"`` (default for the circle law): ``(Theta/Theta_max,
  1 - Gamma/Gamma_max)``, which measures the cost weight still to be
  applied and runs from (0, 1) to (1, 0). Both endpoints then sit on the
  unit circle, at phi = pi/2 and phi = 0.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .interp import MonotoneCubic, PiecewiseLinear
from .simulator import AngleSchedule

FRAMES = ("annealing", "cumulative")


@dataclass(frozen=True)
class TrajectoryPath:
    p: int
    theta_cum: np.ndarray
    gamma_cum: np.ndarray
    mixer_sign: int = 1
    flags: tuple = field(default=())

    @property
    def theta_max(self) -> float:
        return float(self.theta_cum[-1])

    @property
    def gamma_max(self) -> float:
        return float(self.gamma_cum[-1])

    @property
    def monotone(self) -> bool:
        return "non-monotone" not in self.flags

    def normalized(self) -> tuple[np.ndarray, np.ndarray]:
        if not (self.theta_max > 0 and self.gamma_max > 0):
            raise ValueError("path has no resources to normalize by")
        return self.theta_cum / self.theta_max, self.gamma_cum / self.gamma_max


@dataclass(frozen=True)
class CircleFit:
    epsilon: float
    rms_residual: float
    n: int | None
    p: int | None
    points: int = 0

    @property
    def accepted(self) -> bool:
        """Sanity bound on the size of the correction."""
        return abs(self.epsilon) < 0.5


def cumulative_path(s: AngleSchedule) -> TrajectoryPath:
    sign = 1 if s.theta.sum() >= 0 else -1
    theta_cum = np.concatenate([[0.0], 0.5 * np.cumsum(sign * s.theta)])
    gamma_cum = np.concatenate([[0.0], np.cumsum(s.gamma)])
    flags = []
    if np.any(np.diff(theta_cum) < 0) or np.any(np.diff(gamma_cum) < 0):
        flags.append("non-monotone")
    if not (theta_cum[-1] > 0 and gamma_cum[-1] > 0):
        flags.append("no-resources")
    return TrajectoryPath(p=s.p, theta_cum=theta_cum, gamma_cum=gamma_cum,
                          mixer_sign=sign, flags=tuple(flags))


def rescale_schedule(s: AngleSchedule, zeta_gamma: float, zeta_theta: float = 1.0) -> AngleSchedule:
    if not (zeta_gamma > 0 and zeta_theta > 0):
        raise ValueError("rescaling factors must be positive")
    return AngleSchedule(s.gamma / zeta_gamma, s.theta / zeta_theta)


def _frame_coords(path: TrajectoryPath, frame: str):
    if frame not in FRAMES:
        raise ValueError(f"unknown frame {frame!r}")
    u, v = path.normalized()
    if frame == "annealing":
        v = 1.0 - v
    return u, v


def polar_coords(path: TrajectoryPath, frame: str = "annealing") -> tuple[np.ndarray, np.ndarray]:
    """(R_n, phi_n) for n = 0..p.

    ``phi = arctan[(Theta_max / Gamma_max)(Gamma / Theta)]`` in the chosen
    frame. A point at the origin takes the angle of the path's first
    segment, its limit along the path.
    """
    u, v = _frame_coords(path, frame)
    r = np.hypot(u, v)
    phi = np.arctan2(v, u)
    at_origin = r == 0
    if np.any(at_origin):
        nxt = np.flatnonzero(~at_origin)
        limit = math.pi / 2 if nxt.size == 0 else float(phi[nxt[0]])
        phi = np.where(at_origin, limit, phi)
    return r, phi


def circle_radius(phi, epsilon: float):
    return 1.0 + epsilon * (1.0 - np.cos(4.0 * np.asarray(phi)))


def fit_circle(paths, frame: str = "annealing", min_p: int = 5, n: int | None = None) -> CircleFit:
    """Least-squares epsilon in R = 1 + eps (1 - cos 4 phi) over interior points."""
    paths = list(paths)
    if not paths:
        raise ValueError("need at least one path")
    rs, phis = [], []
    for path in paths:
        if path.p < min_p:
            raise ValueError(f"paths need p >= {min_p}, got {path.p}")
        r, phi = polar_coords(path, frame)
        rs.append(r[1:-1])
        phis.append(phi[1:-1])
    r = np.concatenate(rs)
    phi = np.concatenate(phis)
    a = 1.0 - np.cos(4.0 * phi)
    denom = float(a @ a)
    if r.size == 0 or denom == 0.0:
        raise ValueError("insufficient points to fit the circle law")
    eps = float((r - 1.0) @ a / denom)
    resid = r - circle_radius(phi, eps)
    ps = {path.p for path in paths}
    return CircleFit(epsilon=eps, rms_residual=float(np.sqrt(np.mean(resid**2))), n=n,
                     p=ps.pop() if len(ps) == 1 else None, points=int(r.size))


def mean_path(paths) -> TrajectoryPath:
    """Layer-wise average of normalized paths sharing the same p, scaled to mean resources."""
    paths = list(paths)
    ps = {path.p for path in paths}
    if len(ps) != 1:
        raise ValueError("paths must share the same layer count")
    us, vs = zip(*(path.normalized() for path in paths))
    tmax = float(np.mean([path.theta_max for path in paths]))
    gmax = float(np.mean([path.gamma_max for path in paths]))
    signs = {path.mixer_sign for path in paths}
    return TrajectoryPath(p=ps.pop(), theta_cum=np.mean(us, axis=0) * tmax,
                          gamma_cum=np.mean(vs, axis=0) * gmax,
                          mixer_sign=signs.pop() if len(signs) == 1 else 1)


def arclength_resample(path: TrajectoryPath, nodes: int = 100) -> np.ndarray:
    """Normalized path resampled at evenly spaced normalized arclength, shape (nodes, 2)."""
    u, v = path.normalized()
    seg = np.hypot(np.diff(u), np.diff(v))
    s = np.concatenate([[0.0], np.cumsum(seg)])
    s /= s[-1]
    grid = np.linspace(0.0, 1.0, nodes)
    return np.column_stack([np.interp(grid, s, u), np.interp(grid, s, v)])


def collapse_rms(a: TrajectoryPath, b: TrajectoryPath, nodes: int = 100) -> float:
    pa, pb = arclength_resample(a, nodes), arclength_resample(b, nodes)
    return float(np.sqrt(np.mean(np.sum((pa - pb) ** 2, axis=1))))


class NonMonotonePathError(ValueError):
    def __init__(self, indices):
        self.indices = list(indices)
        super().__init__(f"path is not monotone at layers {self.indices}")


@dataclass(frozen=True)
class ContinuousSchedule:
    """Gamma(Theta) on [0, theta_max] through the path knots.

    ``kind`` is ``"monotone-cubic"`` or ``"linear"`` (piecewise-constant
    dGamma/dTheta, the exact image of a QAOA staircase).
    """

    knots: np.ndarray
    kind: str = "monotone-cubic"
    mixer_sign: int = 1

    def __post_init__(self):
        knots = np.array(self.knots, dtype=np.float64)
        if knots.ndim != 2 or knots.shape[1] != 2 or knots.shape[0] < 2:
            raise ValueError("knots must be an (m, 2) array with m >= 2")
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        cls = {"monotone-cubic": MonotoneCubic, "linear": PiecewiseLinear}.get(self.kind)
        if cls is None:
            raise ValueError(f"unknown interpolant {self.kind!r}")
        object.__setattr__(self, "_interp", cls(knots[:, 0], knots[:, 1]))

    @property
    def theta_max(self) -> float:
        return float(self.knots[-1, 0])

    @property
    def gamma_max(self) -> float:
        return float(self.knots[-1, 1])

    def gamma(self, theta):
        return self._interp(theta)

    def dgamma(self, theta):
        return self._interp.derivative(theta)

    def to_json(self) -> dict:
        return {"kind": self.kind, "mixer_sign": self.mixer_sign,
                "knots": [[float(a), float(b)] for a, b in self.knots]}

    @classmethod
    def from_json(cls, data: dict) -> "ContinuousSchedule":
        return cls(knots=np.asarray(data["knots"]), kind=data.get("kind", "monotone-cubic"),
                   mixer_sign=int(data.get("mixer_sign", 1)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "ContinuousSchedule":
        return cls.from_json(json.loads(Path(path).read_text()))


def continuous_schedule(path: TrajectoryPath, kind: str = "monotone-cubic") -> ContinuousSchedule:
    dt = np.diff(path.theta_cum)
    dg = np.diff(path.gamma_cum)
    bad = np.flatnonzero((dt <= 0) | (dg < 0)) + 1
    if bad.size:
        raise NonMonotonePathError(bad)
    knots = np.column_stack([path.theta_cum, path.gamma_cum])
    knots[0] = 0.0
    return ContinuousSchedule(knots=knots, kind=kind, mixer_sign=path.mixer_sign)


def rescale_continuous(cs: ContinuousSchedule, theta_max_target: float, gamma_max_target: float) -> ContinuousSchedule:
    if not (theta_max_target > 0 and gamma_max_target > 0):
        raise ValueError("targets must be positive")
    scale = np.array([theta_max_target / cs.theta_max, gamma_max_target / cs.gamma_max])
    knots = cs.knots * scale
    knots[-1] = [theta_max_target, gamma_max_target]
    return ContinuousSchedule(knots=knots, kind=cs.kind, mixer_sign=cs.mixer_sign)


def export_csv(rows, dest) -> None:
    """Write (instance_id, p, n, layer, theta_cum, gamma_cum, R, phi) rows.

    ``rows`` yields (instance_id, n, TrajectoryPath); R and phi use the
    annealing frame. ``dest`` is a path or an open text stream.
    """
    if hasattr(dest, "write"):
        _write_csv(rows, dest)
        return
    with open(dest, "w", newline="") as fh:
        _write_csv(rows, fh)


def _write_csv(rows, fh) -> None:
    writer = csv.writer(fh)
    writer.writerow(["instance_id", "p", "n", "layer", "theta_cum", "gamma_cum", "R", "phi"])
    for instance_id, n, traj in rows:
        r, phi = polar_coords(traj)
        for layer in range(traj.p + 1):
            writer.writerow([instance_id, traj.p, n, layer, repr(float(traj.theta_cum[layer])),
                             repr(float(traj.gamma_cum[layer])), repr(float(r[layer])),
                             repr(float(phi[layer]))])
