"""Exact statevector simulation of p-layer QAOA circuits.

Layer ``i`` applies ``exp(-i gamma_i H)`` followed by
``exp(-i theta_i/2 sum_n X_n)``; layer 1 acts first on ``|+>^n``.
Cost phases use the raw (unnormalized) energies; normalized energies are
only used when reporting distributions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .problems import MAX_QUBITS, EnergyTable


@dataclass
class StateVector:
    n: int
    amp: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.amp = np.ascontiguousarray(self.amp, dtype=np.complex128)
        if self.amp.shape != (1 << self.n,):
            raise ValueError(f"expected {1 << self.n} amplitudes, got {self.amp.shape}")

    @property
    def probabilities(self) -> np.ndarray:
        return self.amp.real**2 + self.amp.imag**2

    def norm(self) -> float:
        return float(np.sqrt(self.probabilities.sum()))

    def copy(self) -> "StateVector":
        return StateVector(self.n, self.amp.copy())

    def fidelity(self, other: "StateVector") -> float:
        """|<self|other>|^2, insensitive to global phase."""
        return float(abs(np.vdot(self.amp, other.amp)) ** 2)

    def dump_probabilities(self, path) -> None:
        """Debug dump of |amp|^2 as little-endian float64."""
        self.probabilities.astype("<f8").tofile(path)


@dataclass(frozen=True)
class AngleSchedule:
    gamma: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        gamma = np.array(self.gamma, dtype=np.float64).reshape(-1)
        theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        if gamma.size < 1 or gamma.size != theta.size:
            raise ValueError("gamma and theta must have the same length p >= 1")
        if not (np.all(np.isfinite(gamma)) and np.all(np.isfinite(theta))):
            raise ValueError("angles must be finite")
        gamma.setflags(write=False)
        theta.setflags(write=False)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "theta", theta)

    @property
    def p(self) -> int:
        return self.gamma.size

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.gamma, self.theta])

    @classmethod
    def from_vector(cls, x) -> "AngleSchedule":
        x = np.asarray(x, dtype=np.float64)
        p = x.size // 2
        return cls(x[:p], x[p:])

    def reversed(self) -> "AngleSchedule":
        return AngleSchedule(self.gamma[::-1], self.theta[::-1])

    def __eq__(self, other):
        if not isinstance(other, AngleSchedule):
            return NotImplemented
        return np.array_equal(self.gamma, other.gamma) and np.array_equal(self.theta, other.theta)

    def __hash__(self):
        return hash((self.gamma.tobytes(), self.theta.tobytes()))


def _check(s: StateVector, t: EnergyTable):
    if s.n != t.n:
        raise ValueError(f"state has {s.n} qubits but energy table has {t.n}")


def plus_state(n: int) -> StateVector:
    if not 1 <= n <= MAX_QUBITS:
        raise ValueError(f"n must lie in [1, {MAX_QUBITS}]")
    dim = 1 << n
    return StateVector(n, np.full(dim, 1.0 / np.sqrt(dim), dtype=np.complex128))


def apply_cost_phase(s: StateVector, t: EnergyTable, gamma: float) -> StateVector:
    _check(s, t)
    out = s.copy()
    _kernels.phase(out.amp, t.raw, float(gamma))
    return out


def apply_mixer(s: StateVector, theta: float) -> StateVector:
    out = s.copy()
    _kernels.mixer(out.amp, s.n, float(theta))
    return out


def run_qaoa(t: EnergyTable, sched: AngleSchedule) -> StateVector:
    amp = _kernels.qaoa_state(t.raw, t.n, sched.gamma, sched.theta)
    return StateVector(t.n, amp)


def energy_expectation(s: StateVector, t: EnergyTable) -> float:
    _check(s, t)
    return float(_kernels.expectation(s.amp, t.raw))


def qaoa_expectation(t: EnergyTable, sched: AngleSchedule) -> float:
    return energy_expectation(run_qaoa(t, sched), t)


def ground_overlap(s: StateVector, t: EnergyTable) -> float:
    _check(s, t)
    return float(s.probabilities[t.ground_states()].sum())


@dataclass(frozen=True)
class Distribution:
    """Probabilities over normalized energies.

    Per-bitstring unless built with ``aggregate=True``, in which case equal
    energies are merged and ``multiplicity`` counts the merged states.
    """

    energies: np.ndarray
    probs: np.ndarray
    multiplicity: np.ndarray

    def __iter__(self):
        return iter(zip(self.energies.tolist(), self.probs.tolist()))

    def __len__(self):
        return self.energies.size


def output_distribution(s: StateVector, t: EnergyTable, aggregate: bool = False, decimals: int = 12) -> Distribution:
    _check(s, t)
    probs = s.probabilities
    if not aggregate:
        return Distribution(t.normalized.copy(), probs, np.ones(probs.size, dtype=np.int64))
    keys = np.round(t.normalized, decimals)
    levels, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    summed = np.zeros(levels.size)
    np.add.at(summed, inverse, probs)
    return Distribution(levels, summed, counts)


def cumulative_distribution(dist: Distribution):
    """Step function C(E) = P(E' < E) as (sorted energies, cumulative values).

    ``values[k]`` is the probability of all energies up to and including
    ``energies[k]``, so evaluating just above ``energies[k]`` gives it.
    """
    order = np.argsort(dist.energies, kind="stable")
    energies = dist.energies[order]
    values = np.minimum(np.cumsum(dist.probs[order]), 1.0)
    return energies, values


def evaluate_cumulative(dist: Distribution, e) -> np.ndarray:
    """C(E' < e) for scalar or array ``e``."""
    energies, values = cumulative_distribution(dist)
    idx = np.searchsorted(energies, np.asarray(e, dtype=np.float64), side="left")
    padded = np.concatenate([[0.0], values])
    return padded[idx]
