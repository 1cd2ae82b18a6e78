"""Random QUBO ensemble, Ising mapping and exhaustive energy spectra.

Conventions used throughout the package:

* bitstring index ``z`` stores qubit 0 in the least-significant bit;
* bit value 1 corresponds to spin ``+1`` (``z_n = 2 x_n - 1``);
* Ising couplings are summed once per unordered pair ``n < m``.

Random instances are drawn with numpy's ``PCG64`` bit generator seeded
through ``SeedSequence`` and the ziggurat normal transform of
``Generator.standard_normal``. Both are covered by numpy's stream
compatibility policy, so ``(n, seed)`` fixes ``Q`` bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

MIN_QUBITS = 2
MAX_QUBITS = 24

_U64 = 2**64


class DegenerateSpectrumError(ValueError):
    """Raised when an instance has a flat spectrum and cannot be normalized."""


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed) % _U64)))


@dataclass(frozen=True)
class QuboInstance:
    n: int
    q: np.ndarray = field(repr=False)
    seed: int
    instance_id: str

    def __post_init__(self):
        q = np.array(self.q, dtype=np.float64)
        if q.shape != (self.n, self.n):
            raise ValueError(f"q must be {self.n}x{self.n}, got {q.shape}")
        if not np.array_equal(q, q.T):
            raise ValueError("q must be symmetric")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    def to_json(self) -> dict:
        iu = np.triu_indices(self.n)
        return {
            "n": self.n,
            "seed": self.seed,
            "q": [float(v) for v in self.q[iu]],
            "instance_id": self.instance_id,
        }

    @classmethod
    def from_json(cls, data: dict) -> "QuboInstance":
        n = int(data["n"])
        upper = np.asarray(data["q"], dtype=np.float64)
        if upper.size != n * (n + 1) // 2:
            raise ValueError("q must hold the row-major upper triangle (diagonal included)")
        q = np.zeros((n, n))
        q[np.triu_indices(n)] = upper
        q = q + np.triu(q, 1).T
        return cls(n=n, q=q, seed=int(data["seed"]), instance_id=str(data["instance_id"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "QuboInstance":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class IsingProblem:
    n: int
    j: np.ndarray = field(repr=False)
    h: np.ndarray = field(repr=False)

    def __post_init__(self):
        j = np.array(self.j, dtype=np.float64)
        h = np.array(self.h, dtype=np.float64)
        if j.shape != (self.n, self.n) or h.shape != (self.n,):
            raise ValueError("inconsistent Ising dimensions")
        if not np.array_equal(j, j.T) or np.any(np.diag(j) != 0):
            raise ValueError("j must be symmetric with zero diagonal")
        j.setflags(write=False)
        h.setflags(write=False)
        object.__setattr__(self, "j", j)
        object.__setattr__(self, "h", h)


@dataclass(frozen=True)
class EnergyTable:
    """Full diagonal of the cost Hamiltonian plus its [0, 1] rescaling."""

    n: int
    raw: np.ndarray = field(repr=False)
    e_min: float
    e_max: float
    normalized: np.ndarray = field(repr=False)

    @classmethod
    def from_raw(cls, raw) -> "EnergyTable":
        raw = np.array(raw, dtype=np.float64)
        n = int(raw.size).bit_length() - 1
        if raw.size != 1 << n:
            raise ValueError("energy table length must be a power of two")
        e_min, e_max = float(raw.min()), float(raw.max())
        if not e_max > e_min:
            raise DegenerateSpectrumError("flat spectrum: e_max == e_min")
        normalized = (raw - e_min) / (e_max - e_min)
        # exact endpoints, immune to rounding in the division
        normalized[raw == e_min] = 0.0
        normalized[raw == e_max] = 1.0
        raw.setflags(write=False)
        normalized.setflags(write=False)
        return cls(n=n, raw=raw, e_min=e_min, e_max=e_max, normalized=normalized)

    @property
    def width(self) -> float:
        return self.e_max - self.e_min

    def ground_states(self, atol: float = 1e-12) -> np.ndarray:
        return np.flatnonzero(self.raw <= self.e_min + atol * max(1.0, self.width))


def sample_qubo(n: int, seed: int, zero_diagonal: bool = True, instance_id: str | None = None) -> QuboInstance:
    """Draw a fully connected QUBO with i.i.d. N(0, 1) couplings.

    Upper-triangle entries are drawn row by row (``i < j``), then mirrored.
    With ``zero_diagonal=False`` the diagonal is drawn after them from the
    same stream.
    """
    if not MIN_QUBITS <= n <= MAX_QUBITS:
        raise ValueError(f"n must lie in [{MIN_QUBITS}, {MAX_QUBITS}], got {n}")
    rng = _rng(seed)
    iu = np.triu_indices(n, k=1)
    draws = rng.standard_normal(iu[0].size)
    if np.any(draws == 0.0):
        raise RuntimeError("sampled an exactly zero coupling")
    q = np.zeros((n, n))
    q[iu] = draws
    q = q + q.T
    if not zero_diagonal:
        q[np.diag_indices(n)] = rng.standard_normal(n)
    if instance_id is None:
        instance_id = f"qubo-n{n}-s{int(seed) % _U64}"
    return QuboInstance(n=n, q=q, seed=int(seed), instance_id=instance_id)


def qubo_energy(q: QuboInstance, x) -> float:
    x = np.asarray(x)
    if x.shape != (q.n,):
        raise ValueError(f"expected {q.n} bits, got shape {x.shape}")
    if not np.all((x == 0) | (x == 1)):
        raise ValueError("bits must be 0 or 1")
    x = x.astype(np.float64)
    return float(2.0 * x @ q.q @ x)


def to_ising(q: QuboInstance) -> IsingProblem:
    """Map ``2 x^T Q x`` onto couplings ``J = offdiag(Q)`` and fields ``h_n = sum_m Q_nm``.

    With this map ``qubo_energy(x) - ising_energy(2x - 1)`` is the same
    constant for every ``x``; the constant is irrelevant for all
    normalized quantities.
    """
    j = q.q.copy()
    j[np.diag_indices(q.n)] = 0.0
    h = q.q.sum(axis=1)
    return IsingProblem(n=q.n, j=j, h=h)


def ising_energy(p: IsingProblem, z) -> float:
    z = np.asarray(z)
    if z.shape != (p.n,):
        raise ValueError(f"expected {p.n} spins, got shape {z.shape}")
    if not np.all(np.abs(z) == 1):
        raise ValueError("spins must be +1 or -1")
    z = z.astype(np.float64)
    return float(0.5 * z @ p.j @ z + p.h @ z)


@numba.njit(cache=True)
def _gray_code_energies(j, h):
    n = h.size
    dim = 1 << n
    out = np.empty(dim)
    spins = -np.ones(n)
    # local[k] = h_k + sum_m J_km s_m
    local = h.copy()
    for k in range(n):
        for m in range(n):
            local[k] -= j[k, m]
    energy = 0.0
    for k in range(n):
        energy -= h[k]
        for m in range(k + 1, n):
            energy += j[k, m]
    z = 0
    out[0] = energy
    for step in range(1, dim):
        k = 0
        while not (step >> k) & 1:
            k += 1
        s = spins[k]
        energy -= 2.0 * s * local[k]
        spins[k] = -s
        for m in range(n):
            local[m] -= 2.0 * s * j[m, k]
        z ^= 1 << k
        out[z] = energy
    return out


def enumerate_energies(p: IsingProblem) -> EnergyTable:
    """Exhaustive spectrum via a Gray-code walk, O(n 2^n)."""
    if p.n > MAX_QUBITS:
        raise ValueError(f"n={p.n} exceeds exhaustive enumeration limit {MAX_QUBITS}")
    raw = _gray_code_energies(np.ascontiguousarray(p.j), np.ascontiguousarray(p.h))
    return EnergyTable.from_raw(raw)


def energy_table(q: QuboInstance) -> EnergyTable:
    return enumerate_energies(to_ising(q))
