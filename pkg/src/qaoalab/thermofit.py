"""Bimodal pseudo-Boltzmann fits of output distributions.

The model over normalized energies ``E`` in [0, 1] is

    B(E) = (c_high exp(-beta_high E) + c_low exp(-beta_low E)) / Z_B

with ``c_high + c_low = 1`` and ``beta_high >= beta_low >= 0``. It is fitted
by minimizing a divergence weighted by ``w(E) = weight_slope * E + weight_offset``,
which emphasizes the high-energy tail.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize
from scipy.special import kl_div, rel_entr

from .problems import EnergyTable

logger = logging.getLogger(__name__)

SINGLE_MODE_P_LOW = 1e-3


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitConfig:
    """Fit settings.

    ``divergence`` selects the objective:

    * ``"generalized"`` (default): ``sum w [B log(B/P) - B + P]``. Each term is
      non-negative, so the minimum sits at ``B = P`` whatever the weights.
      With constant unit weights it equals the plain KL divergence.
    * ``"literal"``: ``sum w B log(B/P)``. Under non-constant weights its
      minimizer is biased towards colder distributions.

    ``exclude_below_floor`` drops states with ``P < prob_floor`` from the sum
    instead of clamping them.
    """

    weight_slope: float = 100.0
    weight_offset: float = 1.0
    prob_floor: float = 1e-300
    max_iters: int = 2000
    n_starts: int = 8
    seed: int = 0
    divergence: str = "generalized"
    exclude_below_floor: bool = False
    beta_max: float = 1e4

    def __post_init__(self):
        if min(self.weight_offset, self.weight_slope + self.weight_offset) <= 0:
            raise ValueError("weight function must be positive on [0, 1]")
        if self.divergence not in ("generalized", "literal"):
            raise ValueError(f"unknown divergence {self.divergence!r}")
        if self.n_starts < 1 or self.max_iters < 1:
            raise ValueError("n_starts and max_iters must be positive")

    def weights(self, e: np.ndarray) -> np.ndarray:
        return self.weight_slope * e + self.weight_offset


@dataclass(frozen=True)
class BoltzmannFit:
    beta_high: float
    beta_low: float
    c_high: float
    c_low: float
    z_b: float = float("nan")
    p_high: float = float("nan")
    p_low: float = float("nan")
    kl: float = float("nan")
    flags: tuple = field(default=())

    @property
    def single_mode(self) -> bool:
        return "single-mode" in self.flags

    def as_row(self) -> dict:
        return {
            "beta_high": self.beta_high,
            "beta_low": self.beta_low,
            "c_high": self.c_high,
            "p_low": self.p_low,
            "kl": self.kl,
            "flags": list(self.flags),
        }


def _components(beta_high, beta_low, c_high, e):
    hot = (1.0 - c_high) * np.exp(-beta_low * e)
    cold = c_high * np.exp(-beta_high * e)
    return cold, hot


def _check_params(fit: BoltzmannFit):
    vals = (fit.beta_high, fit.beta_low, fit.c_high, fit.c_low)
    if not all(math.isfinite(v) for v in vals):
        raise ValueError("non-finite fit parameters")
    if fit.c_high < 0 or fit.c_low < 0 or fit.c_high + fit.c_low <= 0:
        raise ValueError("mixing weights must be non-negative")


def bimodal_pdf(fit: BoltzmannFit, t: EnergyTable) -> np.ndarray:
    """Per-bitstring model probabilities; ``Z_B`` is the exhaustive state sum."""
    _check_params(fit)
    e = t.normalized
    u = fit.c_high * np.exp(-fit.beta_high * e) + fit.c_low * np.exp(-fit.beta_low * e)
    return u / u.sum()


def mode_weights(fit: BoltzmannFit, t: EnergyTable) -> tuple[float, float]:
    _check_params(fit)
    e = t.normalized
    cold = fit.c_high * np.exp(-fit.beta_high * e).sum()
    hot = fit.c_low * np.exp(-fit.beta_low * e).sum()
    p_high = float(cold / (cold + hot))
    return p_high, 1.0 - p_high


def weighted_kl(fit: BoltzmannFit, p_obs, t: EnergyTable, cfg: FitConfig = FitConfig()) -> float:
    b = bimodal_pdf(fit, t)
    return _divergence(b, np.asarray(p_obs, dtype=np.float64), cfg.weights(t.normalized), cfg)


def _divergence(b, p, w, cfg: FitConfig) -> float:
    if cfg.exclude_below_floor:
        keep = p >= cfg.prob_floor
        b, p, w = b[keep], p[keep], w[keep]
    else:
        p = np.maximum(p, cfg.prob_floor)
    terms = kl_div(b, p) if cfg.divergence == "generalized" else rel_entr(b, p)
    return float(np.sum(w * terms))


class _Objective:
    """Divergence and gradient in (beta_low, delta, c_high) coordinates."""

    def __init__(self, p_obs, t: EnergyTable, cfg: FitConfig):
        e = t.normalized
        p = np.asarray(p_obs, dtype=np.float64)
        w = cfg.weights(e)
        if cfg.exclude_below_floor:
            self.mask = p >= cfg.prob_floor
        else:
            self.mask = np.ones(p.size, dtype=bool)
        self.e = e
        self.w = w
        self.logp = np.log(np.maximum(p, cfg.prob_floor))
        self.p = np.maximum(p, cfg.prob_floor)
        self.generalized = cfg.divergence == "generalized"
        self.evals = 0

    def __call__(self, x):
        self.evals += 1
        beta_low, delta, c = x
        beta_high = beta_low + delta
        e = self.e
        eh = np.exp(-beta_high * e)
        el = np.exp(-beta_low * e)
        u = c * eh + (1.0 - c) * el
        z = u.sum()
        b = u / z
        m = self.mask
        with np.errstate(divide="ignore"):
            logb = np.log(b)
        log_ratio = np.where(b > 0, logb - self.logp, 0.0)
        terms = b * log_ratio
        if self.generalized:
            terms = terms - b + self.p
            dterm = log_ratio
        else:
            dterm = log_ratio + 1.0
        value = float(np.sum((self.w * terms)[m]))
        # dD/du_z through B = u / Z
        g_b = np.where(m, self.w * dterm, 0.0)
        g_u = (g_b - np.dot(g_b, b)) / z
        du_dbh = -c * e * eh
        du_dbl = -(1.0 - c) * e * el
        du_dc = eh - el
        grad = np.array([
            np.dot(g_u, du_dbh + du_dbl),
            np.dot(g_u, du_dbh),
            np.dot(g_u, du_dc),
        ])
        return value, grad


def _segment_slope(e, logp):
    if e.size < 2 or np.ptp(e) == 0:
        return 0.0
    return float(-np.polyfit(e, logp, 1)[0])


def initial_guesses(p_obs, t: EnergyTable, cfg: FitConfig) -> list[np.ndarray]:
    """Deterministic starts from two-piece log-linear regression, then random ones.

    States are split at the normalized energy below which a fraction of the
    observed probability lies; the head slope seeds beta_high, the tail
    slope beta_low, and the head mass seeds c_high.
    """
    e = t.normalized
    p = np.asarray(p_obs, dtype=np.float64)
    support = p > max(cfg.prob_floor, 1e-300)
    es, logp = e[support], np.log(p[support])
    overall = max(_segment_slope(es, logp), 0.0)
    starts = [np.array([overall, 0.0, 0.5])]
    order = np.argsort(e)
    cum = np.cumsum(p[order])
    for mass in (0.5, 0.8, 0.95):
        cut = e[order][min(np.searchsorted(cum, mass), e.size - 1)]
        head = support & (e <= cut)
        tail = support & (e > cut)
        bh = max(_segment_slope(e[head], np.log(p[head])), 0.0)
        bl = max(_segment_slope(e[tail], np.log(p[tail])), 0.0)
        bh, bl = max(bh, bl), min(bh, bl)
        starts.append(np.array([bl, bh - bl, float(np.clip(mass, 0.05, 0.99))]))
    rng = np.random.default_rng(cfg.seed)
    while len(starts) < cfg.n_starts:
        base = starts[1 + len(starts) % 3]
        scale = np.exp(rng.normal(0.0, 0.5, size=2))
        starts.append(np.array([
            base[0] * scale[0],
            (base[1] + 0.1 * overall) * scale[1],
            float(np.clip(base[2] + rng.normal(0.0, 0.2), 0.02, 0.98)),
        ]))
    return starts[: max(cfg.n_starts, 1)]


def _finish(x, value, t: EnergyTable, extra_flags=()) -> BoltzmannFit:
    beta_low, delta, c = (float(v) for v in x)
    beta_high = beta_low + delta
    flags = list(extra_flags)
    if delta <= 1e-9 * max(1.0, beta_high):
        # identical modes: the weight split is a free gauge
        c, beta_low = 1.0, beta_high
        flags.append("degenerate")
    elif c <= 0.0:
        # only the hot component survives; relabel it as the single mode
        c, beta_high = 1.0, beta_low
        flags.append("degenerate")
    e = t.normalized
    cold, hot = _components(beta_high, beta_low, c, e)
    z_b = float(cold.sum() + hot.sum())
    p_high = float(cold.sum() / z_b)
    p_low = 1.0 - p_high
    if p_low < SINGLE_MODE_P_LOW:
        flags.append("single-mode")
    return BoltzmannFit(
        beta_high=beta_high, beta_low=beta_low, c_high=c, c_low=1.0 - c,
        z_b=z_b, p_high=p_high, p_low=p_low, kl=float(value), flags=tuple(flags),
    )


def fit_bimodal(p_obs, t: EnergyTable, cfg: FitConfig = FitConfig()) -> BoltzmannFit:
    """Multi-start bounded quasi-Newton fit with a Nelder-Mead fallback.

    Ties between starts are broken by lower divergence, then lower beta_low.
    """
    p = np.asarray(p_obs, dtype=np.float64)
    if p.shape != t.normalized.shape:
        raise ValueError("p_obs must have one entry per bitstring")
    if abs(p.sum() - 1.0) > 1e-8 or np.any(p < 0):
        raise ValueError("p_obs must be a probability vector")
    if np.count_nonzero(p > cfg.prob_floor) < 2:
        raise ValueError("distribution is supported on a single state")
    obj = _Objective(p, t, cfg)
    bounds = [(0.0, cfg.beta_max), (0.0, cfg.beta_max), (0.0, 1.0)]
    candidates = []
    failures = []
    for x0 in initial_guesses(p, t, cfg):
        x0 = np.clip(x0, [b[0] for b in bounds], [b[1] for b in bounds])
        try:
            res = minimize(obj, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                           options={"maxiter": cfg.max_iters, "ftol": 1e-15, "gtol": 1e-12})
            x, fun = res.x, float(res.fun)
            if not (res.success and np.isfinite(fun)):
                nm = minimize(lambda y: obj(np.clip(y, [0, 0, 0], [cfg.beta_max, cfg.beta_max, 1]))[0],
                              x, method="Nelder-Mead",
                              options={"maxiter": cfg.max_iters, "xatol": 1e-10, "fatol": 1e-15})
                x = np.clip(nm.x, [0, 0, 0], [cfg.beta_max, cfg.beta_max, 1])
                fun = float(obj(x)[0])
        except (FloatingPointError, ValueError) as exc:
            failures.append(repr(exc))
            continue
        if np.all(np.isfinite(x)) and np.isfinite(fun):
            candidates.append((fun, float(x[0]), x))
        else:
            failures.append(f"non-finite result from start {x0}")
    if not candidates:
        raise FitError("all fit starts failed: " + "; ".join(failures))
    fun, _, x = min(candidates, key=lambda c: (c[0], c[1]))
    return _finish(x, fun, t)


def single_boltzmann(beta: float) -> BoltzmannFit:
    return BoltzmannFit(beta_high=beta, beta_low=beta, c_high=1.0, c_low=0.0)


def with_weights(fit: BoltzmannFit, t: EnergyTable) -> BoltzmannFit:
    """Fill in ``z_b``, ``p_high`` and ``p_low`` for hand-built parameter sets."""
    e = t.normalized
    cold = fit.c_high * np.exp(-fit.beta_high * e).sum()
    hot = fit.c_low * np.exp(-fit.beta_low * e).sum()
    z = float(cold + hot)
    return replace(fit, z_b=z, p_high=float(cold / z), p_low=float(hot / z))
