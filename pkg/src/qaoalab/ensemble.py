"""Ensemble orchestration, aggregate tables and the QAOA-to-QA convergence run.

Rows are persisted as JSON lines, one line per (instance, p), appended
only after every layer count of an instance has finished. A killed run
therefore loses at most the instances in flight; ``run_ensemble`` resumes
by skipping instance ids already present in the row file.

Per-instance seeds are ``SeedSequence([base_seed, n, index])`` reduced to
one 64-bit word (see :func:`instance_seed`), so results do not depend on the
worker count or on the order in which instances finish.

Percentiles use numpy's default linear interpolation between order
statistics.
"""

from __future__ import annotations

import fcntl
import json
import logging
import math
import multiprocessing
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.special import rel_entr

from .optimizer import OptimizeConfig, config_from_dict, optimize_chain, with_seed
from .problems import MAX_QUBITS, EnergyTable, energy_table, sample_qubo
from .simulator import AngleSchedule, run_qaoa
from .thermofit import FitConfig, fit_bimodal
from .trajectory import continuous_schedule, cumulative_path, rescale_continuous, rescale_schedule

logger = logging.getLogger(__name__)

WORKERS_ENV = "QAOALAB_WORKERS"
ROWS_FILE = "rows.jsonl"
FAILURES_FILE = "failures.jsonl"
LOCK_FILE = ".lock"
FAILURE_THRESHOLD = 0.05
ROW_KEYS = ("instance_id", "n", "p", "seed", "zeta", "beta_high", "beta_low", "c_high", "p_low",
            "kl", "fit_flags", "gamma_max", "theta_max", "ground_overlap", "value", "evals",
            "converged", "warm_start", "gamma", "theta")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EnsembleConfig:
    n_list: tuple
    p_list: tuple
    instances: int
    base_seed: int = 0
    optimizer: OptimizeConfig = field(default_factory=OptimizeConfig)
    fit: FitConfig = field(default_factory=FitConfig)
    zeta_list: tuple = ()
    output_dir: str = "ensemble-out"
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "n_list", tuple(int(n) for n in self.n_list))
        object.__setattr__(self, "p_list", tuple(sorted({int(p) for p in self.p_list})))
        object.__setattr__(self, "zeta_list", tuple(float(z) for z in self.zeta_list))
        if self.instances < 1:
            raise ConfigError("instances must be >= 1")
        if not self.n_list or any(n < 2 or n > MAX_QUBITS for n in self.n_list):
            raise ConfigError(f"qubit counts must lie in [2, {MAX_QUBITS}]")
        if not self.p_list or self.p_list[0] < 1:
            raise ConfigError("layer counts must be >= 1")
        if any(z <= 0 for z in self.zeta_list):
            raise ConfigError("rescale factors must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "EnsembleConfig":
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if isinstance(data.get("optimizer"), dict):
                data["optimizer"] = config_from_dict(data["optimizer"])
            if isinstance(data.get("fit"), dict):
                data["fit"] = FitConfig(**data["fit"])
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        out = asdict(self)
        out["n_list"] = list(self.n_list)
        out["p_list"] = list(self.p_list)
        out["zeta_list"] = list(self.zeta_list)
        return out


@dataclass
class EnsembleReport:
    rows: list
    aggregates: list
    failures: list
    attempted: int

    @property
    def failure_rate(self) -> float:
        return len(self.failures) / self.attempted if self.attempted else 0.0


def instance_seed(base_seed: int, n: int, index: int) -> int:
    ss = np.random.SeedSequence([int(base_seed) % 2**64, int(n), int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


def instance_id(n: int, index: int, base_seed: int) -> str:
    return f"n{n}-i{index:04d}-b{base_seed}"


def _schedule_row(t: EnergyTable, s: AngleSchedule, fit_cfg: FitConfig) -> dict:
    state = run_qaoa(t, s)
    fit = fit_bimodal(state.probabilities, t, fit_cfg)
    path = cumulative_path(s)
    return {
        "beta_high": fit.beta_high, "beta_low": fit.beta_low, "c_high": fit.c_high,
        "p_low": fit.p_low, "kl": fit.kl, "fit_flags": list(fit.flags),
        "gamma_max": path.gamma_max, "theta_max": path.theta_max,
    }


def process_instance(cfg: EnsembleConfig, n: int, index: int) -> list[dict]:
    """Generate, optimize along the warm-start chain, fit and summarize one instance."""
    seed = instance_seed(cfg.base_seed, n, index)
    iid = instance_id(n, index, cfg.base_seed)
    t = energy_table(sample_qubo(n, seed, instance_id=iid))
    opt = with_seed(cfg.optimizer, seed)
    wanted = set(cfg.p_list)
    rows = []
    for res in optimize_chain(t, cfg.p_list[-1], opt):
        p = res.schedule.p
        if p not in wanted:
            continue
        for zeta in (1.0,) + tuple(z for z in cfg.zeta_list if z != 1.0):
            sched = res.schedule if zeta == 1.0 else rescale_schedule(res.schedule, zeta)
            row = {"instance_id": iid, "n": n, "p": p, "seed": seed, "zeta": zeta}
            row.update(_schedule_row(t, sched, cfg.fit))
            if zeta == 1.0:
                overlap, value = res.ground_overlap, res.value
            else:
                state = run_qaoa(t, sched)
                overlap = float(state.probabilities[t.ground_states()].sum())
                value = float(state.probabilities @ t.raw)
            row.update({"ground_overlap": overlap, "value": value, "evals": res.evals,
                        "converged": res.converged, "warm_start": "chain" if p > 1 else "grid",
                        "gamma": [float(v) for v in sched.gamma],
                        "theta": [float(v) for v in sched.theta]})
            rows.append({k: row[k] for k in ROW_KEYS})
    return rows


def _task(args):
    cfg, n, index = args
    try:
        return n, index, process_instance(cfg, n, index), None
    except Exception as exc:  # noqa: BLE001 - partial-failure policy
        logger.exception("instance n=%d index=%d failed", n, index)
        return n, index, None, f"{type(exc).__name__}: {exc}"


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.endswith("\n"):
                rows.append(json.loads(line))
    return rows


def _truncate_partial(path: Path) -> None:
    """Drop a trailing line left incomplete by an interrupted write."""
    if not path.exists():
        return
    data = path.read_bytes()
    cut = data.rfind(b"\n") + 1
    if cut != len(data):
        with open(path, "r+b") as fh:
            fh.truncate(cut)


def _drop_incomplete(path: Path, cfg: EnsembleConfig) -> set:
    """Remove instances whose row block was cut short; return the complete ids."""
    rows = _read_jsonl(path)
    per_instance = len(cfg.p_list) * (1 + sum(1 for z in cfg.zeta_list if z != 1.0))
    counts: dict = {}
    for row in rows:
        counts[row["instance_id"]] = counts.get(row["instance_id"], 0) + 1
    complete = {iid for iid, c in counts.items() if c == per_instance}
    if len(complete) != len(counts):
        kept = "".join(_dump(r) for r in rows if r["instance_id"] in complete)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(kept)
        os.replace(tmp, path)
    return complete


def _dump(row: dict) -> str:
    return json.dumps(row, separators=(",", ":")) + "\n"


def resolve_workers(cfg_workers: int) -> int:
    env = os.environ.get(WORKERS_ENV)
    if env is None or env == "":
        return cfg_workers
    try:
        workers = int(env)
    except ValueError as exc:
        raise ConfigError(f"{WORKERS_ENV} must be an integer") from exc
    if workers < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1")
    return workers


def run_ensemble(cfg: EnsembleConfig, progress=None) -> EnsembleReport:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / LOCK_FILE, "w") as lock:
        try:
            fcntl.flock(lock, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError as exc:
            raise ConfigError(f"{out} is in use by another ensemble run") from exc
        return _run_locked(cfg, out, progress)


def _run_locked(cfg: EnsembleConfig, out: Path, progress) -> EnsembleReport:
    rows_path = out / ROWS_FILE
    cfg_path = out / "config.json"
    cfg_text = json.dumps(cfg.to_dict(), indent=1, sort_keys=True)
    if rows_path.exists() and cfg_path.exists() and cfg_path.read_text() != cfg_text:
        raise ConfigError(f"{out} holds rows from a different configuration")
    cfg_path.write_text(cfg_text)
    fail_path = out / FAILURES_FILE
    _truncate_partial(rows_path)
    _truncate_partial(fail_path)
    done = _drop_incomplete(rows_path, cfg)
    done |= {row["instance_id"] for row in _read_jsonl(fail_path)}
    tasks = [(cfg, n, i) for n in cfg.n_list for i in range(cfg.instances)
             if instance_id(n, i, cfg.base_seed) not in done]
    workers = resolve_workers(cfg.workers)
    if workers > 1 and len(tasks) > 1:
        ctx = multiprocessing.get_context("fork")
        pool = ctx.Pool(min(workers, len(tasks)))
        results = pool.imap(_task, tasks, chunksize=1)
    else:
        pool = None
        results = map(_task, tasks)
    try:
        with open(rows_path, "a") as rows_fh, open(fail_path, "a") as fail_fh:
            for n, index, rows, error in results:
                if error is None:
                    rows_fh.write("".join(_dump(r) for r in rows))
                    rows_fh.flush()
                    os.fsync(rows_fh.fileno())
                else:
                    fail_fh.write(_dump({"instance_id": instance_id(n, index, cfg.base_seed),
                                         "n": n, "index": index, "error": error}))
                    fail_fh.flush()
                if progress is not None:
                    progress(n, index, error)
    finally:
        if pool is not None:
            pool.close()
            pool.join()
    rows = _read_jsonl(rows_path)
    failures = _read_jsonl(fail_path)
    return EnsembleReport(rows=rows, aggregates=aggregate(rows), failures=failures,
                          attempted=len(cfg.n_list) * cfg.instances)


def load_rows(path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / ROWS_FILE
    return _read_jsonl(path)


AGG_FIELDS = ("beta_high", "beta_low", "p_low", "gamma_max", "theta_max", "ground_overlap", "value")


def _summary(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    q05, q25, q50, q75, q95 = np.percentile(v, [5, 25, 50, 75, 95])
    return {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if v.size > 1 else 0.0,
            "q05": float(q05), "q25": float(q25), "median": float(q50),
            "q75": float(q75), "q95": float(q95)}


def _cells(rows, zeta: float = 1.0):
    cells: dict = {}
    for row in rows:
        if row.get("zeta", 1.0) != zeta:
            continue
        cells.setdefault((row["n"], row["p"]), []).append(row)
    return dict(sorted(cells.items()))


def aggregate(rows) -> list[dict]:
    """Per (n, p) cell: count plus mean, std, quartiles and the 5-95 interval of each field."""
    out = []
    for (n, p), cell in _cells(rows).items():
        entry = {"n": n, "p": p, "count": len(cell)}
        for key in AGG_FIELDS:
            entry[key] = _summary([r[key] for r in cell])
        out.append(entry)
    return out


def _mean_ci(values, level: float = 0.95):
    v = np.asarray(values, dtype=np.float64)
    mean = float(v.mean())
    if v.size < 2:
        return mean, float("nan")
    half = float(stats.t.ppf(0.5 + level / 2, v.size - 1) * v.std(ddof=1) / math.sqrt(v.size))
    return mean, half


def _linfit(x, y) -> dict:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size < 2 or np.ptp(x) == 0:
        raise ValueError("need at least two distinct abscissae for a linear fit")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return {"slope": float(slope), "intercept": float(intercept), "r2": r2, "points": int(x.size)}


def relative_spread(values) -> float:
    """(max - min) / min of positive values; zero when they coincide."""
    v = np.asarray(values, dtype=np.float64)
    if np.any(v <= 0):
        raise ValueError("relative spread needs positive values")
    return float((v.max() - v.min()) / v.min())


def _band_on_grid(curves: dict, grid_size: int = 25) -> list[dict]:
    """Interpolate per-n (x, y) mean curves onto their common x range and compare."""
    lo = max(float(np.min(x)) for x, _ in curves.values())
    hi = min(float(np.max(x)) for x, _ in curves.values())
    if not hi > lo:
        return []
    grid = np.linspace(lo, hi, grid_size)
    out = []
    for g in grid:
        ys = {n: float(np.interp(g, x, y)) for n, (x, y) in curves.items()}
        out.append({"x": float(g), "values": {str(k): v for k, v in ys.items()},
                    "spread": relative_spread(list(ys.values()))})
    return out


def report_scaling(rows) -> dict:
    """Tables for resources, beta vs Gamma_max, beta vs p fits and the n^(3/2) collapse.

    Curve comparisons across n report ``relative_spread`` = (max - min) / min.
    """
    cells = _cells(rows)
    ns = sorted({n for n, _ in cells})
    if len(ns) < 2:
        raise ValueError("report_scaling needs rows from at least two qubit counts")

    resources = []
    for (n, p), cell in cells.items():
        g, g_ci = _mean_ci([r["gamma_max"] * math.sqrt(n) for r in cell])
        th, th_ci = _mean_ci([r["theta_max"] for r in cell])
        resources.append({"n": n, "p": p, "count": len(cell), "gamma_max_sqrt_n": g,
                          "gamma_max_sqrt_n_ci95": g_ci, "theta_max": th, "theta_max_ci95": th_ci})
    common_p = sorted(set.intersection(*({p for m, p in cells if m == n} for n in ns)))
    resource_spread = []
    for p in common_p:
        sel = [r for r in resources if r["p"] == p]
        resource_spread.append({"p": p,
                                "theta_max_spread": relative_spread([r["theta_max"] for r in sel]),
                                "gamma_max_sqrt_n_spread": relative_spread([r["gamma_max_sqrt_n"] for r in sel])})
    resource_fits = {}
    for n in ns:
        sel = [r for r in resources if r["n"] == n]
        ps = [r["p"] for r in sel]
        if len(ps) >= 2:
            resource_fits[str(n)] = {
                "theta_max": _linfit(ps, [r["theta_max"] for r in sel]),
                "gamma_max_sqrt_n": _linfit(ps, [r["gamma_max_sqrt_n"] for r in sel]),
            }

    betas = []
    scatter = []
    for (n, p), cell in cells.items():
        b = np.array([r["beta_high"] for r in cell])
        lo, hi = np.percentile(b, [5, 95])
        betas.append({"n": n, "p": p, "count": len(cell),
                      "gamma_max": float(np.mean([r["gamma_max"] for r in cell])),
                      "beta_high": float(b.mean()), "beta_high_q05": float(lo),
                      "beta_high_q95": float(hi)})
        scatter.extend({"n": n, "p": p, "gamma_max": r["gamma_max"], "beta_high": r["beta_high"]}
                       for r in cell)
    beta_fits = {}
    for n in ns:
        sel = [r for r in betas if r["n"] == n]
        pts = [r for r in scatter if r["n"] == n]
        if len({r["p"] for r in sel}) >= 2:
            beta_fits[str(n)] = {
                "vs_p": _linfit([r["p"] for r in sel], [r["beta_high"] for r in sel]),
                "vs_gamma_max": _linfit([r["gamma_max"] for r in pts], [r["beta_high"] for r in pts]),
            }

    collapse = [{"n": r["n"], "p": r["p"], "gamma_max": r["gamma_max"],
                 "beta_high_n32": r["beta_high"] * r["n"] ** 1.5} for r in betas]
    curves = {}
    for n in ns:
        sel = sorted((r for r in collapse if r["n"] == n), key=lambda r: r["gamma_max"])
        curves[n] = (np.array([r["gamma_max"] for r in sel]), np.array([r["beta_high_n32"] for r in sel]))
    collapse_band = _band_on_grid(curves)

    return {"resources": resources, "resource_spread": resource_spread, "resource_fits": resource_fits,
            "betas": betas, "beta_scatter": scatter, "beta_fits": beta_fits,
            "collapse": collapse, "collapse_band": collapse_band}


def report_betas(rows) -> dict:
    """Aggregates per (n, p) plus the least-squares line of mean beta_high against p per n."""
    agg = aggregate(rows)
    fits = {}
    for n in sorted({a["n"] for a in agg}):
        sel = [a for a in agg if a["n"] == n]
        if len(sel) >= 2:
            fits[str(n)] = _linfit([a["p"] for a in sel], [a["beta_high"]["mean"] for a in sel])
    return {"aggregates": agg, "beta_high_vs_p": fits}


def kl_divergence(p, q, floor: float = 1e-300) -> float:
    """Plain KL(p || q) over bitstrings, with q floored to keep the log finite."""
    q = np.maximum(np.asarray(q, dtype=np.float64), floor)
    return float(np.sum(rel_entr(np.asarray(p, dtype=np.float64), q)))


def run_convergence_experiment(t: EnergyTable, schedules: dict, m: int, k_list, steps: int | None = None,
                               fit_cfg: FitConfig = FitConfig(), qa_from: int | None = None,
                               integrator: str = "rk4") -> dict:
    """Rescale k-layer optima onto the m-layer resources and compare with continuous QA.

    ``schedules`` maps layer counts to optimized AngleSchedules. The QA
    reference runs the continuous schedule through the ``qa_from``-layer path
    (default: the largest k), rescaled to the m-layer resources.
    """
    from .annealer import anneal

    k_list = sorted(int(k) for k in k_list)
    missing = [p for p in [m, *k_list] if p not in schedules]
    if missing:
        raise KeyError(f"missing optimized schedules for p = {missing}")
    base = cumulative_path(schedules[m])
    native_state = run_qaoa(t, schedules[m])
    native = fit_bimodal(native_state.probabilities, t, fit_cfg)

    src = cumulative_path(schedules[qa_from if qa_from is not None else k_list[-1]])
    cs = rescale_continuous(continuous_schedule(src), base.theta_max, base.gamma_max)
    qa_run = anneal(t, cs, steps, integrator)
    qa_probs = qa_run.final_state.probabilities
    qa_fit = fit_bimodal(qa_probs, t, fit_cfg)

    rescaled = []
    for k in k_list:
        path = cumulative_path(schedules[k])
        zeta_gamma = path.gamma_max / base.gamma_max
        zeta_theta = path.theta_max / base.theta_max
        sched = rescale_schedule(schedules[k], zeta_gamma, zeta_theta)
        probs = run_qaoa(t, sched).probabilities
        fit = fit_bimodal(probs, t, fit_cfg)
        rescaled.append({"k": k, "zeta_gamma": zeta_gamma, "zeta_theta": zeta_theta,
                         "fit": fit.as_row(), "kl_qa": kl_divergence(qa_probs, probs)})
    return {"m": m, "theta_max": base.theta_max, "gamma_max": base.gamma_max,
            "native": native.as_row(), "qa": {"fit": qa_fit.as_row(), "steps": qa_run.steps,
                                              "final_norm": qa_run.final_norm},
            "rescaled": rescaled}


def sample_bitstrings(source, shots: int, seed: int, n: int | None = None) -> list[str]:
    """I.i.d. computational-basis draws from a StateVector or a probability vector.

    Bitstrings are printed with qubit n-1 first, so ``int(s, 2)`` is the
    basis index.
    """
    if shots < 1:
        raise ValueError("shots must be >= 1")
    if hasattr(source, "probabilities"):
        probs = source.probabilities
        n = source.n
    else:
        probs = np.asarray(source, dtype=np.float64)
        if n is None:
            n = int(round(math.log2(probs.size)))
    if probs.size != 2**n:
        raise ValueError("probability vector length must be 2**n")
    probs = probs / probs.sum()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed) % 2**64)))
    draws = rng.choice(probs.size, size=shots, p=probs)
    return [format(int(z), f"0{n}b") for z in draws]
