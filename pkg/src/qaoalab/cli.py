"""Command-line entry point: ``qaoalab <subcommand>``.

Exit codes: 0 on success, 1 when more than 5% of ensemble instances fail,
2 on configuration or input errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import ensemble
from .annealer import StepSizeError, anneal
from .optimizer import OptimizeConfig, optimize_chain
from .problems import QuboInstance, energy_table, sample_qubo
from .simulator import AngleSchedule, run_qaoa
from .thermofit import fit_bimodal
from .trajectory import (ContinuousSchedule, continuous_schedule, cumulative_path, export_csv,
                         fit_circle)

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=1)
    sys.stdout.write("\n")


def _load_json(path) -> dict:
    return json.loads(Path(path).read_text())


def _instance_from(data: dict) -> QuboInstance:
    if "instance" not in data:
        raise ValueError("file does not embed its QUBO instance")
    return QuboInstance.from_json(data["instance"])


def cmd_gen(args) -> int:
    q = sample_qubo(args.n, args.seed)
    if args.out:
        q.save(args.out)
    else:
        _emit(q.to_json())
    return EXIT_OK


def cmd_optimize(args) -> int:
    q = QuboInstance.load(args.instance)
    t = energy_table(q)
    cfg = OptimizeConfig(restarts=args.restarts, seed=args.seed)
    for res in optimize_chain(t, args.p, cfg):
        pass
    out = res.to_json(q.instance_id, args.seed)
    out["instance"] = q.to_json()
    _emit(out)
    return EXIT_OK


def cmd_fit(args) -> int:
    data = _load_json(args.result)
    t = energy_table(_instance_from(data))
    sched = AngleSchedule(data["gamma"], data["theta"])
    fit = fit_bimodal(run_qaoa(t, sched).probabilities, t)
    _emit({"instance_id": data.get("instance_id", ""), "p": sched.p, **fit.as_row()})
    return EXIT_OK


def _iter_schedules(paths):
    """Yield (instance_id, n, AngleSchedule) from result JSON files or row files."""
    for path in paths:
        path = Path(path)
        if path.is_dir() or path.suffix == ".jsonl":
            for row in ensemble.load_rows(path):
                if row.get("zeta", 1.0) == 1.0:
                    yield row["instance_id"], row["n"], AngleSchedule(row["gamma"], row["theta"])
        else:
            data = _load_json(path)
            n = data["instance"]["n"] if "instance" in data else None
            yield data.get("instance_id", path.stem), n, AngleSchedule(data["gamma"], data["theta"])


def cmd_trajectory(args) -> int:
    items = [(iid, n, cumulative_path(s)) for iid, n, s in _iter_schedules(args.results)]
    if not items:
        raise ValueError("no schedules found")
    if args.fit_circle:
        by_p: dict = {}
        for _, n, path in items:
            by_p.setdefault(path.p, []).append(path)
        out = []
        for p, paths in sorted(by_p.items()):
            if p < 5:
                continue
            fit = fit_circle(paths)
            out.append({"p": p, "paths": len(paths), "epsilon": fit.epsilon,
                        "rms_residual": fit.rms_residual, "points": fit.points})
        _emit(out)
    else:
        export_csv(items, sys.stdout)
    return EXIT_OK


def cmd_anneal(args) -> int:
    data = _load_json(args.schedule)
    t = energy_table(_instance_from(data))
    if "knots" in data:
        cs = ContinuousSchedule.from_json(data)
    else:
        cs = continuous_schedule(cumulative_path(AngleSchedule(data["gamma"], data["theta"])))
    run = anneal(t, cs, args.steps, args.integrator)
    fit = fit_bimodal(run.final_state.probabilities, t)
    out = run.manifest(data.get("instance_id", ""), str(args.schedule))
    out["fit"] = fit.as_row()
    _emit(out)
    return EXIT_OK


def cmd_ensemble(args) -> int:
    cfg = ensemble.EnsembleConfig.from_dict(_load_json(args.config))
    ensemble.resolve_workers(cfg.workers)
    report = ensemble.run_ensemble(cfg)
    _emit({"rows": len(report.rows), "failures": len(report.failures), "attempted": report.attempted,
           "output_dir": cfg.output_dir})
    return EXIT_PARTIAL if report.failure_rate > ensemble.FAILURE_THRESHOLD else EXIT_OK


def _convergence_report(rows, m: int = 5) -> dict:
    by_instance: dict = {}
    for row in rows:
        if row.get("zeta", 1.0) == 1.0:
            by_instance.setdefault(row["instance_id"], {})[row["p"]] = row
    for iid, per_p in by_instance.items():
        ks = [k for k in (5, 10, 20) if k in per_p and k >= m]
        if len(ks) < 2:
            ks = [k for k in sorted(per_p) if k >= m]
        if m in per_p and len(ks) >= 2:
            first = per_p[m]
            t = energy_table(sample_qubo(first["n"], first["seed"], instance_id=iid))
            schedules = {p: AngleSchedule(r["gamma"], r["theta"]) for p, r in per_p.items()}
            out = ensemble.run_convergence_experiment(t, schedules, m, ks)
            out["instance_id"] = iid
            return out
    raise ValueError(f"no instance has p = {m} and at least two larger layer counts")


def cmd_report(args) -> int:
    rows = ensemble.load_rows(args.rows)
    if not rows:
        raise ValueError("no rows found")
    if args.kind == "betas":
        _emit(ensemble.report_betas(rows))
    elif args.kind == "resources":
        rep = ensemble.report_scaling(rows)
        _emit({k: rep[k] for k in ("resources", "resource_spread", "resource_fits")})
    elif args.kind == "collapse":
        rep = ensemble.report_scaling(rows)
        _emit({k: rep[k] for k in ("betas", "beta_fits", "collapse", "collapse_band")})
    else:
        _emit(_convergence_report(rows))
    return EXIT_OK


def cmd_sample(args) -> int:
    data = _load_json(args.result)
    t = energy_table(_instance_from(data))
    state = run_qaoa(t, AngleSchedule(data["gamma"], data["theta"]))
    for bits in ensemble.sample_bitstrings(state, args.shots, args.seed):
        sys.stdout.write(bits + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qaoalab", description="QAOA thermalization lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="sample a random QUBO instance")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("optimize", help="optimize angles up to p layers (warm-start chain)")
    p.add_argument("--instance", required=True)
    p.add_argument("--p", type=int, required=True)
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("fit", help="bimodal Boltzmann fit of an optimized circuit's output")
    p.add_argument("--result", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("trajectory", help="integrated-angle paths as CSV, or circle-law fits")
    p.add_argument("--results", nargs="+", required=True)
    p.add_argument("--fit-circle", action="store_true")
    p.set_defaults(func=cmd_trajectory)

    p = sub.add_parser("anneal", help="continuous annealing along a schedule")
    p.add_argument("--schedule", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--integrator", choices=("rk4", "trotter"), default="rk4")
    p.set_defaults(func=cmd_anneal)

    p = sub.add_parser("ensemble", help="run an ensemble from a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("report", help="aggregate tables from ensemble rows")
    p.add_argument("--rows", required=True)
    p.add_argument("--kind", choices=("betas", "resources", "collapse", "convergence"), required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sample", help="draw bitstrings from an optimized circuit")
    p.add_argument("--result", required=True)
    p.add_argument("--shots", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ensemble.ConfigError, StepSizeError, ValueError, KeyError, OSError) as exc:
        sys.stderr.write(f"qaoalab: error: {exc}\n")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
