"""Statevector QAOA on random QUBOs: optimization, Boltzmann fits, integrated-angle
trajectories and continuous annealing."""

from .annealer import AnnealRun, anneal, integrate_qa, qa_endpoint_distribution
from .ensemble import EnsembleConfig, EnsembleReport, report_scaling, run_ensemble, sample_bitstrings
from .optimizer import OptimizeConfig, OptimResult, optimize_chain, optimize_p, optimize_p1
from .problems import EnergyTable, IsingProblem, QuboInstance, energy_table, sample_qubo, to_ising
from .simulator import AngleSchedule, StateVector, output_distribution, run_qaoa
from .thermofit import BoltzmannFit, FitConfig, fit_bimodal
from .trajectory import ContinuousSchedule, TrajectoryPath, cumulative_path, fit_circle

__all__ = [
    "AnnealRun",
    "anneal",
    "integrate_qa",
    "qa_endpoint_distribution",
    "EnsembleConfig",
    "EnsembleReport",
    "report_scaling",
    "run_ensemble",
    "sample_bitstrings",
    "OptimizeConfig",
    "OptimResult",
    "optimize_chain",
    "optimize_p",
    "optimize_p1",
    "EnergyTable",
    "IsingProblem",
    "QuboInstance",
    "energy_table",
    "sample_qubo",
    "to_ising",
    "AngleSchedule",
    "StateVector",
    "output_distribution",
    "run_qaoa",
    "BoltzmannFit",
    "FitConfig",
    "fit_bimodal",
    "ContinuousSchedule",
    "TrajectoryPath",
    "cumulative_path",
    "fit_circle",
]

__version__ = "0.1.0"
