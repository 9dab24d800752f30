"""Energy-shaping controller synthesis for fully-actuated port-Hamiltonian
mechanical systems.

A small tanh network learns the auxiliary energy and damping that solve the
interconnection-and-damping-assignment matching equations; training
minimizes spectral, equilibrium, Lyapunov, matching and slope residuals
over collocation points, and the result is validated in closed-loop
simulation against an analytic comparator.
"""

from .numerics import general_eigenvalues, spd_solve, sym_eigen
from .ph_core import (
    MechanicalPH,
    double_pendulum,
    hamiltonian,
    left_annihilator,
    make_system,
    open_loop_dynamics,
    output_map,
    power_balance_defect,
    simple_pendulum,
    structure_matrices,
)
from .residuals import ResidualBreakdown, total_loss
from .simulator import (
    BaselineController,
    NeuralController,
    OpenLoopController,
    Trajectory,
    baseline_controller,
    control_law,
    simulate,
    verify_trajectory,
)
from .surrogate import DesiredStructure, SurrogateNet, load_checkpoint, save_checkpoint
from .trainer import CollocationDomain, TrainReport, TrainSettings, sample_collocation, train

__all__ = [
    "BaselineController",
    "CollocationDomain",
    "DesiredStructure",
    "MechanicalPH",
    "NeuralController",
    "OpenLoopController",
    "ResidualBreakdown",
    "SurrogateNet",
    "TrainReport",
    "TrainSettings",
    "Trajectory",
    "baseline_controller",
    "control_law",
    "double_pendulum",
    "general_eigenvalues",
    "hamiltonian",
    "left_annihilator",
    "load_checkpoint",
    "make_system",
    "open_loop_dynamics",
    "output_map",
    "power_balance_defect",
    "sample_collocation",
    "save_checkpoint",
    "simple_pendulum",
    "simulate",
    "spd_solve",
    "structure_matrices",
    "sym_eigen",
    "total_loss",
    "train",
    "verify_trajectory",
]

__version__ = "0.1.0"
