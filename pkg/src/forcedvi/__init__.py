"""Variational integrators for forced Lagrangian systems by duplication of variables."""

from .continuous import (
    DoubledStateTangent,
    EnergyReport,
    ForcedSystem,
    StateCotangent,
    StateTangent,
    doubled_field,
    doubled_hamiltonian,
    doubled_hamiltonian_field,
    doubled_lagrangian,
    forced_el_acceleration,
    forced_hamilton_field,
    generalized_potential_KF,
    legendre,
    reference_solve,
)
from .discrete import (
    DiscreteLagrangian,
    DiscretePair,
    QuadratureScheme,
    SolverConfig,
    alpha_rule,
    del_step,
    discrete_forces_from_K,
    discrete_legendre_minus,
    discrete_legendre_plus,
    initialize_from_state,
    integrate,
    lobatto_galerkin,
)
from .geometry import Chart, Retraction, check_retraction_axioms, euclidean_retraction
from .trajectory import TrajectoryRecord

__version__ = "0.1.0"
