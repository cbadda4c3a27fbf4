"""Stationary mean field game solver on rectangles with Neumann conditions.

Submodules are imported lazily so the command-line entry point can configure
threading environment variables before numpy loads.
"""

from __future__ import annotations

__version__ = "0.1.0"

_EXPORTS = {
    "HamiltonianModel": "hamiltonian",
    "CoefficientField": "hamiltonian",
    "h_value": "hamiltonian",
    "hstar_value": "hamiltonian",
    "grad_h": "hamiltonian",
    "grad_hstar": "hamiltonian",
    "validate_growth": "hamiltonian",
    "KineticSample": "kinetic",
    "DualSample": "kinetic",
    "bq_value": "kinetic",
    "bq_subgradient": "kinetic",
    "project_onto_A": "kinetic",
    "prox_bq": "kinetic",
    "bq_total": "kinetic",
    "GridSpec": "discretization",
    "ConstraintOperator": "discretization",
    "build_operators": "discretization",
    "solve_fp_linear": "discretization",
    "nodal_gradient": "discretization",
    "norms": "discretization",
    "Coupling": "coupling",
    "ZeroCoupling": "coupling",
    "LocalCoupling": "coupling",
    "DirichletCoupling": "coupling",
    "NonlocalCoupling": "coupling",
    "MultipopPotential": "coupling",
    "coupling_value": "coupling",
    "coupling_derivative": "coupling",
    "check_admissibility": "coupling",
    "SolverParams": "solver",
    "SolveResult": "solver",
    "ProblemContext": "solver",
    "solve_p1": "solver",
    "solve_p2": "solver",
    "forward_fp_check": "solver",
    "StepSizeFailure": "solver",
    "InfeasibleKappa": "solver",
    "FixedPointStalled": "solver",
    "NotConvergedWarning": "solver",
    "MultiPopSpec": "multipop",
    "MultiPopResult": "multipop",
    "solve_best_response": "multipop",
    "solve_potential": "multipop",
    "ResidualReport": "verify",
    "certify": "verify",
    "uniqueness_probe": "verify",
    "PropertyCase": "fpcheck",
    "run_all": "fpcheck",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name: str):
    if name in _EXPORTS:
        import importlib

        module = importlib.import_module(f".{_EXPORTS[name]}", __name__)
        return getattr(module, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return __all__
