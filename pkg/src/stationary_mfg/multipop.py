"""Multipopulation drivers: damped best response and joint potential solves.

``solve_best_response`` realises the fixed point of the best-response map by
damped Picard iteration (Jacobi sweeps: every population responds to the
previous sweep's densities, so sweeps are order-independent and
deterministic).  ``solve_potential`` minimises the joint potential problem
over all populations at once, optionally with the single shared density
constraint sum_i alpha_i m_i <= kappa whose one multiplier field p enters
population i's HJB row scaled by alpha_i.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np

from .coupling import LocalCoupling, MultipopPotential
from .discretization import ConstraintOperator, GridSpec, build_operators
from .hamiltonian import HamiltonianModel
from .solver import (
    InfeasibleKappa,
    NotConvergedWarning,
    ProblemContext,
    SolveResult,
    SolverParams,
    _Engine,
    _package_result,
    solve_p1,
)

__all__ = [
    "MultiPopSpec",
    "MultiPopResult",
    "BestResponseReport",
    "solve_best_response",
    "solve_potential",
]


@dataclass
class MultiPopSpec:
    """N populations with one Hamiltonian each and a joint potential coupling.

    The potential supplies both the joint objective (for the potential solve)
    and, through its partial derivatives, the per-population couplings f^i
    used by the best-response iteration.  The optional shared constraint is
    (kappa, alphas) with weights satisfying alpha_i >= 0, some alpha_i > 0,
    and sum_i alpha_i < integral kappa.
    """

    hamiltonians: Sequence[HamiltonianModel]
    potential: MultipopPotential
    kappa: np.ndarray | None = None
    alphas: Sequence[float] | None = None

    def __post_init__(self):
        self.N = len(self.hamiltonians)
        if self.N < 2:
            raise ValueError("multipopulation problems need N >= 2")
        if self.potential.N != self.N:
            raise ValueError("potential arity does not match the number of populations")
        if (self.kappa is None) != (self.alphas is None):
            raise ValueError("shared constraint needs both kappa and alphas")
        if self.alphas is not None:
            self.alphas = [float(a) for a in self.alphas]
            if len(self.alphas) != self.N:
                raise ValueError("need one weight per population")

    def validate_weights(self, grid: GridSpec) -> None:
        """Check the shared-constraint weight condition and its feasibility witness."""
        if self.kappa is None:
            return
        kappa = np.asarray(self.kappa, dtype=float)
        om = grid.weights
        if kappa.min() <= 0.0:
            raise InfeasibleKappa(f"min kappa = {kappa.min()} must be positive")
        alphas = np.asarray(self.alphas, dtype=float)
        if (alphas < 0.0).any() or not (alphas > 0.0).any():
            raise InfeasibleKappa("weights must be nonnegative with at least one positive")
        kappa_mass = float(om @ kappa)
        if alphas.sum() >= kappa_mass:
            raise InfeasibleKappa(
                f"sum of weights {alphas.sum()} must be below the kappa mass {kappa_mass}"
            )
        # feasibility witness: m_i = kappa / |kappa|_1 strictly satisfies the cap
        m_hat = kappa / kappa_mass
        slack = kappa - alphas.sum() * m_hat
        if slack.min() <= 0.0:
            raise InfeasibleKappa("reference point kappa/|kappa|_1 is not strictly feasible")

    def spot_check_potential(self, grid: GridSpec, seed: int = 0, h: float = 1e-6) -> float:
        """Finite-difference check that partial(i) matches the potential's slope."""
        rng = np.random.default_rng(seed)
        ms = [0.5 + rng.uniform(0.0, 1.0, grid.n_nodes) for _ in range(self.N)]
        worst = 0.0
        om = grid.weights
        for i in range(self.N):
            z = rng.uniform(-1.0, 1.0, grid.n_nodes)
            g = self.potential.partial(grid, i, ms)
            ms_p = [m.copy() for m in ms]
            ms_m = [m.copy() for m in ms]
            ms_p[i] = ms[i] + h * z
            ms_m[i] = ms[i] - h * z
            fd = (self.potential.value(grid, ms_p) - self.potential.value(grid, ms_m)) / (2 * h)
            worst = max(worst, abs(float(om @ (g * z)) - fd) / (1.0 + abs(fd)))
        return worst


@dataclass
class BestResponseReport:
    outer_iterations: int
    converged: bool
    residual_history: list[float] = dc_field(default_factory=list)


@dataclass
class MultiPopResult:
    populations: list[SolveResult]
    p: np.ndarray | None = None
    report: BestResponseReport | None = None
    converged: bool = True


def solve_best_response(
    spec: MultiPopSpec,
    grid: GridSpec,
    params: SolverParams | None = None,
    damping: float = 0.5,
    max_outer: int = 50,
    ops: ConstraintOperator | None = None,
) -> MultiPopResult:
    """Damped best-response fixed point for the N-population system.

    Each outer sweep freezes the other densities, solves the resulting
    single-population problem per population (Jacobi), and relaxes
    m_i <- damping * m_i_new + (1 - damping) * m_i_old, with w blended the
    same way (feasibility is preserved by linearity) and the density
    re-derived from the blended momentum for consistency.  Non-convergence
    of the outer loop is reported, not raised: the underlying existence
    result is a fixed-point theorem, not an iteration guarantee.
    """
    if not 0.0 < damping <= 1.0:
        raise ValueError("damping must lie in (0, 1]")
    params = params or SolverParams()
    ops = ops or build_operators(grid)
    spec.validate_weights(grid)
    if spec.kappa is not None:
        raise ValueError("best-response mode does not support the shared constraint")
    ms = [np.full(grid.n_nodes, 1.0 / grid.area) for _ in range(spec.N)]
    ws = [np.zeros((grid.n_nodes, 2)) for _ in range(spec.N)]
    history: list[float] = []
    converged = False
    outer = 0
    for outer in range(1, max_outer + 1):
        frozen = [spec.potential.frozen(grid, i, ms) for i in range(spec.N)]
        news = []
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NotConvergedWarning)
            for i in range(spec.N):
                news.append(solve_p1(spec.hamiltonians[i], frozen[i], grid, params, ops=ops))
        residual = max(float(np.abs(news[i].m - ms[i]).max()) for i in range(spec.N))
        history.append(residual)
        for i in range(spec.N):
            ms[i] = damping * news[i].m + (1.0 - damping) * ms[i]
            ws[i] = damping * news[i].w + (1.0 - damping) * ws[i]
            ms[i] = ops.solve_fp(ws[i])  # re-derive density from the blended momentum
        if residual <= params.tol_change:
            converged = True
            break
    if not converged:
        warnings.warn(
            f"best-response iteration stopped after {outer} sweeps at residual "
            f"{history[-1]:.3e}; result returned flagged",
            NotConvergedWarning,
            stacklevel=2,
        )
    # final consistent per-population solves against the settled fields
    frozen = [spec.potential.frozen(grid, i, ms) for i in range(spec.N)]
    finals = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NotConvergedWarning)
        for i in range(spec.N):
            res = solve_p1(spec.hamiltonians[i], frozen[i], grid, params, ops=ops)
            res.context.joint = spec.potential
            res.context.population = i
            finals.append(res)
    all_m = [r.m for r in finals]
    from .verify import certify

    for i, res in enumerate(finals):
        res.context.all_m = all_m
        res.residuals = certify(res)  # re-certify against the joint coupling
    report = BestResponseReport(outer, converged, history)
    return MultiPopResult(populations=finals, p=None, report=report, converged=converged)


def solve_potential(
    spec: MultiPopSpec,
    grid: GridSpec,
    params: SolverParams | None = None,
    ops: ConstraintOperator | None = None,
) -> MultiPopResult:
    """Joint minimisation of the potential problem over all populations.

    Block-separable kinetic terms, one coupled smooth term, per-population
    Fokker-Planck and mass constraints, and optionally the single shared
    density constraint whose multiplier field p >= 0 is returned once and
    enters population i's certified HJB row as alpha_i * p.
    """
    params = params or SolverParams()
    ops = ops or build_operators(grid)
    spec.validate_weights(grid)
    fd_gap = spec.spot_check_potential(grid)
    if fd_gap > 1e-4:
        warnings.warn(f"potential partial derivatives look inconsistent (fd gap {fd_gap:.2e})")
    box = None
    if spec.kappa is not None:
        box = ("shared", np.asarray(spec.kappa, dtype=float), list(spec.alphas))
    engine = _Engine(
        grid, ops, list(spec.hamiltonians), None, spec.potential, params, box=box
    )
    stats = engine.run()
    if not stats["converged"]:
        warnings.warn(
            f"solve_potential stopped at iteration {stats['iterations']} without meeting "
            "tolerances; result returned flagged",
            NotConvergedWarning,
            stacklevel=2,
        )

    all_m = [stats["Mp"][i] for i in range(spec.N)]
    combined = None
    if box is not None:
        combined = sum(spec.alphas[i] * all_m[i] for i in range(spec.N))

    def ctx(i, s):
        return ProblemContext(
            grid=grid,
            ops=ops,
            model=spec.hamiltonians[i],
            coupling=None,
            kappa=None if spec.kappa is None else np.asarray(spec.kappa, dtype=float),
            alpha=1.0 if spec.alphas is None else spec.alphas[i],
            combined_density=combined,
            joint=spec.potential,
            population=i,
            all_m=all_m,
        )

    results = _package_result(engine, stats, ctx)
    shared_p = results[0].p if box is not None else None
    return MultiPopResult(
        populations=results,
        p=shared_p,
        report=None,
        converged=stats["converged"],
    )
