"""Post-hoc certification: theorem conclusions as numerical checks.

``certify`` recomputes every residual from the returned fields (m, w, u,
lambda, p) alone, through code paths independent of the solver's internals:
the HJB row uses the averaged nodal gradient, the density is cross-validated
by a damped Picard iteration on the forward Fokker-Planck problem, and the
coupling derivative is evaluated fresh.  ``uniqueness_probe`` reruns a solve
from randomised initialisations and reports the spread.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .discretization import nodal_gradient
from .solver import (
    ACTIVE_SET_RELTOL,
    ProblemContext,
    SolveResult,
    SolverParams,
    forward_fp_check,
    solve_p1,
    solve_p2,
)

__all__ = ["ResidualReport", "certify", "uniqueness_probe", "UniquenessReport"]


@dataclass
class ResidualReport:
    """Certificates for the KKT system, positivity and the a priori bound.

    All entries are finite; ``apriori_w_bound`` carries an ``applicable``
    flag instead of infinities when the coupling has no certified global
    lower bound, and ``duality_gap`` is None when not computed.
    """

    kkt_row1: float
    fp_residual: float
    mass_error: float
    drift_residual: float
    min_density: float
    complementarity: float
    support_violation: float
    apriori_w_bound: dict = dc_field(default_factory=dict)
    duality_gap: float | None = None
    forward_fp_gap: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "kkt_row1": self.kkt_row1,
            "fp_residual": self.fp_residual,
            "mass_error": self.mass_error,
            "drift_residual": self.drift_residual,
            "min_density": self.min_density,
            "complementarity": self.complementarity,
            "support_violation": self.support_violation,
            "apriori_w_bound": self.apriori_w_bound,
            "duality_gap": self.duality_gap,
            "forward_fp_gap": self.forward_fp_gap,
        }

    @staticmethod
    def from_dict(d: dict) -> "ResidualReport":
        return ResidualReport(**d)


def _apriori_bound(ctx: ProblemContext, m: np.ndarray, w: np.ndarray) -> dict:
    """Second inequality of the a priori estimate, checked as an inequality.

    lhs = |w|_q^q, rhs = q C1^{q-1} (F(uniform) + 2 C2 - C_F) |m|_inf^{q-1}.
    Reported informationally (applicable = False) when no global lower bound
    C_F is certified.
    """
    grid, model = ctx.grid, ctx.model
    q = model.q
    om = grid.weights
    wmag = np.hypot(w[:, 0], w[:, 1])
    lhs = float(om @ wmag**q)
    uniform = np.full(grid.n_nodes, 1.0 / grid.area)
    if ctx.joint is not None:
        ms = [uniform] * ctx.joint.N
        f_uniform = ctx.joint.value(grid, ms)
        cf = ctx.joint.global_lower_bound(grid)
    else:
        f_uniform = ctx.coupling.value(grid, uniform)
        cf = ctx.coupling.global_lower_bound(grid)
    applicable = cf is not None
    if not applicable:
        return {"lhs": lhs, "rhs": lhs, "pass": True, "applicable": False}
    rhs = (
        q
        * model.growth_C1 ** (q - 1.0)
        * (f_uniform + 2.0 * model.growth_C2 - cf)
        * float(np.abs(m).max()) ** (q - 1.0)
    )
    # 1e-20 slack absorbs roundoff q-th powers when both sides vanish exactly
    return {"lhs": lhs, "rhs": float(rhs), "pass": bool(lhs <= rhs + 1e-20), "applicable": True}


def _duality_gap(ctx: ProblemContext, result: SolveResult) -> float | None:
    """Weak-duality gap for convex local couplings (nodewise dual evaluation)."""
    from .coupling import LocalCoupling, ZeroCoupling
    from .kinetic import bq_value_arrays

    coupling = ctx.coupling
    if ctx.joint is not None or coupling is None:
        return None
    if not isinstance(coupling, (LocalCoupling, ZeroCoupling)) or not coupling.convex:
        return None
    grid, ops, model = ctx.grid, ctx.ops, ctx.model
    om = grid.weights
    m, w, u, lam = result.m, result.w, result.u, result.lam
    p = result.p if result.p is not None else np.zeros(grid.n_nodes)
    b = model.b_at(grid.x, grid.y)
    c = model.c_at(grid.x, grid.y)
    qp = model.qprime

    primal = result.objective
    # Lagrangian in multiplier form: sum_i om_i [b_q + F + a_i m_i + gB_i . w_i]
    # + lam - <p, kappa>_om, with a_i = -(Au)_i/om_i - lam + p_i and gB = -B^T u / om.
    # The w-infimum is closed form: inf_w b_q(m, w) + d.w = -m H(x, d).
    a_lin = -(ops.A @ u) / om - lam + p
    d_lin = ops.bgrad(u)
    gnorm = np.hypot(d_lin[:, 0], d_lin[:, 1])
    Hd = b / qp * gnorm**qp + c
    lin = a_lin - Hd

    def phi(z):  # (k, n) -> per-node objective of the 1-D infimum
        if isinstance(coupling, ZeroCoupling):
            Fz = np.zeros_like(z)
        else:
            Fz = coupling.primitive(grid, z)
        return Fz + z * lin[None, :]

    lo = np.zeros(grid.n_nodes)
    hi = np.full(grid.n_nodes, 10.0 * max(1.0, float(np.abs(m).max())))
    for _ in range(6):  # nested grid refinement of the nodewise infimum
        zs = lo[None, :] + np.linspace(0.0, 1.0, 65)[:, None] * (hi - lo)[None, :]
        vals = phi(zs)
        k = vals.argmin(axis=0)
        step = (hi - lo) / 64.0
        centre = np.take_along_axis(zs, k[None, :], axis=0)[0]
        lo = np.maximum(centre - step, 0.0)
        hi = centre + step
    node_inf = np.take_along_axis(vals, vals.argmin(axis=0)[None, :], axis=0)[0]
    kap_term = float(om @ (p * ctx.kappa)) if ctx.kappa is not None else 0.0
    dual = lam - kap_term + float(om @ node_inf)
    return float(primal - dual)


def certify(result: SolveResult, context: ProblemContext | None = None) -> ResidualReport:
    """Recompute every certificate from (m, w, u, lambda, p) alone.

    Never reads solver-internal residuals.  The HJB row is evaluated with
    the averaged nodal gradient and a fresh coupling derivative; the
    forward Fokker-Planck Picard solve provides the independent density
    route recorded in ``forward_fp_gap``.
    """
    ctx = context or result.context
    if ctx is None:
        raise ValueError("certify needs a problem context")
    grid, ops, model = ctx.grid, ctx.ops, ctx.model
    om = grid.weights
    m, w, u, lam = result.m, result.w, result.u, result.lam
    q = model.q

    gu = nodal_gradient(grid, u)
    b = model.b_at(grid.x, grid.y)
    c = model.c_at(grid.x, grid.y)
    gnorm = np.hypot(gu[:, 0], gu[:, 1])
    Hval = b / model.qprime * gnorm**model.qprime + c
    if ctx.joint is not None:
        g = ctx.joint.partial(grid, ctx.population, ctx.all_m)
    else:
        g = ctx.coupling.derivative(grid, m)
    row = (ops.A @ u) / om + Hval + lam - g
    if result.p is not None:
        row = row - ctx.alpha * result.p
    live = m > 1e-12
    kkt_row1 = float(np.abs(row[live]).max(initial=0.0))

    r = ops.residual(m, w)
    fp_residual = float(np.linalg.norm(r) / (1.0 + np.linalg.norm(ops.apply_B(w))))
    mass_error = float(abs(om @ m - 1.0))

    scale = np.where(gnorm > 0.0, b * gnorm ** (model.qprime - 2.0), 0.0)
    dx = w[:, 0] + m * scale * gu[:, 0]
    dy = w[:, 1] + m * scale * gu[:, 1]
    drift_norm = float((om @ np.hypot(dx, dy) ** q) ** (1.0 / q))
    wq = float((om @ np.hypot(w[:, 0], w[:, 1]) ** q) ** (1.0 / q))
    drift_residual = drift_norm / (1.0 + wq)

    min_density = float(m.min())

    complementarity = 0.0
    support_violation = 0.0
    if result.p is not None and ctx.kappa is not None:
        density = ctx.combined_density if ctx.combined_density is not None else m
        complementarity = float(om @ (result.p * (ctx.kappa - density)))
        pmax = float(result.p.max(initial=0.0))
        if pmax > 1e-12:
            active = result.p > ACTIVE_SET_RELTOL * max(1.0, pmax)
            if active.any():
                support_violation = float((ctx.kappa - density)[active].max())

    m_forward = forward_fp_check(model, grid, ops, u)
    forward_gap = float(np.abs(m_forward - m).max())

    return ResidualReport(
        kkt_row1=kkt_row1,
        fp_residual=fp_residual,
        mass_error=mass_error,
        drift_residual=drift_residual,
        min_density=min_density,
        complementarity=complementarity,
        support_violation=support_violation,
        apriori_w_bound=_apriori_bound(ctx, m, w),
        duality_gap=_duality_gap(ctx, result),
        forward_fp_gap=forward_gap,
    )


@dataclass
class UniquenessReport:
    m_spread: float
    u_spread: float
    lam_spread: float
    trials: int
    strictly_convex: bool
    passed: bool | None  # None in report-only mode (no uniqueness claim)


def uniqueness_probe(
    model,
    coupling,
    grid,
    params: SolverParams | None = None,
    kappa: np.ndarray | None = None,
    trials: int = 3,
    perturbation: float = 0.3,
    seed: int = 0,
    strictly_convex: bool | None = None,
) -> UniquenessReport:
    """Rerun the solve from randomised initialisations and report the spread.

    When the coupling is declared strictly convex the probe passes iff the
    max pairwise sup-distance of m and of u stays below 10 * tol_change;
    otherwise the spread is reported without a verdict.

    The individual solves run at tightened tolerances: distances in m between
    independently converged runs scale like the row tolerance amplified by
    the discrete Laplacian, so the inner kkt tolerance must sit well below
    the advertised spread threshold.
    """
    from dataclasses import replace

    params = params or SolverParams()
    # change tolerance stays above the prox-jitter noise floor (~1e-9/iteration)
    inner = replace(
        params,
        tol_kkt=min(params.tol_kkt, 1e-9),
        tol_change=min(params.tol_change, 1e-8),
    )
    rng = np.random.default_rng(seed)
    if strictly_convex is None:
        strictly_convex = bool(getattr(coupling, "convex", False))
    runs = []
    for _ in range(trials):
        m0 = 1.0 / grid.area + perturbation * rng.uniform(-1.0, 1.0, grid.n_nodes)
        m0 = np.maximum(m0, 0.05 / grid.area)
        m0 /= grid.weights @ m0
        w0 = perturbation * rng.normal(size=(grid.n_nodes, 2)) * 0.1
        init = ([m0], [w0])
        if kappa is None:
            runs.append(solve_p1(model, coupling, grid, inner, init=init))
        else:
            runs.append(solve_p2(model, coupling, grid, kappa, inner, init=init))
    m_spread = u_spread = lam_spread = 0.0
    for i in range(trials):
        for j in range(i + 1, trials):
            m_spread = max(m_spread, float(np.abs(runs[i].m - runs[j].m).max()))
            u_spread = max(u_spread, float(np.abs(runs[i].u - runs[j].u).max()))
            lam_spread = max(lam_spread, abs(runs[i].lam - runs[j].lam))
    passed = None
    if strictly_convex:
        passed = bool(m_spread <= 10.0 * params.tol_change and u_spread <= 10.0 * params.tol_change)
    return UniquenessReport(m_spread, u_spread, lam_spread, trials, strictly_convex, passed)
