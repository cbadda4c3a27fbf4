"""Primal-dual solver for the variational MFG problems and multiplier extraction.

The scheme is a three-operator primal-dual splitting (Condat-Vu family):
the kinetic term is handled by its exact nodewise prox, the coupling by
explicit gradient steps, and the linear constraints (Fokker-Planck rows,
unit mass, optional density cap) by dual ascent.  Two metric choices make
the iteration grid-robust:

* primal steps are taken in the lumped-mass metric, so the prox parameter
  is the same at every node;
* the Fokker-Planck dual rows ascend in the metric of
  S = A D^-1 A^T + B D^-1 B^T (one cached factorisation), which makes the
  equality-constraint block of the preconditioned operator an isometry.

The step rule is tau * (L/2 + sigma * |K|^2) < 1 with |K| the preconditioned
operator norm from power iteration, and the relaxation is capped by
rho < 2 - (L/2) / (1/tau - sigma |K|^2).

On convergence the primal pair is projected exactly onto the affine
constraint set (a second cached factorisation), and the multipliers are
mapped to the MFG unknowns: u = -y_pde gauged to zero weighted mean,
lambda = -y_mass (unscaled), p = y_cap / weights >= 0.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field as dc_field
from typing import Sequence

import numpy as np

from .coupling import Coupling, MultipopPotential
from .discretization import ConstraintOperator, GridSpec, build_operators, nodal_gradient
from .hamiltonian import HamiltonianModel
from .kinetic import bq_value_arrays, prox_arrays

__all__ = [
    "SolverParams",
    "SolveResult",
    "ProblemContext",
    "NotConvergedWarning",
    "StepSizeFailure",
    "InfeasibleKappa",
    "FixedPointStalled",
    "solve_p1",
    "solve_p2",
    "forward_fp_check",
    "ACTIVE_SET_RELTOL",
]

# a node is active for support checks when p_i > ACTIVE_SET_RELTOL * max(1, |p|_inf)
ACTIVE_SET_RELTOL = 1e-6


class StepSizeFailure(RuntimeError):
    """Adaptive Lipschitz backtracking exhausted; the coupling hint is unusable."""


class InfeasibleKappa(ValueError):
    """Density cap violates min kappa > 0 or integral kappa > 1."""


class FixedPointStalled(RuntimeError):
    """Picard iteration for the forward Fokker-Planck check did not settle."""


class NotConvergedWarning(UserWarning):
    pass


@dataclass
class SolverParams:
    """Tolerances and step controls.

    ``tol_change`` bounds the average per-iteration sup-norm displacement of
    the primal pair measured across one check window.  The drift identity
    w = -m grad_xi H(., grad u) is certified post hoc but is not part of the
    stopping test: it inherits a |.|^{q'-1} cusp wherever grad u vanishes,
    which floors it at roughly the square root of the dual error.
    """

    max_iters: int = 100_000
    tau: float | None = None          # primal step; auto from the step rule when None
    sigma: float | None = None        # dual step; auto when None
    rho: float = 1.9                  # relaxation, clipped to the admissible range
    tol_pde: float = 1e-10            # on the returned (projected) fields
    tol_kkt: float = 1e-6
    tol_change: float = 1e-7
    eps_m: float = 1e-12              # density guard for diagnostics-only divisions
    nonconvex_damping: float = 1.0    # in (0, 1]; inflates L for nonconvex couplings
    check_every: int = 100
    record_history: bool = False
    verbose: bool = False


@dataclass
class ProblemContext:
    """Everything the verifier needs to re-derive residuals from scratch."""

    grid: GridSpec
    ops: ConstraintOperator
    model: HamiltonianModel
    coupling: Coupling | None
    kappa: np.ndarray | None = None
    alpha: float = 1.0
    combined_density: np.ndarray | None = None  # sum_i alpha_i m_i in shared mode
    joint: MultipopPotential | None = None
    population: int = 0
    all_m: list | None = None


@dataclass
class SolveResult:
    m: np.ndarray
    w: np.ndarray
    u: np.ndarray
    lam: float
    p: np.ndarray | None
    objective: float
    residuals: "object"  # verify.ResidualReport, filled by certify
    iterations: int
    converged: bool
    history: list | None = None
    context: ProblemContext | None = None
    info: dict = dc_field(default_factory=dict)


def _model_arrays(model: HamiltonianModel, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    return model.b_at(grid.x, grid.y), model.c_at(grid.x, grid.y)


class _WindowAverage:
    """Running means of primal prox outputs and duals over one check window.

    Candidates for extraction are window averages: the iteration converges to
    a fixed point around which the late iterates wobble at the prox-jitter
    scale, and averaging suppresses that oscillatory noise (which the
    stiffness row of the KKT system would otherwise amplify into m) without
    biasing the limit.  Nonnegativity of densities and cap duals survives
    averaging by convexity.
    """

    def __init__(self, engine: "_Engine"):
        self.e = engine
        self.reset()

    def reset(self):
        e = self.e
        self.count = 0
        self.M = np.zeros_like(e.M)
        self.Wx = np.zeros_like(e.Wx)
        self.Wy = np.zeros_like(e.Wy)
        self.Y1 = np.zeros_like(e.Y1)
        self.Y2 = np.zeros_like(e.Y2)
        self.Yb = None if e.Yb is None else np.zeros_like(e.Yb)

    def accumulate(self, Mb, Wbx, Wby):
        e = self.e
        self.count += 1
        self.M += Mb
        self.Wx += Wbx
        self.Wy += Wby
        self.Y1 += e.Y1
        self.Y2 += e.Y2
        if self.Yb is not None:
            self.Yb += e.Yb

    def take(self):
        k = max(self.count, 1)
        out = (
            self.M / k,
            self.Wx / k,
            self.Wy / k,
            (self.Y1 / k, self.Y2 / k, None if self.Yb is None else self.Yb / k),
        )
        self.reset()
        return out


class _Engine:
    """Shared primal-dual core for one or several populations on one grid.

    Box modes: None, ("per_pop", kappa) with one cap dual per population, or
    ("shared", kappa, alphas) with a single cap dual on sum_i alpha_i m_i.
    """

    def __init__(
        self,
        grid: GridSpec,
        ops: ConstraintOperator,
        models: Sequence[HamiltonianModel],
        couplings: Sequence[Coupling] | None,
        joint: MultipopPotential | None,
        params: SolverParams,
        box: tuple | None = None,
        init: tuple | None = None,
    ):
        self.grid, self.ops, self.params = grid, ops, params
        self.models = list(models)
        self.N = len(self.models)
        self.couplings = list(couplings) if couplings is not None else None
        self.joint = joint
        self.box = box
        n = grid.n_nodes
        self.om = ops.weights
        self.sqw = np.sqrt(self.om)
        self.chat = 1.0 / np.sqrt(self.om.sum())
        self.bc = [_model_arrays(mod, grid) for mod in self.models]

        self.M = np.full((self.N, n), 1.0 / grid.area)
        self.Wx = np.zeros((self.N, n))
        self.Wy = np.zeros((self.N, n))
        if init is not None:
            m0, w0 = init
            for i in range(self.N):
                self.M[i] = m0[i]
                self.Wx[i] = w0[i][:, 0]
                self.Wy[i] = w0[i][:, 1]
        self.Y1 = np.zeros((self.N, n))
        self.Y2 = np.zeros(self.N)
        if box is None:
            self.Yb = None
        else:
            self.Yb = np.zeros((self.N, n)) if box[0] == "per_pop" else np.zeros(n)

        self._convex = self._is_convex()
        self._L = self._lipschitz()
        self._set_steps()

    # -- coupling adapters ----------------------------------------------------

    def _values(self, Ms) -> float:
        if self.joint is not None:
            return self.joint.value(self.grid, list(Ms))
        return sum(c.value(self.grid, Ms[i]) for i, c in enumerate(self.couplings))

    def _reps(self, Ms) -> np.ndarray:
        if self.joint is not None:
            return np.stack(self.joint.representers(self.grid, list(Ms)))
        return np.stack([c.derivative(self.grid, Ms[i]) for i, c in enumerate(self.couplings)])

    def _lipschitz(self) -> float:
        if self.joint is not None:
            L = self.joint.lipschitz_hint(self.grid, list(self.M))
        else:
            L = max(c.lipschitz_hint(self.grid, self.M[i]) for i, c in enumerate(self.couplings))
        if not self._convex:
            L = L / self.params.nonconvex_damping
        return max(L, 0.0)

    def _is_convex(self) -> bool:
        if self.joint is not None:
            return self.joint.convex
        return all(c.convex for c in self.couplings)

    # -- operator norm and steps ----------------------------------------------

    def _precond_norm2(self) -> float:
        """|Sigma^(1/2) K T^(1/2)|^2 by power iteration (T = D^-1, S-metric duals)."""
        grid, ops = self.grid, self.ops
        n = grid.n_nodes
        sqw, chat, om = self.sqw, self.chat, self.om
        shared = self.box is not None and self.box[0] == "shared"
        alphas = np.asarray(self.box[2], dtype=float) if shared else None

        def ktsk(Vm, Vwx, Vwy):
            m = Vm / sqw
            wx = Vwx / sqw
            wy = Vwy / sqw
            Gm = np.empty_like(Vm)
            Gwx = np.empty_like(Vwx)
            Gwy = np.empty_like(Vwy)
            r3_shared = (alphas[:, None] * m).sum(axis=0) * sqw if shared else None
            for i in range(self.N):
                r1 = ops.A @ m[i] + ops.Bx @ wx[i] + ops.By @ wy[i]
                r2 = chat * (om @ m[i])
                s1 = ops.metric_solve(r1)
                g = ops.A @ s1 + chat * om * r2
                if self.box is not None:
                    if shared:
                        g = g + alphas[i] * sqw * r3_shared
                    else:
                        g = g + sqw * (sqw * m[i])
                Gm[i] = g / sqw
                Gwx[i] = (ops.Bx.T @ s1) / sqw
                Gwy[i] = (ops.By.T @ s1) / sqw
            return Gm, Gwx, Gwy

        v = np.ones(3 * self.N * n) + np.linspace(0.0, 1.0, 3 * self.N * n)
        v /= np.linalg.norm(v)
        nv = 1.0
        for _ in range(20):
            V = v.reshape(3, self.N, n)
            Gm, Gwx, Gwy = ktsk(V[0], V[1], V[2])
            v = np.concatenate([Gm.ravel(), Gwx.ravel(), Gwy.ravel()])
            nv = np.linalg.norm(v)
            v /= nv
        return float(nv) * 1.02

    def _set_steps(self):
        self._kap2 = self._precond_norm2()
        p = self.params
        L = self._L
        tau = p.tau if p.tau is not None else min(0.25 / max(L, 1e-12), 1.0)
        if p.sigma is not None:
            sigma = p.sigma
        else:
            sigma = (0.99 - tau * L / 2.0) / (tau * self._kap2)
        if tau * (L / 2.0 + sigma * self._kap2) >= 1.0:
            raise StepSizeFailure(
                f"step condition violated: tau={tau}, sigma={sigma}, L={L}, |K|^2={self._kap2}"
            )
        denom = 1.0 / tau - sigma * self._kap2
        delta = 2.0 - (L / 2.0) / denom if denom > 0 else 1.0
        self.tau = tau
        self.sigma = sigma
        self.rho = float(np.clip(min(self.params.rho, 0.95 * delta), 0.05, 1.95))

    # -- iteration ------------------------------------------------------------

    def _kt_dual(self, i: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Lumped-metric representer of K^T y for population i."""
        ops, om = self.ops, self.om
        g = (ops.A @ self.Y1[i]) / om + self.chat * self.Y2[i]
        if self.box is not None:
            if self.box[0] == "per_pop":
                g = g + self.sqw * self.Yb[i] / om
            else:
                alphas = self.box[2]
                g = g + alphas[i] * self.sqw * self.Yb / om
        return g, (ops.Bx.T @ self.Y1[i]) / om, (ops.By.T @ self.Y1[i]) / om

    def run(self):
        p = self.params
        grid, ops = self.grid, self.ops
        om, sqw, chat = self.om, self.sqw, self.chat
        Mb, Wbx, Wby = self.M.copy(), self.Wx.copy(), self.Wy.copy()
        prev_check = None
        history = [] if p.record_history else None
        coupling_val_prev = None
        grad_prev = None
        backtracks = 0
        converged = False
        it = 0
        stats = {}
        avg = _WindowAverage(self)

        while it < p.max_iters:
            it += 1
            G = self._reps(self.M)
            for i in range(self.N):
                km, kwx, kwy = self._kt_dual(i)
                mt = self.M[i] - self.tau * (G[i] + km)
                wtx = self.Wx[i] - self.tau * kwx
                wty = self.Wy[i] - self.tau * kwy
                b, c = self.bc[i]
                Mb[i], Wbx[i], Wby[i] = prox_arrays(
                    b, c, self.models[i].qprime, self.tau, mt, wtx, wty
                )
            Mh = 2.0 * Mb - self.M
            Whx = 2.0 * Wbx - self.Wx
            Why = 2.0 * Wby - self.Wy
            Y1b = np.empty_like(self.Y1)
            Y2b = np.empty_like(self.Y2)
            for i in range(self.N):
                r1 = ops.A @ Mh[i] + ops.Bx @ Whx[i] + ops.By @ Why[i]
                Y1b[i] = self.Y1[i] + self.sigma * ops.metric_solve(r1)
                Y2b[i] = self.Y2[i] + self.sigma * chat * (om @ Mh[i] - 1.0)
            if self.box is not None:
                kappa = self.box[1]
                if self.box[0] == "per_pop":
                    Ybb = np.maximum(0.0, self.Yb + self.sigma * sqw * (Mh - kappa))
                else:
                    alphas = self.box[2]
                    comb = (np.asarray(alphas)[:, None] * Mh).sum(axis=0)
                    Ybb = np.maximum(0.0, self.Yb + self.sigma * sqw * (comb - kappa))
            rho = self.rho
            self.M += rho * (Mb - self.M)
            self.Wx += rho * (Wbx - self.Wx)
            self.Wy += rho * (Wby - self.Wy)
            self.Y1 += rho * (Y1b - self.Y1)
            self.Y2 += rho * (Y2b - self.Y2)
            if self.box is not None:
                self.Yb += rho * (Ybb - self.Yb)
            avg.accumulate(Mb, Wbx, Wby)

            if it % p.check_every == 0 or it == p.max_iters:
                Ma, Wxa, Wya, duals_a = avg.take()
                stats = self._check(Ma, Wxa, Wya, prev_check, duals=duals_a)
                prev_check = (Ma, Wxa, Wya)
                if history is not None:
                    history.append(
                        {
                            "iteration": it,
                            "objective": stats["objective"],
                            "pde_residual": stats["pde_raw"],
                            "kkt_residual": stats["kkt"],
                        }
                    )
                if p.verbose:
                    print(
                        f"  it={it} kkt={stats['kkt']:.2e} drift={stats['drift']:.2e} "
                        f"pde_raw={stats['pde_raw']:.2e} change={stats['change']:.2e} "
                        f"obj={stats['objective']:.8f}"
                    )
                # descent-lemma watchdog for bad Lipschitz hints
                cv = stats["coupling_value"]
                if coupling_val_prev is not None and self._L > 0:
                    om_t = self.om_tiled()
                    dM = stats["Mp"] - grad_prev[0]
                    lin = float(np.sum(grad_prev[1] * om_t * dM))
                    quad = 0.5 * self._L * float(np.sum(om_t * dM * dM))
                    slack = 1e-8 * (1.0 + abs(cv))
                    if cv > coupling_val_prev + lin + quad + slack:
                        backtracks += 1
                        if backtracks > 60:
                            raise StepSizeFailure("descent-lemma backtracking exhausted")
                        self._L *= 2.0
                        self._set_steps()
                coupling_val_prev = cv
                grad_prev = (stats["Mp"].copy(), self._reps(stats["Mp"]))
                if self._converged(stats):
                    converged = True
                    break

        if not stats:
            stats = self._check(Mb, Wbx, Wby, prev_check)
        stats["iterations"] = it
        stats["converged"] = converged
        stats["history"] = history
        stats["backtracks"] = backtracks
        return stats

    def om_tiled(self):
        return np.broadcast_to(self.om, (self.N, self.grid.n_nodes))

    def _converged(self, stats) -> bool:
        p = self.params
        ok = (
            stats["kkt"] <= p.tol_kkt
            and stats["change"] <= p.tol_change
            and stats["pde"] <= p.tol_pde
            and stats["mass"] <= max(p.tol_pde, 1e-12)
        )
        if ok and self.box is not None:
            ok = stats["support_violation"] <= 5e-6 and abs(stats["complementarity"]) <= 5e-7
        return ok

    # -- extraction and internal certificates ----------------------------------

    def extract_multipliers(self, duals=None):
        om = self.om
        Y1, Y2, Yb = duals if duals is not None else (self.Y1, self.Y2, self.Yb)
        us, lams = [], []
        for i in range(self.N):
            u = -Y1[i]
            u = u - (om @ u) / om.sum()
            us.append(u)
            lams.append(-self.chat * Y2[i])
        if self.box is None:
            ps = None
        elif self.box[0] == "per_pop":
            ps = [Yb[i] * self.sqw / om for i in range(self.N)]
        else:
            ps = Yb * self.sqw / om  # single shared field
        return us, lams, ps

    def _check(self, Mb, Wbx, Wby, prev, duals=None) -> dict:
        """Certificates at the feasibility-projected candidate point."""
        grid, ops, om = self.grid, self.ops, self.om
        n = grid.n_nodes
        Mp = np.empty_like(Mb)
        Wp = np.empty((self.N, n, 2))
        pde_raw = 0.0
        polish_delta = 0.0
        for i in range(self.N):
            w = np.column_stack([Wbx[i], Wby[i]])
            r = ops.residual(Mb[i], w)
            pde_raw = max(pde_raw, np.linalg.norm(r) / (1.0 + np.linalg.norm(ops.apply_B(w))))
            Mp[i], Wp[i] = ops.project_feasible(Mb[i], w)
            polish_delta = max(polish_delta, float(np.abs(Mp[i] - Mb[i]).max()))
        us, lams, ps = self.extract_multipliers(duals)

        G = self._reps(Mp)
        kkt = 0.0
        drift = 0.0
        pde = 0.0
        mass = 0.0
        for i in range(self.N):
            u = us[i]
            gB = ops.bgrad(u)  # approximates grad u
            b, c = self.bc[i]
            qp = self.models[i].qprime
            q = self.models[i].q
            gnorm = np.sqrt(gB[:, 0] ** 2 + gB[:, 1] ** 2)
            Hval = b / qp * gnorm**qp + c
            row = (ops.A @ u) / om + Hval + lams[i] - G[i]
            if ps is not None:
                row = row - (ps[i] if self.box[0] == "per_pop" else self.box[2][i] * ps)
            live = Mp[i] > self.params.eps_m
            kkt = max(kkt, float(np.abs(row[live]).max(initial=0.0)))
            scale = np.where(gnorm > 0.0, b * gnorm ** (qp - 2.0), 0.0)
            dx = Wp[i][:, 0] + Mp[i] * scale * gB[:, 0]
            dy = Wp[i][:, 1] + Mp[i] * scale * gB[:, 1]
            dmag = (om @ np.hypot(dx, dy) ** q) ** (1.0 / q)
            wmag = (om @ np.hypot(Wp[i][:, 0], Wp[i][:, 1]) ** q) ** (1.0 / q)
            drift = max(drift, float(dmag / (1.0 + wmag)))
            r = ops.residual(Mp[i], Wp[i])
            pde = max(pde, np.linalg.norm(r) / (1.0 + np.linalg.norm(ops.apply_B(Wp[i]))))
            mass = max(mass, abs(om @ Mp[i] - 1.0))

        support_violation = 0.0
        complementarity = 0.0
        if self.box is not None:
            kappa = self.box[1]
            if self.box[0] == "per_pop":
                for i in range(self.N):
                    sv, comp = _cap_certificates(om, ps[i], kappa, Mp[i])
                    support_violation = max(support_violation, sv)
                    complementarity = max(complementarity, abs(comp))
            else:
                comb = (np.asarray(self.box[2])[:, None] * Mp).sum(axis=0)
                support_violation, complementarity = _cap_certificates(om, ps, kappa, comb)

        if prev is None:
            change = float("inf")
        else:
            # average per-iteration displacement across the check window
            change = max(
                float(np.abs(Mb - prev[0]).max()),
                float(np.abs(Wbx - prev[1]).max()),
                float(np.abs(Wby - prev[2]).max()),
            ) / max(self.params.check_every, 1)
        cval = self._values(Mp)
        obj = cval
        for i in range(self.N):
            b, c = self.bc[i]
            vals = bq_value_arrays(b, c, self.models[i].qprime, Mp[i], Wp[i][:, 0], Wp[i][:, 1])
            obj += float(om @ np.where(np.isfinite(vals), vals, 0.0))
        return {
            "Mp": Mp,
            "Wp": Wp,
            "us": us,
            "lams": lams,
            "ps": ps,
            "kkt": kkt,
            "drift": drift,
            "pde": pde,
            "pde_raw": pde_raw,
            "mass": mass,
            "change": change,
            "support_violation": support_violation,
            "complementarity": complementarity,
            "objective": obj,
            "coupling_value": cval,
            "polish_delta": polish_delta,
            "min_density": float(Mp.min()),
        }


def _cap_certificates(om, p, kappa, density):
    """(largest kappa - density over active nodes, weighted complementarity)."""
    comp = float(om @ (p * (kappa - density)))
    pmax = float(p.max(initial=0.0))
    if pmax <= 1e-12:
        return 0.0, comp
    active = p > ACTIVE_SET_RELTOL * max(1.0, pmax)
    if not active.any():
        return 0.0, comp
    return float((kappa - density)[active].max()), comp


def _package_result(engine: _Engine, stats: dict, ctx_builder) -> list[SolveResult]:
    from .verify import certify  # deferred: verify imports this module

    results = []
    shared = engine.box is not None and engine.box[0] == "shared"
    for i in range(engine.N):
        if engine.box is None:
            p_i = None
        elif shared:
            p_i = stats["ps"]
        else:
            p_i = stats["ps"][i]
        res = SolveResult(
            m=stats["Mp"][i],
            w=stats["Wp"][i],
            u=stats["us"][i],
            lam=stats["lams"][i],
            p=p_i,
            objective=stats["objective"],
            residuals=None,
            iterations=stats["iterations"],
            converged=stats["converged"],
            history=stats["history"],
            context=ctx_builder(i, stats),
            info={
                "tau": engine.tau,
                "sigma": engine.sigma,
                "rho": engine.rho,
                "precond_norm2": engine._kap2,
                "lipschitz": engine._L,
                "backtracks": stats["backtracks"],
                "polish_delta": stats["polish_delta"],
                "pde_raw": stats["pde_raw"],
                "kkt_internal": stats["kkt"],
                "drift_internal": stats["drift"],
            },
        )
        res.residuals = certify(res)
        results.append(res)
    return results


def _warn_if_unconverged(stats, what: str):
    if not stats["converged"]:
        warnings.warn(
            f"{what} stopped at iteration {stats['iterations']} without meeting tolerances "
            f"(kkt={stats['kkt']:.2e}, change={stats['change']:.2e}); result returned flagged",
            NotConvergedWarning,
            stacklevel=3,
        )


def solve_p1(
    model: HamiltonianModel,
    coupling: Coupling,
    grid: GridSpec,
    params: SolverParams | None = None,
    ops: ConstraintOperator | None = None,
    init: tuple | None = None,
) -> SolveResult:
    """Minimise B_q(m, w) + F(m) subject to A m + B w = 0 and unit mass."""
    params = params or SolverParams()
    ops = ops or build_operators(grid)
    if coupling.global_lower_bound(grid) is None:
        warnings.warn(
            "coupling has no certified global lower bound on nonnegative densities; "
            "the unconstrained problem may be ill-posed (existence hypotheses unverified)",
            stacklevel=2,
        )
    engine = _Engine(grid, ops, [model], [coupling], None, params, box=None, init=init)
    stats = engine.run()
    _warn_if_unconverged(stats, "solve_p1")

    def ctx(i, s):
        return ProblemContext(grid=grid, ops=ops, model=model, coupling=coupling)

    return _package_result(engine, stats, ctx)[0]


def solve_p2(
    model: HamiltonianModel,
    coupling: Coupling,
    grid: GridSpec,
    kappa: np.ndarray,
    params: SolverParams | None = None,
    ops: ConstraintOperator | None = None,
    init: tuple | None = None,
) -> SolveResult:
    """As solve_p1 with the density cap m <= kappa; its multiplier is p >= 0."""
    params = params or SolverParams()
    ops = ops or build_operators(grid)
    kappa = np.asarray(kappa, dtype=float)
    if kappa.shape != (grid.n_nodes,):
        raise InfeasibleKappa("kappa must be a nodal field")
    if kappa.min() <= 0.0:
        raise InfeasibleKappa(f"min kappa = {kappa.min()} must be positive")
    if ops.weights @ kappa <= 1.0:
        raise InfeasibleKappa(f"integral of kappa = {ops.weights @ kappa} must exceed 1")
    engine = _Engine(
        grid, ops, [model], [coupling], None, params, box=("per_pop", kappa), init=init
    )
    stats = engine.run()
    _warn_if_unconverged(stats, "solve_p2")

    def ctx(i, s):
        return ProblemContext(grid=grid, ops=ops, model=model, coupling=coupling, kappa=kappa)

    return _package_result(engine, stats, ctx)[0]


def forward_fp_check(
    model: HamiltonianModel,
    grid: GridSpec,
    ops: ConstraintOperator,
    u: np.ndarray,
    damping: float = 0.5,
    max_iters: int = 200,
    tol: float = 1e-12,
) -> np.ndarray:
    """Solve the forward Fokker-Planck problem for the drift induced by u.

    Computes g = grad_xi H(., grad_h u) at nodes and runs a damped Picard
    iteration on the frozen-coefficient linear solve with w = -m g.  This is
    an independent route to the density and is used to cross-validate the
    optimiser's m.
    """
    gu = nodal_gradient(grid, u)
    b = model.b_at(grid.x, grid.y)
    gnorm = np.hypot(gu[:, 0], gu[:, 1])
    scale = np.where(gnorm > 0.0, b * gnorm ** (model.qprime - 2.0), 0.0)
    gx, gy = scale * gu[:, 0], scale * gu[:, 1]
    m = np.full(grid.n_nodes, 1.0 / grid.area)
    change = float("inf")
    for _ in range(max_iters):
        w = np.column_stack([-m * gx, -m * gy])
        m_new = ops.solve_fp(w)
        m_next = damping * m_new + (1.0 - damping) * m
        change = float(np.abs(m_next - m).max())
        m = m_next
        if change <= tol:
            break
    else:
        if change > 1e-9:
            raise FixedPointStalled(f"forward FP Picard stalled at change {change:.3e}")
    return m
