"""Kinetic (perspective) integrand, its conjugate set, projection and prox.

Pointwise objects for the running-cost integrand

    b_q(x, m, w) = m H*(x, -w/m)   (m > 0),   0 at (0,0),   +inf otherwise,

whose convex conjugate in (m, w) is the indicator of

    A(x) = { (alpha, beta) : alpha + H(x, -beta) <= 0 }.

The proximal map of b_q is obtained through the Moreau identity, which
reduces it to the Euclidean projection onto A(x); for the power-family
Hamiltonian that projection is a monotone scalar root-find in t = |beta|,
solved by safeguarded Newton.  All kernels are vectorised over nodes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hamiltonian import HamiltonianModel, grad_hstar, h_value, hstar_value

__all__ = [
    "KineticSample",
    "DualSample",
    "ProjectionIterationError",
    "bq_value",
    "bq_subgradient",
    "project_onto_A",
    "prox_bq",
    "bq_total",
    "bq_value_arrays",
    "project_arrays",
    "prox_arrays",
]

# below this magnitude a density value is treated as exactly zero (subnormal guard)
ZERO_DENSITY = 1e-300

_NEWTON_MAX_ITERS = 200
# one decade below the documented 1e-12 boundary-residual guarantee, so the
# prox jitter sits safely under the solver's iterate-change tolerances
_NEWTON_ATOL = 1e-13


class ProjectionIterationError(RuntimeError):
    """Safeguarded Newton exhausted its iteration budget (pathological input)."""


@dataclass(frozen=True)
class KineticSample:
    m: float
    w: tuple[float, float]


@dataclass(frozen=True)
class DualSample:
    alpha: float
    beta: tuple[float, float]


def bq_value_arrays(b, c, qprime, m, wx, wy):
    """Vectorised b_q.

    Uses the algebraic form b^{1-q}|w|^q / (q m^{q-1}) - c m, which avoids
    forming w/m for tiny positive m.
    """
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    m = np.asarray(m, dtype=float)
    q = qprime / (qprime - 1.0)
    norm = np.sqrt(np.asarray(wx, dtype=float) ** 2 + np.asarray(wy, dtype=float) ** 2)
    mz = np.abs(m) <= ZERO_DENSITY
    pos = ~mz & (m > 0.0)
    safe_m = np.where(pos, m, 1.0)
    with np.errstate(over="ignore"):
        val = b ** (1.0 - q) * norm**q / (q * safe_m ** (q - 1.0)) - c * m
    out = np.where(pos, val, np.where(mz & (norm == 0.0), 0.0, np.inf))
    return out


def bq_value(model: HamiltonianModel, x, m: float, w) -> float:
    """b_q(x, m, w); +inf encodes infeasibility (m < 0, or m = 0 with w != 0)."""
    px, py = np.asarray(x, dtype=float)
    w = np.asarray(w, dtype=float)
    return float(
        bq_value_arrays(model.b_at(px, py), model.c_at(px, py), model.qprime, m, w[0], w[1])
    )


def bq_subgradient(model: HamiltonianModel, x, m: float, w) -> DualSample | None:
    """Subgradient of b_q(x, ., .).

    For m > 0 the function is differentiable with gradient
    (-H(x, -beta), beta), beta = -grad H*(x, -w/m).  At (0, 0) the
    subdifferential is the whole set A(x), signalled by returning ``None``.
    """
    w = np.asarray(w, dtype=float)
    if not np.isfinite(bq_value(model, x, m, w)):
        raise ValueError("bq_subgradient undefined: (m, w) outside dom b_q")
    if abs(m) <= ZERO_DENSITY:
        return None
    beta = -grad_hstar(model, x, -w / m)
    alpha = -h_value(model, x, -beta)
    return DualSample(float(alpha), (float(beta[0]), float(beta[1])))


def project_arrays(b, c, qprime, alpha0, b0x, b0y, strict: bool = True):
    """Euclidean projection onto {alpha + (b/q')|beta|^{q'} + c <= 0}, vectorised.

    On the outside, the projection keeps the direction of beta0 and its
    magnitude t solves the strictly increasing scalar equation

        psi(t) = alpha0 + c + (b/q') t^{q'} - (s - t) / (b t^{q'-1}) = 0

    on (0, s], s = |beta0|.  The solve reparametrises by z = t^{q'-1} and
    clears denominators, which removes every sub-unit exponent, then runs
    safeguarded Newton with a bisection bracket; the boundary residual is
    driven to 1e-12 (relative for large inputs).
    """
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    alpha0 = np.asarray(alpha0, dtype=float)
    b0x = np.asarray(b0x, dtype=float)
    b0y = np.asarray(b0y, dtype=float)
    qp = qprime

    s = np.sqrt(b0x**2 + b0y**2)
    g0 = alpha0 + b / qp * s**qp + c
    out_a = alpha0.copy()
    out_x = b0x.copy()
    out_y = b0y.copy()

    outside = g0 > 0.0
    apex = outside & (s == 0.0)
    out_a[apex] = -np.broadcast_to(c, out_a.shape)[apex]

    mask = outside & (s > 0.0)
    if mask.any():
        ac = alpha0[mask] + np.broadcast_to(c, s.shape)[mask]
        ss = s[mask]
        bb = np.broadcast_to(b, s.shape)[mask]
        q = qp / (qp - 1.0)

        # Substituting z = t^{q'-1} and clearing the denominator b z turns the
        # residual into phi(z) = ac b z + (b^2/q') z^{q+1} + z^{q-1} - s, with
        # the same sign pattern as psi on z > 0 (positive multiplier b z), all
        # exponents >= 1, phi(0) = -s < 0 and phi increasing past the root.
        z_hi = ss ** (qp - 1.0)
        tol = _NEWTON_ATOL * np.maximum(
            1.0, (np.abs(ac) * bb + bb**2 / qp * ss**qp) * z_hi + ss
        )
        eps_hi = 4.0 * np.finfo(float).eps
        lo = np.zeros_like(ss)
        hi = z_hi.copy()
        z = 0.5 * z_hi
        converged = False
        c_lin = ac * bb
        c_top = bb * bb / qp
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            for sweep in range(_NEWTON_MAX_ITERS):
                zq2 = z ** (q - 2.0)           # the only pow per sweep
                zq1 = zq2 * z
                phi = c_lin * z + c_top * zq1 * z * z + zq1 - ss
                neg = phi <= 0.0
                np.copyto(lo, z, where=neg)
                np.copyto(hi, z, where=~neg)
                if np.all((np.abs(phi) <= tol) | (hi - lo <= eps_hi * hi)):
                    converged = True
                    break
                if sweep % 4 == 3:
                    # periodic guaranteed-progress bisection (Newton can cycle)
                    z = 0.5 * (lo + hi)
                    continue
                dphi = c_lin + (q + 1.0) * c_top * zq1 * z + (q - 1.0) * zq2
                z_newton = z - phi / dphi
                bad = ~np.isfinite(z_newton) | (z_newton <= lo) | (z_newton >= hi)
                z = np.where(bad, 0.5 * (lo + hi), z_newton)
        if strict and not converged:
            bad_pts = ~((np.abs(phi) <= tol) | (hi - lo <= eps_hi * hi))
            raise ProjectionIterationError(
                f"projection Newton did not converge at {int(bad_pts.sum())} points"
            )
        t = z ** (q - 1.0)
        nu = (ss - t) / (bb * z)
        out_a[mask] = alpha0[mask] - nu
        scale = t / ss
        out_x[mask] = b0x[mask] * scale
        out_y[mask] = b0y[mask] * scale
    return out_a, out_x, out_y


def project_onto_A(model: HamiltonianModel, x, alpha0: float, beta0) -> DualSample:
    """Project a single dual pair onto A(x)."""
    px, py = np.asarray(x, dtype=float)
    beta0 = np.asarray(beta0, dtype=float)
    a, bx, by = project_arrays(
        model.b_at(px, py),
        model.c_at(px, py),
        model.qprime,
        np.atleast_1d(float(alpha0)),
        np.atleast_1d(beta0[0]),
        np.atleast_1d(beta0[1]),
    )
    return DualSample(float(a[0]), (float(bx[0]), float(by[0])))


def prox_arrays(b, c, qprime, sigma, m_t, wx_t, wy_t):
    """Vectorised prox of sigma * b_q via the Moreau identity.

    prox_{sigma b_q}(z) = z - sigma P_A(z / sigma).  The output is clamped
    into dom b_q: m >= 0 exactly, and w zeroed where m vanishes (both hold
    automatically up to roundoff).
    """
    sigma = np.asarray(sigma, dtype=float)
    m_t = np.asarray(m_t, dtype=float)
    wx_t = np.asarray(wx_t, dtype=float)
    wy_t = np.asarray(wy_t, dtype=float)
    pa, px, py = project_arrays(b, c, qprime, m_t / sigma, wx_t / sigma, wy_t / sigma)
    m = np.maximum(m_t - sigma * pa, 0.0)
    wx = wx_t - sigma * px
    wy = wy_t - sigma * py
    vac = m <= 0.0
    return m, np.where(vac, 0.0, wx), np.where(vac, 0.0, wy)


def prox_bq(model: HamiltonianModel, x, sigma: float, m_tilde: float, w_tilde) -> KineticSample:
    """argmin of b_q(x, m, w) + (1/2 sigma)(|m - m~|^2 + |w - w~|^2)."""
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    px, py = np.asarray(x, dtype=float)
    w_tilde = np.asarray(w_tilde, dtype=float)
    m, wx, wy = prox_arrays(
        model.b_at(px, py),
        model.c_at(px, py),
        model.qprime,
        sigma,
        np.atleast_1d(float(m_tilde)),
        np.atleast_1d(w_tilde[0]),
        np.atleast_1d(w_tilde[1]),
    )
    return KineticSample(float(m[0]), (float(wx[0]), float(wy[0])))


def bq_total(model: HamiltonianModel, grid, m: np.ndarray, w: np.ndarray) -> float:
    """Lumped-quadrature integral of b_q over the grid; +inf if any node infeasible."""
    m = np.asarray(m, dtype=float)
    w = np.asarray(w, dtype=float)
    if m.shape[0] != grid.n_nodes or w.shape != (grid.n_nodes, 2):
        raise ValueError("fields do not match the grid")
    vals = bq_value_arrays(
        model.b_at(grid.x, grid.y), model.c_at(grid.x, grid.y), model.qprime, m, w[:, 0], w[:, 1]
    )
    if not np.all(np.isfinite(vals)):
        return float("inf")
    return float(grid.weights @ vals)


def hstar_at_nodes(model: HamiltonianModel, grid, eta: np.ndarray) -> np.ndarray:
    """Convenience: H*(x_i, eta_i) over all nodes."""
    pts = np.column_stack([grid.x, grid.y])
    return np.asarray(hstar_value(model, pts, eta))
