"""Coupling functionals and their Gateaux derivatives.

Four families:

* ``zero`` — no coupling.
* ``local_primitive`` — F(x, z) = integral of f(x, .) from 0 to z with
  f(x, z) = coeff * sign * |z|^r + offset(x).
* ``gradient_dependent`` — Dirichlet energy (weight/2) int |grad m|^2,
  realised exactly through the stiffness form, plus an optional local part.
* ``nonlocal_convolution`` — F evaluated on mollified fields over the eroded
  domain, with an optional quadratic term in the convolved gradient.

Derivatives are returned as representers g in the lumped inner product:
<g, z>_omega equals the directional derivative for every nodal direction z.
A joint multipopulation potential (quadratic plus per-slot powers) lives here
too, since its frozen single-population slices are local couplings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.signal import convolve2d

from .discretization import ConstraintOperator, GridSpec, _gradient_matrices

__all__ = [
    "Coupling",
    "ZeroCoupling",
    "LocalCoupling",
    "DirichletCoupling",
    "NonlocalCoupling",
    "MultipopPotential",
    "AdmissibilityReport",
    "coupling_value",
    "coupling_derivative",
    "check_admissibility",
]


class Coupling:
    """Interface for single-population coupling functionals."""

    convex: bool = False

    def value(self, grid: GridSpec, m: np.ndarray) -> float:
        raise NotImplementedError

    def derivative(self, grid: GridSpec, m: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def lipschitz_hint(self, grid: GridSpec, m: np.ndarray) -> float:
        """Lipschitz bound for the representer map m -> derivative(m) in sup norm."""
        raise NotImplementedError

    def lower_bound(self, grid: GridSpec, R: float) -> float:
        """A constant C_R with value(m) >= C_R whenever 0 <= m <= R (sampled)."""
        raise NotImplementedError

    def global_lower_bound(self, grid: GridSpec) -> float | None:
        """Lower bound over all m >= 0, or None when unbounded below."""
        return None


class ZeroCoupling(Coupling):
    convex = True

    def value(self, grid, m):
        return 0.0

    def derivative(self, grid, m):
        return np.zeros(grid.n_nodes)

    def lipschitz_hint(self, grid, m):
        return 0.0

    def lower_bound(self, grid, R):
        return 0.0

    def global_lower_bound(self, grid):
        return 0.0


@dataclass
class LocalCoupling(Coupling):
    """f(x, z) = coeff * sign * |z|^r + offset(x); F is its primitive in z."""

    r: float = 1.0
    sign: float = 1.0
    coeff: float = 1.0
    offset: np.ndarray | float | None = None

    def __post_init__(self):
        if self.r < 0:
            raise ValueError("exponent r must be >= 0")
        if self.sign not in (-1.0, 1.0):
            raise ValueError("sign must be +-1")

    def _offset_at(self, grid) -> np.ndarray:
        if self.offset is None:
            return np.zeros(grid.n_nodes)
        if np.isscalar(self.offset):
            return np.full(grid.n_nodes, float(self.offset))
        return np.asarray(self.offset, dtype=float)

    def f(self, grid: GridSpec, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return self.coeff * self.sign * np.abs(z) ** self.r + self._offset_at(grid)

    def primitive(self, grid: GridSpec, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return (
            self.coeff * self.sign * z * np.abs(z) ** self.r / (self.r + 1.0)
            + self._offset_at(grid) * z
        )

    @property
    def convex(self) -> bool:  # type: ignore[override]
        # convex on m >= 0 iff f is non-decreasing there
        return self.coeff * self.sign >= 0.0

    def value(self, grid, m):
        return float(grid.weights @ self.primitive(grid, m))

    def derivative(self, grid, m):
        return self.f(grid, m)

    def lipschitz_hint(self, grid, m):
        scale = abs(self.coeff)
        if self.r == 1.0:
            return scale
        if self.r == 0.0:
            return 0.0
        mmax = float(np.abs(m).max(initial=0.0))
        return scale * self.r * (mmax + 1.0) ** (self.r - 1.0)

    def lower_bound(self, grid, R):
        zs = np.linspace(0.0, R, 513)
        vals = self.primitive(grid, zs[:, None] * np.ones(grid.n_nodes)[None, :])
        per_node = vals.min(axis=0)
        return float(grid.weights @ np.minimum(per_node, 0.0))

    def global_lower_bound(self, grid):
        # principal term sign*z^{r+1}: unbounded below on z >= 0 when sign < 0
        if self.sign * self.coeff < 0.0 and self.coeff != 0.0:
            return None
        off = self._offset_at(grid)
        if np.all(off >= 0.0):
            return 0.0
        if self.coeff * self.sign > 0.0 and self.r > 0.0:
            # pointwise min of c z^{r+1}/(r+1) + off z over z >= 0 is finite
            zstar = (np.maximum(-off, 0.0) / (self.coeff)) ** (1.0 / self.r)
            vals = self.coeff * self.sign * zstar ** (self.r + 1.0) / (self.r + 1.0) + off * zstar
            return float(grid.weights @ np.minimum(vals, 0.0))
        return None  # pure linear with negative offset is unbounded below


@dataclass
class DirichletCoupling(Coupling):
    """(weight/2) int |grad m|^2, via the exact stiffness quadratic form."""

    ops: ConstraintOperator
    weight: float = 1.0
    local: LocalCoupling | None = None
    _norm_A: float | None = field(default=None, repr=False)

    convex = True

    def value(self, grid, m):
        v = 0.5 * self.weight * float(m @ (self.ops.A @ m))
        if self.local is not None:
            v += self.local.value(grid, m)
        return v

    def derivative(self, grid, m):
        g = self.weight * (self.ops.A @ m) / grid.weights
        if self.local is not None:
            g = g + self.local.f(grid, m)
        return g

    def lipschitz_hint(self, grid, m):
        if self._norm_A is None:
            # power iteration on D^-1 A (the representer map's matrix)
            v = np.ones(grid.n_nodes) + np.linspace(0, 1, grid.n_nodes)
            v /= np.linalg.norm(v)
            for _ in range(30):
                v = (self.ops.A @ v) / grid.weights
                nv = np.linalg.norm(v)
                v /= nv
            object.__setattr__ if False else setattr(self, "_norm_A", float(nv) * 1.05)
        L = self.weight * self._norm_A
        if self.local is not None:
            L += self.local.lipschitz_hint(grid, m)
        return L

    def lower_bound(self, grid, R):
        lb = 0.0
        if self.local is not None:
            lb += self.local.lower_bound(grid, R)
        return lb

    def global_lower_bound(self, grid):
        if self.local is None:
            return 0.0
        lb = self.local.global_lower_bound(grid)
        return None if lb is None else lb


def _bump_kernel(grid: GridSpec, eps: float) -> np.ndarray:
    """Smooth bump supported on |x| < eps, sampled on grid offsets, unit discrete mass."""
    kx = int(np.floor(eps / grid.hx + 1e-12))
    ky = int(np.floor(eps / grid.hy + 1e-12))
    if kx < 1 or ky < 1:
        raise ValueError("kernel radius eps smaller than one grid spacing")
    ox = np.arange(-kx, kx + 1) * grid.hx
    oy = np.arange(-ky, ky + 1) * grid.hy
    OX, OY = np.meshgrid(ox, oy)
    r2 = (OX**2 + OY**2) / eps**2
    with np.errstate(divide="ignore", over="ignore"):
        k = np.where(r2 < 1.0, np.exp(-1.0 / np.maximum(1.0 - r2, 1e-300)), 0.0)
    k /= k.sum() * grid.hx * grid.hy
    return k


@dataclass
class NonlocalCoupling(Coupling):
    """F(x, rho0*m) (+ quadratic in convolved gradients) over the eroded domain.

    The local profile is applied to the mollified density; the erosion keeps
    every kernel translate inside the domain, so plain zero-padded
    convolution is exact on the retained nodes.
    """

    grid: GridSpec
    eps: float
    local: LocalCoupling
    grad_weight: float = 0.0

    def __post_init__(self):
        g = self.grid
        self.kernel = _bump_kernel(g, self.eps)
        x, y = g.x, g.y
        self.mask = (
            (np.minimum(x, g.Lx - x) >= self.eps - 1e-12)
            & (np.minimum(y, g.Ly - y) >= self.eps - 1e-12)
        )
        if not self.mask.any():
            raise ValueError("erosion removed every node; eps too large for this grid")

    @property
    def convex(self) -> bool:  # type: ignore[override]
        return self.local.convex and self.grad_weight >= 0.0

    def _conv(self, field: np.ndarray, kernel: np.ndarray) -> np.ndarray:
        g = self.grid
        arr = field.reshape(g.Ny + 1, g.Nx + 1)
        return convolve2d(arr, kernel, mode="same", boundary="fill").ravel() * (g.hx * g.hy)

    def value(self, grid, m):
        sm = self._conv(m, self.kernel)
        om = grid.weights * self.mask
        v = float(om @ self.local.primitive(grid, sm))
        if self.grad_weight != 0.0:
            Gx, Gy = _gradient_matrices(grid)
            gx = self._conv(Gx @ m, self.kernel)
            gy = self._conv(Gy @ m, self.kernel)
            v += 0.5 * self.grad_weight * float(om @ (gx**2 + gy**2))
        return v

    def derivative(self, grid, m):
        om = grid.weights * self.mask
        sm = self._conv(m, self.kernel)
        kflip = self.kernel[::-1, ::-1]
        g = self._conv(om * self.local.f(grid, sm), kflip)
        if self.grad_weight != 0.0:
            Gx, Gy = _gradient_matrices(grid)
            gx = self._conv(Gx @ m, self.kernel)
            gy = self._conv(Gy @ m, self.kernel)
            g = g + Gx.T @ self._conv(self.grad_weight * om * gx, kflip)
            g = g + Gy.T @ self._conv(self.grad_weight * om * gy, kflip)
        return g / grid.weights

    def lipschitz_hint(self, grid, m):
        # kernel has unit L1 mass, so mollification is sup-norm non-expansive
        L = self.local.lipschitz_hint(grid, np.abs(m))
        if self.grad_weight != 0.0:
            Gx, _ = _gradient_matrices(grid)
            L += self.grad_weight * (2.0 / min(grid.hx, grid.hy)) ** 2
        return L

    def lower_bound(self, grid, R):
        return self.local.lower_bound(grid, R)

    def global_lower_bound(self, grid):
        return self.local.global_lower_bound(grid)


@dataclass
class MultipopPotential:
    """F(x, zeta) = 0.5 zeta'Q zeta + a . zeta + sum_i pow_i(zeta_i).

    ``partial(i, ...)`` is d/dzeta_i F, the coupling f^i of population i.
    """

    Q: np.ndarray
    a: np.ndarray | None = None
    powers: Sequence[LocalCoupling] | None = None

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        if self.Q.ndim != 2 or self.Q.shape[0] != self.Q.shape[1]:
            raise ValueError("Q must be a square matrix")
        if not np.allclose(self.Q, self.Q.T):
            raise ValueError("Q must be symmetric (potential structure)")
        self.N = self.Q.shape[0]
        if self.a is None:
            self.a = np.zeros(self.N)
        self.a = np.asarray(self.a, dtype=float)
        if self.powers is not None and len(self.powers) != self.N:
            raise ValueError("need one power term per population")

    @property
    def convex(self) -> bool:
        eig = np.linalg.eigvalsh(self.Q)
        pw = all(p.convex for p in self.powers) if self.powers else True
        return bool(eig.min() >= -1e-12) and pw

    def value(self, grid: GridSpec, ms: Sequence[np.ndarray]) -> float:
        Z = np.stack(ms)  # (N, n)
        dens = 0.5 * np.einsum("in,ij,jn->n", Z, self.Q, Z) + self.a @ Z
        v = float(grid.weights @ dens)
        if self.powers:
            for p, m in zip(self.powers, ms):
                v += float(grid.weights @ (p.primitive(grid, m) - p._offset_at(grid) * m))
        return v

    def partial(self, grid: GridSpec, i: int, ms: Sequence[np.ndarray]) -> np.ndarray:
        Z = np.stack(ms)
        g = self.Q[i] @ Z + self.a[i]
        if self.powers:
            p = self.powers[i]
            g = g + p.f(grid, ms[i]) - p._offset_at(grid)
        return g

    def representers(self, grid: GridSpec, ms: Sequence[np.ndarray]) -> list[np.ndarray]:
        return [self.partial(grid, i, ms) for i in range(self.N)]

    def lipschitz_hint(self, grid: GridSpec, ms: Sequence[np.ndarray]) -> float:
        L = float(np.abs(np.linalg.eigvalsh(self.Q)).max())
        if self.powers:
            L += max(p.lipschitz_hint(grid, m) for p, m in zip(self.powers, ms))
        return L

    def frozen(self, grid: GridSpec, i: int, ms: Sequence[np.ndarray]) -> LocalCoupling:
        """Slice in slot i with the other densities frozen: a local coupling.

        f(x, z) = Q_ii z + [sum_{j != i} Q_ij m_j(x) + a_i] + pow_i terms.
        The per-slot power term is merged when present and Q_ii = 0 is fine.
        """
        offset = self.a[i] + sum(self.Q[i, j] * ms[j] for j in range(self.N) if j != i)
        if self.powers and (self.powers[i].coeff != 0.0):
            p = self.powers[i]
            if self.Q[i, i] != 0.0:
                raise ValueError("cannot merge quadratic and power terms in one slot")
            return LocalCoupling(r=p.r, sign=p.sign, coeff=p.coeff, offset=offset + p._offset_at(grid))
        return LocalCoupling(r=1.0, sign=1.0, coeff=self.Q[i, i], offset=offset)

    def global_lower_bound(self, grid: GridSpec) -> float | None:
        eig = np.linalg.eigvalsh(self.Q)
        if eig.min() >= 0.0 and np.all(self.a >= 0.0):
            lb = 0.0
            if self.powers:
                for p in self.powers:
                    p_lb = p.global_lower_bound(grid)
                    if p_lb is None:
                        return None
                    lb += p_lb
            return lb
        return None


# -- spec-level convenience functions ----------------------------------------


def coupling_value(spec: Coupling, grid: GridSpec, m: np.ndarray) -> float:
    return spec.value(grid, np.asarray(m, dtype=float))


def coupling_derivative(spec: Coupling, grid: GridSpec, m: np.ndarray) -> np.ndarray:
    return spec.derivative(grid, np.asarray(m, dtype=float))


@dataclass
class AdmissibilityReport:
    min_primitive: float
    max_abs_f: float
    monotone: bool
    globally_bounded_below: bool
    C_R: float
    trend_note: str

    def admissible_p1(self) -> bool:
        return self.globally_bounded_below

    def admissible_p2(self) -> bool:
        return np.isfinite(self.C_R)


def check_admissibility(spec: Coupling, grid: GridSpec, R: float) -> AdmissibilityReport:
    """Sample-based certificates for the coupling growth hypotheses.

    Local profiles are sampled on z in [0, R] for the primitive lower bound
    and the |f| bound, and on [0, 10 R] for the global-bound trend; the
    monotone flag feeds the uniqueness and multipopulation hypotheses.
    Report-only: existence hypotheses remain the caller's responsibility.
    """
    if R <= 0:
        raise ValueError("R must be positive")
    local = None
    if isinstance(spec, LocalCoupling):
        local = spec
    elif isinstance(spec, (DirichletCoupling, NonlocalCoupling)):
        local = spec.local
    if local is None:
        bounded = spec.global_lower_bound(grid) is not None
        return AdmissibilityReport(0.0, 0.0, True, bounded, spec.lower_bound(grid, R), "no local profile")

    zs = np.linspace(0.0, R, 1025)
    ones = np.ones(grid.n_nodes)
    F = local.primitive(grid, zs[:, None] * ones[None, :])
    f = local.f(grid, zs[:, None] * ones[None, :])
    min_primitive = float(F.min())
    max_abs_f = float(np.abs(f).max())
    monotone = bool(np.all(np.diff(f, axis=0) >= -1e-12))

    zs_far = np.linspace(0.0, 10.0 * R, 257)
    F_far = local.primitive(grid, zs_far[:, None] * ones[None, :])
    tail = F_far.min(axis=1)
    decreasing_tail = tail[-1] < tail[len(tail) // 2] - 1e-12
    analytic = spec.global_lower_bound(grid)
    globally_bounded = analytic is not None if analytic is not None or decreasing_tail else True
    trend = "primitive decreasing at 10R; no global lower bound" if decreasing_tail else "primitive bounded on sampled range"
    return AdmissibilityReport(
        min_primitive,
        max_abs_f,
        monotone,
        bool(globally_bounded),
        spec.lower_bound(grid, R),
        trend,
    )
