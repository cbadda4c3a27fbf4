"""Power-family Hamiltonians with closed-form Legendre transforms.

The model implemented here is

    H(x, xi) = (b(x)/q') |xi|^{q'} + c(x),      1 < q' < 2,

with spatially varying coefficients ``b > 0`` and ``c``.  Its conjugate,
both gradient maps and the growth constants are available in closed form,
which keeps every proximal computation downstream exact.  The dual
exponent is q = q'/(q'-1) > 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

__all__ = [
    "CoefficientField",
    "HamiltonianModel",
    "GrowthReport",
    "h_value",
    "hstar_value",
    "grad_h",
    "grad_hstar",
    "validate_growth",
]

Coefficient = Union[float, "CoefficientField", Callable[[np.ndarray, np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class CoefficientField:
    """Closed-form coefficient a0 + a1*cos(pi*x) + a2*cos(pi*y)."""

    a0: float
    a1: float = 0.0
    a2: float = 0.0

    def __call__(self, x, y):
        return self.a0 + self.a1 * np.cos(np.pi * np.asarray(x)) + self.a2 * np.cos(np.pi * np.asarray(y))

    def bounds(self) -> tuple[float, float]:
        """Interval certainly containing the range (cosines in [-1, 1])."""
        spread = abs(self.a1) + abs(self.a2)
        return self.a0 - spread, self.a0 + spread


def _as_callable(coef: Coefficient) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    if callable(coef):
        return coef
    value = float(coef)
    return lambda x, y: np.full_like(np.asarray(x, dtype=float), value)


def _sample_range(coef: Coefficient, domain: tuple[float, float], samples: int = 257) -> tuple[float, float]:
    if isinstance(coef, CoefficientField):
        return coef.bounds()
    if not callable(coef):
        v = float(coef)
        return v, v
    xs = np.linspace(0.0, domain[0], samples)
    ys = np.linspace(0.0, domain[1], samples)
    X, Y = np.meshgrid(xs, ys)
    vals = np.asarray(coef(X, Y), dtype=float)
    return float(vals.min()), float(vals.max())


@dataclass(frozen=True)
class HamiltonianModel:
    """H(x, xi) = (b(x)/q')|xi|^{q'} + c(x) with declared growth constants.

    ``growth_C1 >= max(max b, 1/min b)`` and ``growth_C2 >= max |c|`` make the
    two-sided power growth bounds hold for the whole family; ``validate_growth``
    re-checks them by sampling.
    """

    qprime: float
    b: Coefficient = 1.0
    c: Coefficient = 0.0
    growth_C1: float = 1.0
    growth_C2: float = 0.0
    domain: tuple[float, float] = (1.0, 1.0)
    b_range: tuple[float, float] = field(default=(1.0, 1.0), repr=False)
    c_range: tuple[float, float] = field(default=(0.0, 0.0), repr=False)

    @property
    def q(self) -> float:
        return self.qprime / (self.qprime - 1.0)

    @staticmethod
    def create(
        qprime: float,
        b: Coefficient = 1.0,
        c: Coefficient = 0.0,
        C1: float | None = None,
        C2: float | None = None,
        domain: tuple[float, float] = (1.0, 1.0),
    ) -> "HamiltonianModel":
        """Build a validated model; growth constants default to sufficient values."""
        if not (1.0 < qprime < 2.0):
            raise ValueError(
                f"qprime must lie in (1, 2) so that q = q'/(q'-1) > 2 = d; got {qprime}"
            )
        b_lo, b_hi = _sample_range(b, domain)
        c_lo, c_hi = _sample_range(c, domain)
        if b_lo <= 0.0:
            raise ValueError(f"coefficient b must be strictly positive; sampled min {b_lo}")
        if C1 is None:
            C1 = max(b_hi, 1.0 / b_lo, 1.0)
        if C2 is None:
            C2 = max(abs(c_lo), abs(c_hi))
        return HamiltonianModel(
            qprime=float(qprime),
            b=b,
            c=c,
            growth_C1=float(C1),
            growth_C2=float(C2),
            domain=domain,
            b_range=(b_lo, b_hi),
            c_range=(c_lo, c_hi),
        )

    def b_at(self, x, y) -> np.ndarray:
        return np.asarray(_as_callable(self.b)(x, y), dtype=float)

    def c_at(self, x, y) -> np.ndarray:
        return np.asarray(_as_callable(self.c)(x, y), dtype=float)


def _split_point(x) -> tuple[np.ndarray, np.ndarray]:
    pt = np.asarray(x, dtype=float)
    return pt[..., 0], pt[..., 1]


def h_value(model: HamiltonianModel, x, xi) -> float | np.ndarray:
    """H(x, xi) = (b/q')|xi|^{q'} + c."""
    px, py = _split_point(x)
    xi = np.asarray(xi, dtype=float)
    norm = np.sqrt(np.sum(xi * xi, axis=-1))
    val = model.b_at(px, py) / model.qprime * norm**model.qprime + model.c_at(px, py)
    return val if val.ndim else float(val)


def hstar_value(model: HamiltonianModel, x, eta) -> float | np.ndarray:
    """Legendre transform H*(x, eta) = b^{1-q}|eta|^q / q - c."""
    px, py = _split_point(x)
    eta = np.asarray(eta, dtype=float)
    norm = np.sqrt(np.sum(eta * eta, axis=-1))
    q = model.q
    val = model.b_at(px, py) ** (1.0 - q) * norm**q / q - model.c_at(px, py)
    return val if val.ndim else float(val)


def grad_h(model: HamiltonianModel, x, xi) -> np.ndarray:
    """grad_xi H = b |xi|^{q'-2} xi, continued by 0 at xi = 0 (q' > 1)."""
    px, py = _split_point(x)
    xi = np.asarray(xi, dtype=float)
    norm = np.sqrt(np.sum(xi * xi, axis=-1))
    # |xi|^{q'-2} diverges at 0; the product tends to 0, so guard the base.
    safe = np.where(norm > 0.0, norm, 1.0)
    scale = model.b_at(px, py) * safe ** (model.qprime - 2.0)
    scale = np.where(norm > 0.0, scale, 0.0)
    return scale[..., None] * xi


def grad_hstar(model: HamiltonianModel, x, eta) -> np.ndarray:
    """grad_eta H* = b^{1-q} |eta|^{q-2} eta; inverse map of grad_h."""
    px, py = _split_point(x)
    eta = np.asarray(eta, dtype=float)
    norm = np.sqrt(np.sum(eta * eta, axis=-1))
    safe = np.where(norm > 0.0, norm, 1.0)
    scale = model.b_at(px, py) ** (1.0 - model.q) * safe ** (model.q - 2.0)
    scale = np.where(norm > 0.0, scale, 0.0)
    return scale[..., None] * eta


@dataclass
class GrowthReport:
    passed: bool
    worst_slack: float
    witness: tuple | None
    samples: int

    def __bool__(self) -> bool:
        return self.passed


def validate_growth(model: HamiltonianModel, sample_count: int, seed: int = 0) -> GrowthReport:
    """Sample (x, xi) pairs and check both growth bounds for H and for H*.

    Slack is the signed margin of the tightest inequality; a negative worst
    slack means the declared (C1, C2) fail, and the witness records where.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    rng = np.random.default_rng(seed)
    Lx, Ly = model.domain
    pts = np.column_stack([rng.uniform(0, Lx, sample_count), rng.uniform(0, Ly, sample_count)])
    # magnitudes spread over several decades so both small- and large-|xi| behaviour get hit
    mags = 10.0 ** rng.uniform(-3, 2, sample_count)
    angles = rng.uniform(0, 2 * math.pi, sample_count)
    vecs = mags[:, None] * np.column_stack([np.cos(angles), np.sin(angles)])

    qp, q = model.qprime, model.q
    C1, C2 = model.growth_C1, model.growth_C2
    norm = mags

    h = np.asarray(h_value(model, pts, vecs))
    hs = np.asarray(hstar_value(model, pts, vecs))
    slacks = np.column_stack(
        [
            C1 / qp * norm**qp + C2 - h,                      # H upper
            h - (norm**qp / (qp * C1) - C2),                  # H lower
            C1 ** (q - 1.0) / q * norm**q + C2 - hs,          # H* upper
            hs - (C1 ** (1.0 - q) / q * norm**q - C2),        # H* lower
        ]
    )
    worst = float(slacks.min())
    if worst >= -1e-12:
        return GrowthReport(True, worst, None, sample_count)
    i, j = np.unravel_index(int(np.argmin(slacks)), slacks.shape)
    which = ("H upper", "H lower", "H* upper", "H* lower")[j]
    witness = (which, tuple(pts[i]), tuple(vecs[i]), float(slacks[i, j]))
    return GrowthReport(False, worst, witness, sample_count)
