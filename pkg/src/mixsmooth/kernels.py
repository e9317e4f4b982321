"""Reproducing kernels and null-space bases for the supported spline families.

Three families are provided:

* ``CUBIC`` -- cubic smoothing spline on ``[0, a]`` with null space ``{1, x}``.
* ``EXPONENTIAL`` -- decay-rate spline obtained by fitting a cubic spline in
  the warped coordinate ``xt = (1 - exp(-theta*x))/theta``; reduces exactly
  to the cubic family at ``theta = 0``.
* ``ANOVA`` -- curve-by-treatment decomposition with ``t`` treatment levels,
  weighted kernel ``theta1*K + theta12*(ind[tau1==tau2] - 1/t)*K`` and a
  ``2t``-dimensional null space (interaction columns dropped when additive).

All evaluators are pure functions of immutable inputs and broadcast over
numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "DomainError",
    "SplineFamily",
    "KernelSpec",
    "CovariatePoint",
    "cubic_rk",
    "exp_transform",
    "anova_rk",
    "nullspace_basis",
    "kernel_matrix",
    "nullspace_matrix",
    "nullspace_dim",
]


class DomainError(ValueError):
    """Raised when a covariate or kernel parameter is outside its domain."""


class SplineFamily(str, Enum):
    CUBIC = "cubic"
    EXPONENTIAL = "exponential"
    ANOVA = "anova"


@dataclass(frozen=True)
class KernelSpec:
    """Declarative description of one spline family instance.

    ``domain_upper`` is the right end ``a`` of the covariate interval.
    ``theta`` is the decay rate of the exponential family; ``theta1`` and
    ``theta12`` weight the average-curve and interaction kernel pieces of the
    ANOVA family; ``levels`` is the treatment count ``t``.  ``additive``
    forces ``theta12 = 0`` and drops the per-treatment slope columns from the
    null-space basis.
    """

    family: SplineFamily = SplineFamily.CUBIC
    domain_upper: float = 1.0
    theta: float = 0.0
    theta1: float = 1.0
    theta12: float = 0.0
    levels: int = 1
    additive: bool = False

    def __post_init__(self):
        if not self.domain_upper > 0:
            raise DomainError(f"domain_upper must be > 0, got {self.domain_upper}")
        if self.theta < 0 or self.theta1 < 0 or self.theta12 < 0:
            raise DomainError("kernel weights theta, theta1, theta12 must be >= 0")
        if self.levels < 1:
            raise DomainError(f"levels must be >= 1, got {self.levels}")
        if self.family is SplineFamily.ANOVA and self.levels < 2:
            raise DomainError("anova family needs at least 2 treatment levels")
        if self.additive and self.theta12 != 0.0:
            object.__setattr__(self, "theta12", 0.0)

    def theta_tuple(self) -> tuple:
        """Tunable kernel weights, in optimizer order."""
        if self.family is SplineFamily.EXPONENTIAL:
            return (self.theta,)
        if self.family is SplineFamily.ANOVA:
            return (self.theta1, self.theta12)
        return ()

    def with_theta(self, theta: tuple) -> "KernelSpec":
        """Copy of the spec with tunable weights replaced."""
        if self.family is SplineFamily.EXPONENTIAL:
            (th,) = theta
            return KernelSpec(self.family, self.domain_upper, th, self.theta1,
                              self.theta12, self.levels, self.additive)
        if self.family is SplineFamily.ANOVA:
            th1, th12 = theta
            return KernelSpec(self.family, self.domain_upper, self.theta, th1,
                              th12, self.levels, self.additive)
        if theta:
            raise ValueError("cubic family has no kernel weights")
        return self


@dataclass(frozen=True)
class CovariatePoint:
    """A single covariate value, with a treatment level for the ANOVA family."""

    x: float
    tau: int | None = None


def _check_domain(x, a):
    x = np.asarray(x, dtype=float)
    if np.any(x < 0) or np.any(x > a):
        raise DomainError(f"covariate outside [0, {a}]")
    return x


def cubic_rk(x1, x2, a: float = 1.0):
    """Cubic-spline reproducing kernel on ``[0, a]``.

    Closed form of ``integral_0^a (x1-u)_+ (x2-u)_+ du``: with
    ``m = min(x1, x2)`` the value is ``x1*x2*m - (x1+x2)*m^2/2 + m^3/3``.
    Broadcasts over array inputs.
    """
    if not a > 0:
        raise DomainError(f"domain upper bound must be > 0, got {a}")
    x1 = _check_domain(x1, a)
    x2 = _check_domain(x2, a)
    m = np.minimum(x1, x2)
    return x1 * x2 * m - (x1 + x2) * m**2 / 2.0 + m**3 / 3.0


def exp_transform(x, theta: float):
    """Warp ``x >= 0`` to ``(1 - exp(-theta*x))/theta``; identity at ``theta = 0``.

    The ``theta = 0`` branch is exact, not a numerical limit.  Monotone
    increasing in ``x`` for any ``theta >= 0``.
    """
    if theta < 0:
        raise DomainError(f"theta must be >= 0, got {theta}")
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise DomainError("exp_transform requires x >= 0")
    if theta == 0.0:
        return x if x.ndim else float(x)
    out = -np.expm1(-theta * x) / theta
    return out if out.ndim else float(out)


def _anova_kernel(x1, tau1, x2, tau2, spec: KernelSpec):
    t = spec.levels
    tau1 = np.asarray(tau1)
    tau2 = np.asarray(tau2)
    for tau in (tau1, tau2):
        if np.any(tau < 1) or np.any(tau > t):
            raise DomainError(f"treatment level outside 1..{t}")
    base = cubic_rk(x1, x2, spec.domain_upper)
    same = (tau1 == tau2).astype(float)
    return spec.theta1 * base + spec.theta12 * (same - 1.0 / t) * base


def anova_rk(p1: CovariatePoint, p2: CovariatePoint, spec: KernelSpec) -> float:
    """ANOVA-family kernel at two (x, tau) points."""
    if spec.family is not SplineFamily.ANOVA:
        raise ValueError("anova_rk requires an anova-family spec")
    if p1.tau is None or p2.tau is None:
        raise DomainError("anova kernel needs a treatment level on both points")
    return float(_anova_kernel(p1.x, p1.tau, p2.x, p2.tau, spec))


def kernel_matrix(spec: KernelSpec, x_rows, x_cols, tau_rows=None, tau_cols=None):
    """Kernel cross-matrix with rows at ``x_rows`` and columns at ``x_cols``."""
    x_rows = np.atleast_1d(np.asarray(x_rows, dtype=float))
    x_cols = np.atleast_1d(np.asarray(x_cols, dtype=float))
    xr = x_rows[:, None]
    xc = x_cols[None, :]
    if spec.family is SplineFamily.CUBIC:
        return cubic_rk(xr, xc, spec.domain_upper)
    if spec.family is SplineFamily.EXPONENTIAL:
        _check_domain(x_rows, spec.domain_upper)
        _check_domain(x_cols, spec.domain_upper)
        at = exp_transform(spec.domain_upper, spec.theta)
        return cubic_rk(exp_transform(xr, spec.theta), exp_transform(xc, spec.theta), at)
    if tau_rows is None or tau_cols is None:
        raise DomainError("anova kernel matrix needs treatment levels")
    tr = np.atleast_1d(np.asarray(tau_rows))[:, None]
    tc = np.atleast_1d(np.asarray(tau_cols))[None, :]
    return _anova_kernel(xr, tr, xc, tc, spec)


def nullspace_dim(spec: KernelSpec) -> int:
    """Dimension of the unpenalized function space."""
    if spec.family is SplineFamily.ANOVA:
        t = spec.levels
        return t + 1 if spec.additive else 2 * t
    return 2


def nullspace_matrix(spec: KernelSpec, x, tau=None):
    """Unpenalized basis evaluated row-wise: one row per point.

    Cubic family: ``(1, x)``.  Exponential family: ``(1, xt)`` in the warped
    coordinate.  ANOVA family: ``(1, x, d_1, ..., d_{t-1}, d_1*x, ..., d_{t-1}*x)``
    with treatment contrasts ``d_j = ind[tau == j] - 1/t``; the trailing slope
    block is dropped when additive.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x = _check_domain(x, spec.domain_upper)
    n = x.shape[0]
    if spec.family is SplineFamily.CUBIC:
        return np.column_stack([np.ones(n), x])
    if spec.family is SplineFamily.EXPONENTIAL:
        return np.column_stack([np.ones(n), exp_transform(x, spec.theta)])
    if tau is None:
        raise DomainError("anova basis needs treatment levels")
    tau = np.atleast_1d(np.asarray(tau))
    t = spec.levels
    if np.any(tau < 1) or np.any(tau > t):
        raise DomainError(f"treatment level outside 1..{t}")
    contrasts = np.column_stack(
        [(tau == j).astype(float) - 1.0 / t for j in range(1, t)]
    )
    cols = [np.ones(n), x, contrasts]
    if not spec.additive:
        cols.append(contrasts * x[:, None])
    return np.column_stack(cols)


def nullspace_basis(p: CovariatePoint, spec: KernelSpec) -> np.ndarray:
    """Unpenalized basis vector at a single point."""
    tau = None if p.tau is None else np.array([p.tau])
    return nullspace_matrix(spec, np.array([p.x]), tau)[0]
