"""Block normal-equation solver and dense fitted-value operators.

The penalized least squares problem is solved through the symmetric block
system

    [ R'R + n*lambda*Q   R'Z         ] [c]   [R'y]
    [ Z'R                Z'Z + Sigma ] [b] = [Z'y]

factored by symmetric eigendecomposition with a relative eigenvalue cutoff
(Moore-Penrose semantics; the penalty block is rank deficient by
construction).  ``NormalEquations`` caches the data-dependent cross-products
so repeated solves during a parameter search cost O((q+p)^3) regardless of n.

Dense n-by-n operators are provided for testing and diagnostics, each in two
algebraically equal but independently computed forms:

* ``smoothing_matrix_dense`` / ``eta_matrix_dense`` build on the
  no-random-effect hat matrix ``abar_dense`` plus a p-by-p correction;
* ``smoothing_matrix_from_blocks`` / ``eta_matrix_from_blocks`` eliminate the
  random-effect block first (Schur-complement form).

Numerical note: pseudoinverses are applied as factors ``V diag(1/w) V'`` to
the target matrix; materializing the inverse and multiplying afterwards loses
several digits on ill-conditioned kernel Grams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .design import DesignMatrices, sigma_diag

__all__ = [
    "NumericError",
    "SmoothParams",
    "FitResult",
    "NormalEquations",
    "solve_fit",
    "pseudo_inverse",
    "abar_dense",
    "eta_matrix_dense",
    "smoothing_matrix_dense",
    "eta_matrix_from_blocks",
    "smoothing_matrix_from_blocks",
    "penalized_objective",
]

# Relative eigenvalue cutoff for Moore-Penrose truncation.  Must sit well
# below the smallest resolvable penalized eigenvalue: a looser cutoff (1e-12)
# truncates small-lambda full-basis fits so hard that the cross-validation
# score develops spurious minima at the lambda grid floor.
PINV_REL_TOL = 1e-14


class NumericError(RuntimeError):
    """System assembly or factorization produced non-finite values."""


@dataclass(frozen=True)
class SmoothParams:
    """Tunable parameters: log10 smoothing level, Sigma exponents, kernel weights."""

    log10_lambda: float
    gamma: tuple = ()
    kernel_theta: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))
        object.__setattr__(self, "kernel_theta",
                           tuple(float(t) for t in self.kernel_theta))

    @property
    def lam(self) -> float:
        return 10.0 ** self.log10_lambda


@dataclass
class FitResult:
    c_hat: np.ndarray
    b_hat: np.ndarray
    eta_hat: np.ndarray
    y_hat: np.ndarray
    residuals: np.ndarray
    tr_a: float
    tr_a2: float
    rss: float
    params: SmoothParams
    n: int


def _check_params(dm: DesignMatrices, sp: SmoothParams):
    if sp.kernel_theta and sp.kernel_theta != dm.kernel_theta:
        raise ValueError(f"design was built with kernel weights {dm.kernel_theta}, "
                         f"params carry {sp.kernel_theta}; rebuild the design")


class _EighPinv:
    """Eigendecomposition of a symmetric PSD matrix with a relative cutoff."""

    def __init__(self, mat: np.ndarray, rel_tol: float | None = None):
        if rel_tol is None:
            rel_tol = PINV_REL_TOL
        sym = (mat + mat.T) / 2.0
        if sym.size and not np.all(np.isfinite(sym)):
            raise NumericError("non-finite entries in the system matrix")
        self.mat = sym
        if sym.shape[0] == 0:
            self.vecs = np.zeros((0, 0))
            self.inv_w = np.zeros(0)
            return
        w, v = np.linalg.eigh(sym)
        cut = rel_tol * np.max(np.abs(w))
        self.vecs = v
        self.inv_w = np.where(np.abs(w) > cut, 1.0 / np.where(w == 0.0, 1.0, w), 0.0)

    def apply(self, b: np.ndarray, refine: int = 1) -> np.ndarray:
        """Least-norm solution of ``mat @ x = b`` with iterative refinement."""
        v, inv_w = self.vecs, self.inv_w
        if b.ndim == 1:
            x = v @ (inv_w * (v.T @ b))
            for _ in range(refine):
                x = x + v @ (inv_w * (v.T @ (b - self.mat @ x)))
            return x
        x = v @ (inv_w[:, None] * (v.T @ b))
        for _ in range(refine):
            x = x + v @ (inv_w[:, None] * (v.T @ (b - self.mat @ x)))
        return x

    def materialize(self) -> np.ndarray:
        return (self.vecs * self.inv_w) @ self.vecs.T


def pseudo_inverse(m: np.ndarray, rel_tol: float | None = None) -> np.ndarray:
    """Moore-Penrose inverse of a symmetric PSD matrix.

    Eigenvalues of magnitude below ``rel_tol`` times the largest are treated
    as zero.  Asymmetry beyond a small tolerance is rejected rather than
    silently symmetrized.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("pseudo_inverse needs a square matrix")
    if m.size:
        scale = max(1.0, float(np.max(np.abs(m))))
        if float(np.max(np.abs(m - m.T))) > 1e-10 * scale:
            raise ValueError("matrix is not symmetric within tolerance")
    return _EighPinv(m, rel_tol).materialize()


class NormalEquations:
    """Cached cross-products for repeated solves on one (design, response) pair."""

    def __init__(self, dm: DesignMatrices, y: np.ndarray):
        y = np.asarray(y, dtype=float)
        if y.shape != (dm.n,):
            raise ValueError(f"y must have length {dm.n}")
        if not np.all(np.isfinite(y)):
            raise ValueError("y contains non-finite values")
        self.dm = dm
        self.y = y
        R, Z = dm.R, dm.Z
        self.RtR = R.T @ R
        self.RtZ = R.T @ Z
        self.ZtZ = Z.T @ Z
        self.rhs = np.concatenate([R.T @ y, Z.T @ y])
        k = dm.q + dm.p
        self.WtW = np.zeros((k, k))
        self.WtW[:dm.q, :dm.q] = self.RtR
        self.WtW[:dm.q, dm.q:] = self.RtZ
        self.WtW[dm.q:, :dm.q] = self.RtZ.T
        self.WtW[dm.q:, dm.q:] = self.ZtZ

    def _system(self, sp: SmoothParams) -> np.ndarray:
        dm = self.dm
        C = self.WtW.copy()
        C[:dm.q, :dm.q] += dm.n * sp.lam * dm.Q
        if dm.p:
            C[dm.q:, dm.q:] += np.diag(sigma_diag(sp.gamma, dm))
        return C

    def solve(self, sp: SmoothParams) -> FitResult:
        dm = self.dm
        _check_params(dm, sp)
        fac = _EighPinv(self._system(sp))
        coef = fac.apply(self.rhs)
        c_hat, b_hat = coef[:dm.q], coef[dm.q:]
        eta_hat = dm.R @ c_hat
        y_hat = eta_hat + dm.Z @ b_hat
        residuals = self.y - y_hat
        rss = float(residuals @ residuals)
        hat_coef = fac.apply(self.WtW, refine=0)
        tr_a = float(np.trace(hat_coef))
        tr_a2 = float(np.sum(hat_coef * hat_coef.T))
        return FitResult(c_hat=c_hat, b_hat=b_hat, eta_hat=eta_hat, y_hat=y_hat,
                         residuals=residuals, tr_a=tr_a, tr_a2=tr_a2, rss=rss,
                         params=sp, n=dm.n)


def solve_fit(dm: DesignMatrices, y: np.ndarray, sp: SmoothParams) -> FitResult:
    """One-shot penalized least squares solve; see ``NormalEquations``."""
    return NormalEquations(dm, y).solve(sp)


def _solve_spd(H: np.ndarray, B: np.ndarray) -> np.ndarray:
    # Sigma > 0 makes H positive definite in exact arithmetic; fall back to
    # the pseudoinverse if a borderline case defeats the Cholesky factor.
    try:
        L = np.linalg.cholesky(H)
        return np.linalg.solve(L.T, np.linalg.solve(L, B))
    except np.linalg.LinAlgError:
        return _EighPinv(H).apply(B)


def abar_dense(dm: DesignMatrices, log10_lambda: float) -> np.ndarray:
    """Hat matrix of the fixed-effect fit alone (no random effects)."""
    lam = 10.0 ** log10_lambda
    fac = _EighPinv(dm.R.T @ dm.R + dm.n * lam * dm.Q)
    return dm.R @ fac.apply(dm.R.T)


def _abar_parts(dm: DesignMatrices, sp: SmoothParams):
    abar = abar_dense(dm, sp.log10_lambda)
    Z = dm.Z
    ia_z = Z - abar @ Z
    H = Z.T @ ia_z + np.diag(sigma_diag(sp.gamma, dm))
    return abar, ia_z, H


def smoothing_matrix_dense(dm: DesignMatrices, sp: SmoothParams) -> np.ndarray:
    """Hat matrix mapping y to fitted values, via the no-random-effect form.

    Equals ``abar + (I-abar) Z (Z'(I-abar)Z + Sigma)^(-1) Z'(I-abar)``;
    symmetric with eigenvalues in [0, 1].
    """
    _check_params(dm, sp)
    abar, ia_z, H = _abar_parts(dm, sp)
    if dm.p == 0:
        return abar
    return abar + ia_z @ _solve_spd(H, ia_z.T)


def eta_matrix_dense(dm: DesignMatrices, sp: SmoothParams) -> np.ndarray:
    """Matrix mapping y to the smooth component, via the no-random-effect form.

    Equals ``abar - abar Z (Z'(I-abar)Z + Sigma)^(-1) Z'(I-abar)``.
    """
    _check_params(dm, sp)
    abar, ia_z, H = _abar_parts(dm, sp)
    if dm.p == 0:
        return abar
    return abar - (abar @ dm.Z) @ _solve_spd(H, ia_z.T)


def _block_parts(dm: DesignMatrices, sp: SmoothParams):
    Z = dm.Z
    D = Z.T @ Z + np.diag(sigma_diag(sp.gamma, dm))
    Dinv_Zt = _solve_spd(D, Z.T) if dm.p else np.zeros((0, dm.n))
    proj = np.eye(dm.n) - Z @ Dinv_Zt           # I - Z D^(-1) Z'
    E = dm.R.T @ proj @ dm.R + dm.n * sp.lam * dm.Q
    e_apply_Rt = _EighPinv(E).apply(dm.R.T)      # E^+ R'
    return proj, e_apply_Rt


def eta_matrix_from_blocks(dm: DesignMatrices, sp: SmoothParams) -> np.ndarray:
    """Smooth-component matrix ``R E^+ R' (I - Z D^(-1) Z')`` with
    ``D = Z'Z + Sigma`` and ``E`` the Schur complement of the block system."""
    _check_params(dm, sp)
    proj, e_apply_Rt = _block_parts(dm, sp)
    return dm.R @ e_apply_Rt @ proj


def smoothing_matrix_from_blocks(dm: DesignMatrices, sp: SmoothParams) -> np.ndarray:
    """Hat matrix ``(I - ZD^(-1)Z') R E^+ R' (I - ZD^(-1)Z') + ZD^(-1)Z'``."""
    _check_params(dm, sp)
    proj, e_apply_Rt = _block_parts(dm, sp)
    return proj @ dm.R @ e_apply_Rt @ proj + (np.eye(dm.n) - proj)


def penalized_objective(dm: DesignMatrices, y: np.ndarray, sp: SmoothParams,
                        c: np.ndarray, b: np.ndarray) -> float:
    """Value of the penalized criterion at arbitrary coefficients."""
    r = np.asarray(y, dtype=float) - dm.R @ c - dm.Z @ b
    pen_b = float(b @ (sigma_diag(sp.gamma, dm) * b)) if dm.p else 0.0
    return float(r @ r) + pen_b + dm.n * sp.lam * float(c @ dm.Q @ c)
