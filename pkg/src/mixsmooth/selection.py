"""Tuning-parameter selection: scores, losses against known truth, risks.

The cross-validation score of a fit is

    V_alpha = (rss/n) / ((n - alpha*trA)/n)^2

and the known-variance unbiased-risk score is

    U_alpha = rss/n + 2*sigma2*alpha*trA/n,

with ``alpha = 1`` the plain criteria and ``alpha`` around 1.4 a guard
against occasional severe undersmoothing.  Three losses measure a fit against
simulation truth: mean squared error at the data points (``loss_l1``, random
effects treated as real), the smooth component compared after projecting out
the random-effect column space (``loss_l2``, all effects latent), and the
mixed version (``loss_l3``).  ``risk_r1``/``risk_r2`` are the corresponding
exact expectations over noise and random-effect draws, computed from dense
operator matrices.

Search is two stage: a coarse grid over (log10 lambda, gamma) followed by a
downhill-simplex refinement from the best grid point, jointly over all
continuous parameters including log kernel weights where the family has any.
Grid near-ties prefer the largest lambda (the smoothest candidate).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .design import DesignMatrices, rebuild_with_theta
from .kernels import SplineFamily
from .solver import (
    FitResult,
    NormalEquations,
    NumericError,
    SmoothParams,
    eta_matrix_dense,
    pseudo_inverse,
    smoothing_matrix_dense,
)

__all__ = [
    "ScoreUndefinedError",
    "OptimizationError",
    "Truth",
    "ScoreConfig",
    "SearchBox",
    "score_v",
    "score_u",
    "sigma_hat",
    "loss_l1",
    "loss_l2",
    "loss_l3",
    "risk_r1",
    "risk_r2",
    "optimize",
    "optimize_objective",
    "evaluate_grid",
    "pick_best",
    "simplex_refine",
    "make_scorer",
    "LAMBDA_GRID",
    "GAMMA_GRID",
]

LAMBDA_GRID = tuple(np.arange(-8.0, 2.0001, 0.5))
GAMMA_GRID = (-6.0, -3.0, 0.0, 3.0, 6.0)
TIE_TOL = 1e-10
RISK_N_CAP = 2000


class ScoreUndefinedError(ArithmeticError):
    """Score denominator vanished or a trace left no degrees of freedom."""


class OptimizationError(RuntimeError):
    """No admissible parameter value was found."""


@dataclass(frozen=True)
class Truth:
    """Simulation truth backing loss and risk evaluations.

    ``b_var`` is the diagonal of the true random-effect covariance;
    ``real_mask`` flags each grouping factor as real (its effect is part of
    the estimand) or latent (a correlation device only).
    """

    eta: np.ndarray
    b: np.ndarray
    sigma2: float
    b_var: np.ndarray
    real_mask: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "eta", np.asarray(self.eta, dtype=float))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float))
        object.__setattr__(self, "b_var", np.asarray(self.b_var, dtype=float))
        object.__setattr__(self, "real_mask", tuple(bool(v) for v in self.real_mask))
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be > 0")


@dataclass(frozen=True)
class ScoreConfig:
    criterion: str = "gcv"
    sigma2: float | None = None
    alpha: float = 1.0

    def __post_init__(self):
        if self.criterion not in ("gcv", "unbiased_risk"):
            raise ValueError(f"unknown criterion {self.criterion!r}")
        if self.criterion == "unbiased_risk" and not (self.sigma2 or 0) > 0:
            raise ValueError("unbiased_risk needs a known sigma2 > 0")
        if self.alpha < 1.0:
            raise ValueError(f"alpha must be >= 1, got {self.alpha}")


@dataclass(frozen=True)
class SearchBox:
    log10_lambda: tuple = (-8.0, 2.0)
    gamma: tuple = (-20.0, 20.0)
    log10_theta: tuple = (-4.0, 2.0)


def score_v(fit: FitResult, alpha: float = 1.0) -> float:
    """Cross-validation score; ``alpha = 1`` is the plain criterion."""
    denom = (fit.n - alpha * fit.tr_a) / fit.n
    if denom <= 0.0:
        raise ScoreUndefinedError(
            f"trace term exhausts the degrees of freedom (n={fit.n}, "
            f"alpha*trA={alpha * fit.tr_a:.3f})")
    return (fit.rss / fit.n) / denom**2


def score_u(fit: FitResult, sigma2: float, alpha: float = 1.0) -> float:
    """Unbiased-risk score for known error variance."""
    if not sigma2 > 0:
        raise ValueError("sigma2 must be > 0")
    return fit.rss / fit.n + 2.0 * sigma2 * alpha * fit.tr_a / fit.n


def sigma_hat(fit: FitResult) -> float:
    """Residual-based variance estimate ``rss / (n - trA)``."""
    denom = fit.n - fit.tr_a
    if denom <= 0.0:
        raise ScoreUndefinedError("n - trA <= 0, variance estimate undefined")
    return fit.rss / denom


def _check_truth(truth: Truth, dm: DesignMatrices):
    if truth.eta.shape != (dm.n,):
        raise ValueError(f"truth.eta must have length {dm.n}")
    if truth.b.shape != (dm.p,):
        raise ValueError(f"truth.b must have length {dm.p}")
    if truth.b_var.shape != (dm.p,):
        raise ValueError(f"truth.b_var must have length {dm.p}")


def _project_out(Z: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Residual of v after projection onto the column space of Z."""
    if Z.shape[1] == 0:
        return v
    return v - Z @ (pseudo_inverse(Z.T @ Z) @ (Z.T @ v))


def loss_l1(fit: FitResult, truth: Truth, dm: DesignMatrices) -> float:
    """Mean squared error of fitted values against the full true signal."""
    _check_truth(truth, dm)
    d = fit.y_hat - truth.eta - dm.Z @ truth.b
    return float(d @ d) / dm.n


def loss_l2(fit: FitResult, truth: Truth, dm: DesignMatrices) -> float:
    """Smooth-component error with the random-effect space projected out."""
    _check_truth(truth, dm)
    d = _project_out(dm.Z, fit.eta_hat - truth.eta)
    return float(d @ d) / dm.n


def _real_latent_columns(truth: Truth, dm: DesignMatrices):
    if len(truth.real_mask) != len(dm.factor_slices):
        raise ValueError("real_mask must flag every grouping factor")
    real, latent = [], []
    for flag, (lo, hi) in zip(truth.real_mask, dm.factor_slices):
        (real if flag else latent).extend(range(lo, hi))
    return np.asarray(real, dtype=int), np.asarray(latent, dtype=int)


def loss_l3(fit: FitResult, truth: Truth, dm: DesignMatrices) -> float:
    """Error of smooth plus real effects, latent-effect space projected out.

    Reduces to ``loss_l1`` when every factor is real and to ``loss_l2`` when
    every factor is latent.
    """
    _check_truth(truth, dm)
    real, latent = _real_latent_columns(truth, dm)
    z1 = dm.Z[:, real]
    d = fit.eta_hat + z1 @ fit.b_hat[real] - truth.eta - z1 @ truth.b[real]
    d = _project_out(dm.Z[:, latent], d)
    return float(d @ d) / dm.n


def _check_risk_size(dm: DesignMatrices):
    if dm.n > RISK_N_CAP:
        raise ValueError(f"risk evaluation uses dense n-by-n operators; "
                         f"n = {dm.n} exceeds the cap of {RISK_N_CAP}")


def risk_r1(dm: DesignMatrices, sp: SmoothParams, truth: Truth) -> float:
    """Expectation of ``loss_l1`` over noise and random-effect draws."""
    _check_truth(truth, dm)
    _check_risk_size(dm)
    A = smoothing_matrix_dense(dm, sp)
    IA = np.eye(dm.n) - A
    v = IA @ truth.eta
    zbz = (dm.Z * truth.b_var) @ dm.Z.T
    t_bias = float(v @ v)
    t_b = float(np.sum((IA @ IA) * zbz))
    t_eps = truth.sigma2 * float(np.sum(A * A))
    return (t_bias + t_b + t_eps) / dm.n


def risk_r2(dm: DesignMatrices, sp: SmoothParams, truth: Truth) -> float:
    """Expectation of ``loss_l2`` over noise and random-effect draws."""
    _check_truth(truth, dm)
    _check_risk_size(dm)
    M = eta_matrix_dense(dm, sp)
    IM = np.eye(dm.n) - M
    pm = _project_out(dm.Z, M)
    mt_p_m = M.T @ pm
    v = _project_out(dm.Z, IM @ truth.eta)
    zbz = (dm.Z * truth.b_var) @ dm.Z.T
    t_bias = float(v @ v)
    t_b = float(np.sum(mt_p_m * zbz))
    t_eps = truth.sigma2 * float(np.trace(mt_p_m))
    return (t_bias + t_b + t_eps) / dm.n


# ---------------------------------------------------------------------------
# Two-stage search
# ---------------------------------------------------------------------------


def make_scorer(cfg: ScoreConfig):
    """Turn a ScoreConfig into a callable FitResult -> float."""
    if cfg.criterion == "gcv":
        return lambda fit: score_v(fit, cfg.alpha)
    return lambda fit: score_u(fit, cfg.sigma2, cfg.alpha)


def _safe_score(scorer, fit) -> float:
    if fit is None:
        return math.inf
    try:
        s = scorer(fit)
    except ScoreUndefinedError:
        return math.inf
    return s if math.isfinite(s) else math.inf


def _grid_values(grid, lo, hi):
    vals = [g for g in grid if lo <= g <= hi]
    return vals if vals else [min(max((lo + hi) / 2.0, lo), hi)]


def evaluate_grid(ne: NormalEquations, box: SearchBox | None = None):
    """Stage-1 fits over the (log10 lambda, gamma) grid, in scan order.

    Returns ``[(SmoothParams, FitResult or None)]``; a None fit marks a solve
    failure at that grid point.
    """
    box = box or SearchBox()
    dm = ne.dm
    lams = _grid_values(LAMBDA_GRID, *box.log10_lambda)
    gams = _grid_values(GAMMA_GRID, *box.gamma)
    out = []
    for ll in lams:
        for combo in itertools.product(gams, repeat=dm.n_gamma):
            sp = SmoothParams(ll, combo, dm.kernel_theta)
            try:
                fit = ne.solve(sp)
            except NumericError:
                fit = None
            out.append((sp, fit))
    return out


def pick_best(entries, scorer):
    """Best grid entry by score; near-ties go to the largest lambda."""
    best = None
    for sp, fit in entries:
        s = _safe_score(scorer, fit)
        if not math.isfinite(s):
            continue
        if best is None or s < best[0] - TIE_TOL:
            best = (s, sp, fit)
        elif s <= best[0] + TIE_TOL and sp.log10_lambda > best[1].log10_lambda:
            best = (s, sp, fit)
    if best is None:
        raise OptimizationError("every grid point left the score undefined")
    s, sp, fit = best
    return sp, fit, s


def _nelder_mead(fun, x0, steps, lo, hi, fatol_rel=1e-6, maxfev=500):
    """Downhill simplex with box projection.

    Stops when the simplex score spread falls below ``fatol_rel*(1+|best|)``
    or after ``maxfev`` objective evaluations.  Deterministic.
    """
    x0 = np.clip(np.asarray(x0, dtype=float), lo, hi)
    dim = x0.size
    evals = [0]

    def f(x):
        evals[0] += 1
        return fun(np.clip(x, lo, hi))

    simplex = [x0]
    for i in range(dim):
        step = np.zeros(dim)
        step[i] = steps[i]
        pt = np.clip(x0 + step, lo, hi)
        if np.allclose(pt, x0):
            pt = np.clip(x0 - step, lo, hi)
        simplex.append(pt)
    fs = [f(x) for x in simplex]

    while evals[0] < maxfev:
        order = np.argsort(fs, kind="stable")
        simplex = [simplex[i] for i in order]
        fs = [fs[i] for i in order]
        if fs[-1] - fs[0] < fatol_rel * (1.0 + abs(fs[0])):
            break
        centroid = np.mean(simplex[:-1], axis=0)
        xr = centroid + (centroid - simplex[-1])
        fr = f(xr)
        if fr < fs[0]:
            xe = centroid + 2.0 * (centroid - simplex[-1])
            fe = f(xe)
            if fe < fr:
                simplex[-1], fs[-1] = xe, fe
            else:
                simplex[-1], fs[-1] = xr, fr
        elif fr < fs[-2]:
            simplex[-1], fs[-1] = xr, fr
        else:
            xc = centroid + 0.5 * (simplex[-1] - centroid)
            fc = f(xc)
            if fc < fs[-1]:
                simplex[-1], fs[-1] = xc, fc
            else:
                for i in range(1, dim + 1):
                    simplex[i] = simplex[0] + 0.5 * (simplex[i] - simplex[0])
                    fs[i] = f(simplex[i])
    i_best = int(np.argmin(fs))
    return np.clip(simplex[i_best], lo, hi), fs[i_best]


def _vector_bounds(dm: DesignMatrices, box: SearchBox, with_theta: bool):
    lo = [box.log10_lambda[0]] + [box.gamma[0]] * dm.n_gamma
    hi = [box.log10_lambda[1]] + [box.gamma[1]] * dm.n_gamma
    steps = [0.5] + [1.0] * dm.n_gamma
    if with_theta:
        lo.append(box.log10_theta[0])
        hi.append(box.log10_theta[1])
        steps.append(0.5)
    return np.asarray(lo), np.asarray(hi), np.asarray(steps)


def _theta_from_log(dm: DesignMatrices, log10_theta: float) -> tuple:
    family = dm.spec.kernel.family
    if family is SplineFamily.EXPONENTIAL:
        return (10.0 ** log10_theta,)
    if family is SplineFamily.ANOVA:
        return (1.0, 10.0 ** log10_theta)
    return ()


def simplex_refine(ne: NormalEquations, scorer, start: SmoothParams,
                   box: SearchBox | None = None, maxfev: int = 500):
    """Stage-2 simplex over (log10 lambda, gamma) at fixed kernel weights."""
    box = box or SearchBox()
    dm = ne.dm
    lo, hi, steps = _vector_bounds(dm, box, with_theta=False)
    cache = {}

    def fit_at(v):
        key = tuple(np.round(v, 12))
        if key not in cache:
            sp = SmoothParams(v[0], tuple(v[1:1 + dm.n_gamma]), dm.kernel_theta)
            try:
                cache[key] = (sp, ne.solve(sp))
            except NumericError:
                cache[key] = (sp, None)
        return cache[key]

    def objective(v):
        return _safe_score(scorer, fit_at(v)[1])

    x0 = np.asarray([start.log10_lambda, *start.gamma])
    x_best, _ = _nelder_mead(objective, x0, steps, lo, hi, maxfev=maxfev)
    sp, fit = fit_at(np.clip(x_best, lo, hi))
    if fit is None:
        # refinement ended on a failed solve; keep the starting point
        fit = ne.solve(start)
        return start, fit, _safe_score(scorer, fit)
    return sp, fit, _safe_score(scorer, fit)


def _search_fixed_theta(dm: DesignMatrices, y, scorer, box: SearchBox,
                        maxfev: int):
    ne = NormalEquations(dm, y)
    sp0, fit0, s0 = pick_best(evaluate_grid(ne, box), scorer)
    sp, fit, s = simplex_refine(ne, scorer, sp0, box, maxfev)
    if s0 < s:
        return sp0, fit0, s0
    return sp, fit, s


def _search_with_theta(dm: DesignMatrices, y, scorer, box: SearchBox,
                       start_log_theta: float, maxfev: int):
    lo, hi, steps = _vector_bounds(dm, box, with_theta=True)

    def objective(v):
        theta = _theta_from_log(dm, v[-1])
        try:
            dmv = rebuild_with_theta(dm, theta)
            fit = NormalEquations(dmv, y).solve(
                SmoothParams(v[0], tuple(v[1:1 + dm.n_gamma]), theta))
        except NumericError:
            return math.inf
        return _safe_score(scorer, fit)

    # stage 1 at the starting kernel weights
    dm_start = rebuild_with_theta(dm, _theta_from_log(dm, start_log_theta))
    ne = NormalEquations(dm_start, y)
    sp0, _, s0 = pick_best(evaluate_grid(ne, box), scorer)
    x0 = np.asarray([sp0.log10_lambda, *sp0.gamma, start_log_theta])
    x_best, _ = _nelder_mead(objective, x0, steps, lo, hi, maxfev=maxfev)
    x_best = np.clip(x_best, lo, hi)
    theta = _theta_from_log(dm, x_best[-1])
    dm_best = rebuild_with_theta(dm, theta)
    sp = SmoothParams(x_best[0], tuple(x_best[1:1 + dm.n_gamma]), theta)
    fit = NormalEquations(dm_best, y).solve(sp)
    s = _safe_score(scorer, fit)
    if s0 < s:
        sp0 = SmoothParams(sp0.log10_lambda, sp0.gamma, dm_start.kernel_theta)
        fit0 = ne.solve(sp0)
        return sp0, fit0, s0
    return sp, fit, s


def optimize_objective(dm: DesignMatrices, y, fit_scorer, box: SearchBox | None = None,
                       maxfev: int = 500):
    """Two-stage minimization of an arbitrary ``FitResult -> float`` objective.

    For the exponential family the kernel rate is searched on a log scale
    jointly with (lambda, gamma), and an exact zero-rate (cubic) candidate is
    compared last; the ANOVA family searches the interaction weight the same
    way with the average-curve weight pinned at 1.  Deterministic given
    inputs.
    """
    box = box or SearchBox()
    family = dm.spec.kernel.family
    if family is SplineFamily.CUBIC:
        return _search_fixed_theta(dm, y, fit_scorer, box, maxfev)
    if family is SplineFamily.ANOVA and dm.spec.kernel.additive:
        # the additive flag pins the interaction weight at zero; only the
        # average-curve scale remains, and lambda absorbs it
        dm0 = rebuild_with_theta(dm, (1.0, 0.0))
        return _search_fixed_theta(dm0, y, fit_scorer, box, maxfev)

    if family is SplineFamily.EXPONENTIAL:
        theta0 = dm.spec.kernel.theta
        start = math.log10(theta0) if theta0 > 0 else -1.0
        start = min(max(start, box.log10_theta[0]), box.log10_theta[1])
        zero_theta = (0.0,)
    else:
        theta12 = dm.spec.kernel.theta12
        start = math.log10(theta12) if theta12 > 0 else 0.0
        start = min(max(start, box.log10_theta[0]), box.log10_theta[1])
        zero_theta = (1.0, 0.0)

    sp_t, fit_t, s_t = _search_with_theta(dm, y, fit_scorer, box, start, maxfev)
    dm0 = rebuild_with_theta(dm, zero_theta)
    sp_0, fit_0, s_0 = _search_fixed_theta(dm0, y, fit_scorer, box, maxfev)
    if s_0 <= s_t:
        return sp_0, fit_0, s_0
    return sp_t, fit_t, s_t


def optimize(dm: DesignMatrices, y, cfg: ScoreConfig,
             box: SearchBox | None = None):
    """Select (lambda, Sigma, kernel weights) by the configured criterion.

    Returns ``(params, fit, score)`` with the score re-evaluated at the
    returned fit.
    """
    return optimize_objective(dm, y, make_scorer(cfg), box)
