"""Randomized invariant suites behind the ``check`` CLI command.

Each suite returns a list of ``CheckOutcome`` rows: a named invariant, the
measured worst deviation, its allowed bound, and the pass flag.  Instances
use covariates on a jittered grid (minimum separation keeps the kernel Gram
away from the eigenvalue cutoff; see the solver notes) and moderate lambda
ranges where the penalized system is numerically resolved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .design import (Dataset, GroupingFactor, ModelSpec, SubsetBasis,
                     build_design, sigma_diag)
from .kernels import KernelSpec, SplineFamily
from .sim import asymptotic_check, true_curve
from .solver import (
    NormalEquations,
    SmoothParams,
    abar_dense,
    eta_matrix_dense,
    eta_matrix_from_blocks,
    smoothing_matrix_dense,
    smoothing_matrix_from_blocks,
)

__all__ = ["CheckOutcome", "random_instance", "identities_suite",
           "oracle_suite", "asymptotic_suite"]


@dataclass
class CheckOutcome:
    name: str
    deviation: float
    bound: float
    passed: bool

    @classmethod
    def of(cls, name, deviation, bound):
        return cls(name, float(deviation), float(bound),
                   bool(deviation <= bound))


def jittered_x(rng, n):
    """Covariates with guaranteed separation of 0.3/n, in shuffled order."""
    x = (np.arange(n) + 0.15 + 0.7 * rng.uniform(size=n)) / n
    rng.shuffle(x)
    return x


def random_instance(rng, n_lo=12, n_hi=30, p_hi=4, subset=None,
                    log_lam=(-2.5, 0.0), log_gamma=(-2.0, 2.0)):
    """One random design + response + parameter draw for invariant checks."""
    n = int(rng.integers(n_lo, n_hi + 1))
    x = jittered_x(rng, n)
    g = int(rng.integers(2, p_hi + 1))
    assign = np.concatenate([np.arange(1, g + 1), rng.integers(1, g + 1, n - g)])
    rng.shuffle(assign)
    factors = (GroupingFactor("group", tuple(assign), tying="per_level"),)
    if subset is None:
        basis = SubsetBasis(size=n, seed=int(rng.integers(0, 2**31)))
    else:
        size = int(rng.integers(subset[0], min(subset[1], n) + 1))
        basis = SubsetBasis(size=size, seed=int(rng.integers(0, 2**31)))
    spec = ModelSpec(KernelSpec(SplineFamily.CUBIC, domain_upper=1.0),
                     factors, basis)
    b = rng.normal(0.0, 0.5, g)
    y = true_curve(x) + (assign[:, None] == np.arange(1, g + 1)[None, :]) @ b \
        + rng.normal(0.0, 0.5, n)
    dm = build_design(spec, Dataset(y=y, x=x))
    sp = SmoothParams(rng.uniform(*log_lam),
                      tuple(rng.uniform(*log_gamma, dm.n_gamma)))
    return dm, y, sp


def identities_suite(instances=20, seed=0) -> list:
    """Dual-formula identities, spectral bounds and trace inequalities."""
    rng = np.random.default_rng(seed)
    dev = {k: 0.0 for k in
           ("hat_identity", "eta_identity", "hat_eig_low", "hat_eig_high",
            "abar_eig_low", "abar_eig_high", "contraction_bound",
            "residual_bound", "trace_sum", "trace_square", "hat_action",
            "eta_action", "rss_monotone")}
    for k in range(instances):
        subset = (8, 12) if k % 2 else None
        dm, y, sp = random_instance(rng, subset=subset)
        n = dm.n
        A1 = smoothing_matrix_from_blocks(dm, sp)
        A2 = smoothing_matrix_dense(dm, sp)
        M1 = eta_matrix_from_blocks(dm, sp)
        M2 = eta_matrix_dense(dm, sp)
        dev["hat_identity"] = max(dev["hat_identity"], np.abs(A1 - A2).max())
        dev["eta_identity"] = max(dev["eta_identity"], np.abs(M1 - M2).max())

        abar = abar_dense(dm, sp.log10_lambda)
        for mat, key in ((A2, "hat"), (abar, "abar")):
            w = np.linalg.eigvalsh((mat + mat.T) / 2.0)
            dev[f"{key}_eig_low"] = max(dev[f"{key}_eig_low"], -w.min())
            dev[f"{key}_eig_high"] = max(dev[f"{key}_eig_high"], w.max() - 1.0)

        # contraction of the smooth map and its residual complement under
        # the random-effect-whitened metric
        D = dm.Z.T @ dm.Z + np.diag(sigma_diag(sp.gamma, dm))
        IQZ = np.eye(n) - dm.Z @ np.linalg.solve(D, dm.Z.T)
        w1 = np.linalg.eigvalsh(M1.T @ IQZ @ M1).max()
        IM = np.eye(n) - M1
        w2 = np.linalg.eigvalsh(IM.T @ IQZ @ IM).max()
        dev["contraction_bound"] = max(dev["contraction_bound"], w1 - 1.0)
        dev["residual_bound"] = max(dev["residual_bound"], w2 - 4.0)

        dev["trace_sum"] = max(dev["trace_sum"],
                               np.trace(A2) - np.trace(abar) - dm.p)
        dev["trace_square"] = max(dev["trace_square"],
                                  np.sum(abar * abar) - np.sum(A2 * A2))

        ne = NormalEquations(dm, y)
        fit = ne.solve(sp)
        dev["hat_action"] = max(dev["hat_action"], np.abs(A2 @ y - fit.y_hat).max())
        dev["eta_action"] = max(dev["eta_action"], np.abs(M2 @ y - fit.eta_hat).max())

        # rss nondecreasing in lambda above the cutoff-dominated regime
        prev = -np.inf
        for ll in np.arange(-5.0, 2.01, 0.5):
            rs = ne.solve(SmoothParams(ll, sp.gamma, dm.kernel_theta)).rss
            dev["rss_monotone"] = max(dev["rss_monotone"], prev - rs)
            prev = rs

    bounds = {"hat_identity": 1e-9, "eta_identity": 1e-9,
              "hat_eig_low": 1e-10, "hat_eig_high": 1e-10,
              "abar_eig_low": 1e-10, "abar_eig_high": 1e-10,
              "contraction_bound": 1e-9, "residual_bound": 1e-9,
              "trace_sum": 1e-9, "trace_square": 1e-9,
              "hat_action": 1e-9, "eta_action": 1e-9,
              "rss_monotone": 1e-8}
    return [CheckOutcome.of(k, dev[k], bounds[k]) for k in bounds]


def oracle_suite(instances=50, seed=1) -> list:
    """Production solve against an independent SVD-based pseudoinverse solve."""
    rng = np.random.default_rng(seed)
    worst_coef = worst_yhat = 0.0
    for k in range(instances):
        if k % 2:
            dm, y, sp = random_instance(rng, n_lo=30, n_hi=50, p_hi=5,
                                        subset=(8, 12), log_lam=(-2.0, 0.0))
        else:
            dm, y, sp = random_instance(rng, n_lo=15, n_hi=30, p_hi=5,
                                        subset=None, log_lam=(-2.0, 0.0))
        ne = NormalEquations(dm, y)
        fit = ne.solve(sp)
        C = ne.WtW.copy()
        C[:dm.q, :dm.q] += dm.n * sp.lam * dm.Q
        C[dm.q:, dm.q:] += np.diag(sigma_diag(sp.gamma, dm))
        coef_ref = np.linalg.pinv(C, rcond=1e-12) @ ne.rhs
        coef = np.concatenate([fit.c_hat, fit.b_hat])
        yhat_ref = np.column_stack([dm.R, dm.Z]) @ coef_ref
        worst_coef = max(worst_coef, np.linalg.norm(coef - coef_ref)
                         / np.linalg.norm(coef_ref))
        worst_yhat = max(worst_yhat, np.linalg.norm(fit.y_hat - yhat_ref)
                         / np.linalg.norm(yhat_ref))
    return [CheckOutcome.of("coef_vs_pinv_rel", worst_coef, 1e-8),
            CheckOutcome.of("yhat_vs_pinv_rel", worst_yhat, 1e-8)]


def asymptotic_suite(kinds=("real",), n_list=(100, 400, 1600), replicates=50,
                     seed=0, workers=1) -> tuple:
    """Decreasing median score-vs-loss gap ratios; returns (outcomes, tables)."""
    outcomes, tables = [], {}
    for kind in kinds:
        rows = asymptotic_check(kind, n_list, replicates, seed, workers=workers)
        tables[kind] = rows
        for key in ("u_ratio_median", "v_ratio_median"):
            vals = [row[key] for row in rows]
            drop = max(vals[i + 1] - vals[i] for i in range(len(vals) - 1)) \
                if len(vals) > 1 else -1.0
            outcomes.append(CheckOutcome.of(f"{kind}_{key}_decreasing", drop, 0.0))
            outcomes.append(CheckOutcome.of(
                f"{kind}_{key}_finite",
                0.0 if all(np.isfinite(vals)) and all(v > 0 for v in vals)
                else 1.0, 0.5))
    return outcomes, tables
