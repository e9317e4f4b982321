"""Assembly of model matrices from a dataset and a model specification.

Given responses ``y``, covariates ``x`` (and treatment levels for the ANOVA
family), plus any number of grouping factors, this module builds the matrices
of the penalized least squares problem

    min ||y - R c - Z b||^2 + b' Sigma b + n*lambda * c' Q c

where ``R = (S, K)`` stacks the null-space basis ``S`` with kernel columns
``K`` evaluated against a set of basis points, ``Q`` is the penalty Gram with
a zero leading block (null-space directions are unpenalized), and ``Z``
column-concatenates 0/1 indicators of the grouping factors.

``Sigma`` is restricted to a diagonal with entries ``exp(gamma[g])`` shared
within tying groups; this covers a single shared variance parameter, one
parameter per level, and arbitrary blocks of levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kernels import (
    DomainError,
    KernelSpec,
    SplineFamily,
    kernel_matrix,
    nullspace_dim,
    nullspace_matrix,
)

__all__ = [
    "RankError",
    "IdentifiabilityError",
    "GroupingFactor",
    "FullBasis",
    "SubsetBasis",
    "ModelSpec",
    "Dataset",
    "DesignMatrices",
    "build_design",
    "sigma_matrix",
    "sigma_diag",
    "eval_eta",
    "default_subset_size",
]


class RankError(ValueError):
    """A grouping factor's indicator block is rank deficient (empty level)."""


class IdentifiabilityError(ValueError):
    """Model terms cannot be separated under the given design."""


TYINGS = ("shared", "per_level", "per_block")


@dataclass(frozen=True)
class GroupingFactor:
    """One random-effect grouping of the observations.

    ``assignment`` holds one integer level label per observation; labels are
    mapped to indicator columns in sorted label order.  ``n_levels`` may
    declare more levels than observed, in which case the absent levels make
    the block rank deficient and ``build_design`` refuses.  ``tying`` chooses
    how many Sigma parameters the factor contributes: one (``"shared"``), one
    per level (``"per_level"``) or one per entry of ``blocks`` (a per-level
    group index array, ``"per_block"``).
    """

    name: str
    assignment: tuple
    tying: str = "shared"
    blocks: tuple | None = None
    n_levels: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "assignment", tuple(int(v) for v in self.assignment))
        if self.blocks is not None:
            object.__setattr__(self, "blocks", tuple(int(v) for v in self.blocks))
        if self.tying not in TYINGS:
            raise ValueError(f"tying must be one of {TYINGS}, got {self.tying!r}")
        if self.tying == "per_block" and self.blocks is None:
            raise ValueError(f"factor {self.name!r}: per_block tying needs blocks")

    def indicator(self, n: int):
        """(n, p_g) 0/1 block plus the level labels backing its columns."""
        codes = np.asarray(self.assignment)
        if codes.shape[0] != n:
            raise ValueError(f"factor {self.name!r}: assignment length "
                             f"{codes.shape[0]} != n = {n}")
        labels = np.unique(codes)
        if self.n_levels is not None:
            if self.n_levels < labels.size or np.any(labels < 1) or np.any(labels > self.n_levels):
                raise ValueError(f"factor {self.name!r}: labels must lie in "
                                 f"1..{self.n_levels}")
            if self.n_levels > labels.size:
                raise RankError(f"factor {self.name!r}: declared {self.n_levels} "
                                f"levels but only {labels.size} observed; "
                                "indicator block is rank deficient")
            labels = np.arange(1, self.n_levels + 1)
        block = (codes[:, None] == labels[None, :]).astype(float)
        return block, labels


@dataclass(frozen=True)
class FullBasis:
    """Kernel columns at every data point."""


@dataclass(frozen=True)
class SubsetBasis:
    """Kernel columns at a seeded random subset of the data points."""

    size: int
    seed: int = 0


@dataclass(frozen=True)
class ModelSpec:
    kernel: KernelSpec
    random_effects: tuple = ()
    basis: FullBasis | SubsetBasis = FullBasis()

    def __post_init__(self):
        object.__setattr__(self, "random_effects", tuple(self.random_effects))


@dataclass(frozen=True)
class Dataset:
    """Observed responses and covariates; ``tau`` only for the ANOVA family."""

    y: np.ndarray
    x: np.ndarray
    tau: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        if self.tau is not None:
            object.__setattr__(self, "tau", np.asarray(self.tau, dtype=int))
        if self.y.shape != self.x.shape or self.y.ndim != 1:
            raise ValueError("y and x must be 1-d arrays of equal length")
        if self.tau is not None and self.tau.shape != self.y.shape:
            raise ValueError("tau must match y in length")

    @property
    def n(self) -> int:
        return self.y.shape[0]


@dataclass
class DesignMatrices:
    """Assembled matrices for one dataset under one model spec.

    ``tying_map[i]`` is the Sigma-parameter index of random-effect column
    ``i``; ``factor_slices`` give each factor's column range in ``Z``;
    ``basis_x``/``basis_tau`` are the points backing the kernel columns of
    ``R``.  The original ``spec``/``data`` are kept so parameter searches can
    rebuild the kernel blocks under new kernel weights.
    """

    S: np.ndarray
    R: np.ndarray
    Q: np.ndarray
    Z: np.ndarray
    tying_map: np.ndarray
    n: int
    m: int
    q: int
    p: int
    n_gamma: int
    factor_slices: tuple
    factor_levels: tuple
    basis_x: np.ndarray
    basis_tau: np.ndarray | None
    spec: ModelSpec
    data: Dataset
    kernel_theta: tuple = field(default_factory=tuple)


def default_subset_size(n: int) -> int:
    """Basis size heuristic growing like n^(2/9), floored for small samples."""
    return min(n, max(20, math.ceil(10.0 * n ** (2.0 / 9.0))))


def _subset_indices(n: int, size: int, seed: int):
    rng = np.random.default_rng(seed)
    return np.sort(rng.permutation(n)[:size])


def build_design(spec: ModelSpec, data: Dataset) -> DesignMatrices:
    """Assemble S, R, Q, Z and the Sigma tying map for ``data`` under ``spec``.

    Deterministic, including the seeded basis subset.  Raises ``RankError``
    when a factor has an empty declared level, and ``IdentifiabilityError``
    for ANOVA specs where some treatment level is covered by a single group
    level of some factor (curve contrasts and that group effect would be
    confounded).
    """
    kern = spec.kernel
    n = data.n
    if kern.family is SplineFamily.ANOVA and data.tau is None:
        raise DomainError("anova family needs a treatment column")
    m = nullspace_dim(kern)
    if n < m + 1:
        raise ValueError(f"need at least m+1 = {m + 1} observations, got {n}")

    S = nullspace_matrix(kern, data.x, data.tau)

    if isinstance(spec.basis, SubsetBasis):
        size = spec.basis.size
        if size < m:
            raise ValueError(f"subset basis size {size} < null-space dim {m}")
        if size > n:
            raise ValueError(f"subset basis size {size} > n = {n}")
        idx = _subset_indices(n, size, spec.basis.seed)
    else:
        idx = np.arange(n)
    basis_x = data.x[idx]
    basis_tau = None if data.tau is None else data.tau[idx]

    K = kernel_matrix(kern, data.x, basis_x, data.tau, basis_tau)
    gram = kernel_matrix(kern, basis_x, basis_x, basis_tau, basis_tau)
    R = np.column_stack([S, K])
    q = m + basis_x.shape[0]
    Q = np.zeros((q, q))
    Q[m:, m:] = gram

    blocks, slices, levels = [], [], []
    tying, n_gamma = [], 0
    start = 0
    for factor in spec.random_effects:
        block, labels = factor.indicator(n)
        p_g = block.shape[1]
        if factor.tying == "shared":
            tying.extend([n_gamma] * p_g)
            n_gamma += 1
        elif factor.tying == "per_level":
            tying.extend(range(n_gamma, n_gamma + p_g))
            n_gamma += p_g
        else:
            if len(factor.blocks) != p_g:
                raise ValueError(f"factor {factor.name!r}: blocks must have one "
                                 f"entry per level ({p_g})")
            local = np.asarray(factor.blocks)
            uniq = np.unique(local)
            remap = {v: i for i, v in enumerate(uniq)}
            tying.extend(n_gamma + remap[v] for v in local)
            n_gamma += uniq.size
        blocks.append(block)
        slices.append((start, start + p_g))
        levels.append(tuple(int(v) for v in labels))
        start += p_g

    Z = np.column_stack(blocks) if blocks else np.zeros((n, 0))
    p = Z.shape[1]

    if kern.family is SplineFamily.ANOVA and spec.random_effects:
        for factor, (lo, hi) in zip(spec.random_effects, slices):
            codes = np.asarray(factor.assignment)
            for t in range(1, kern.levels + 1):
                members = np.unique(codes[data.tau == t])
                if members.size == 1:
                    raise IdentifiabilityError(
                        f"treatment level {t} is covered by a single level of "
                        f"factor {factor.name!r}; need more than one")

    return DesignMatrices(
        S=S, R=R, Q=Q, Z=Z,
        tying_map=np.asarray(tying, dtype=int),
        n=n, m=m, q=q, p=p, n_gamma=n_gamma,
        factor_slices=tuple(slices), factor_levels=tuple(levels),
        basis_x=basis_x, basis_tau=basis_tau,
        spec=spec, data=data, kernel_theta=kern.theta_tuple(),
    )


def sigma_diag(gamma, dm: DesignMatrices) -> np.ndarray:
    """Diagonal of Sigma: entry i is ``exp(gamma[tying_map[i]])``."""
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != (dm.n_gamma,):
        raise ValueError(f"gamma must have length {dm.n_gamma}, got {gamma.shape}")
    if dm.p == 0:
        return np.zeros(0)
    return np.exp(gamma[dm.tying_map])


def sigma_matrix(gamma, dm: DesignMatrices) -> np.ndarray:
    """Sigma as a dense (p, p) diagonal matrix; strictly positive diagonal."""
    return np.diag(sigma_diag(gamma, dm))


def rebuild_with_theta(dm: DesignMatrices, theta: tuple) -> DesignMatrices:
    """Design for the same data with kernel weights replaced by ``theta``."""
    if theta == dm.kernel_theta:
        return dm
    spec = ModelSpec(dm.spec.kernel.with_theta(theta), dm.spec.random_effects,
                     dm.spec.basis)
    return build_design(spec, dm.data)


def eval_eta(dm: DesignMatrices, c_hat: np.ndarray, x_new, tau_new=None) -> np.ndarray:
    """Evaluate the fitted smooth at new covariate values."""
    x_new = np.atleast_1d(np.asarray(x_new, dtype=float))
    S_new = nullspace_matrix(dm.spec.kernel, x_new, tau_new)
    K_new = kernel_matrix(dm.spec.kernel, x_new, dm.basis_x, tau_new, dm.basis_tau)
    return S_new @ c_hat[:dm.m] + K_new @ c_hat[dm.m:]
