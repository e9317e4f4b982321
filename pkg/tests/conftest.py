import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mixsmooth import Dataset, GroupingFactor, KernelSpec, ModelSpec, SplineFamily
from mixsmooth.design import FullBasis, SubsetBasis, build_design

settings.register_profile(
    "suite",
    deadline=None,
    max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


def jittered_x(rng, n):
    """Covariates with a guaranteed minimum gap of 0.3/n, shuffled."""
    x = (np.arange(n) + 0.15 + 0.7 * rng.uniform(size=n)) / n
    rng.shuffle(x)
    return x


def grouped_instance(rng, n_lo=12, n_hi=30, p_hi=4, subset=None,
                     log_lam=(-2.5, 0.0), log_gamma=(-2.0, 2.0),
                     tying="per_level"):
    """Random design + response + smoothing parameters for solver tests."""
    from mixsmooth import SmoothParams

    n = int(rng.integers(n_lo, n_hi + 1))
    x = jittered_x(rng, n)
    g = int(rng.integers(2, p_hi + 1))
    assign = np.concatenate([np.arange(1, g + 1), rng.integers(1, g + 1, n - g)])
    rng.shuffle(assign)
    factor = GroupingFactor("group", tuple(assign), tying=tying)
    if subset is None:
        basis = FullBasis()
    else:
        size = int(rng.integers(subset[0], min(subset[1], n) + 1))
        basis = SubsetBasis(size=size, seed=int(rng.integers(0, 2**31)))
    spec = ModelSpec(KernelSpec(SplineFamily.CUBIC, domain_upper=1.0),
                     (factor,), basis)
    b = rng.normal(0.0, 0.5, g)
    Z = (assign[:, None] == np.arange(1, g + 1)[None, :]).astype(float)
    y = 3.0 * np.sin(2 * np.pi * x) + Z @ b + rng.normal(0.0, 0.5, n)
    dm = build_design(spec, Dataset(y=y, x=x))
    sp = SmoothParams(float(rng.uniform(*log_lam)),
                      tuple(rng.uniform(*log_gamma, dm.n_gamma)))
    return dm, y, sp


def plain_instance(rng, n=25, log_lam=(-2.5, 0.0)):
    """Design without random effects."""
    from mixsmooth import SmoothParams

    x = jittered_x(rng, n)
    spec = ModelSpec(KernelSpec(SplineFamily.CUBIC, domain_upper=1.0))
    y = 3.0 * np.sin(2 * np.pi * x) + rng.normal(0.0, 0.5, n)
    dm = build_design(spec, Dataset(y=y, x=x))
    return dm, y, SmoothParams(float(rng.uniform(*log_lam)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
