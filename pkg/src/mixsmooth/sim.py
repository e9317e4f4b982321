"""Monte Carlo studies of selector performance on three random-effect designs.

Designs (all share the smooth signal ``3*sin(2*pi*x)`` on uniform covariates
and error sd 0.5):

* ``real`` -- subject intercepts, 10 subjects with equal shares, sd 0.5; the
  fitted Sigma ties one parameter across subjects.
* ``latent`` -- two cluster intercepts with sd 0.5 and 0.3 (intra-cluster
  correlations 0.5 and 0.09/0.34); one Sigma parameter per cluster.
* ``mixture`` -- both of the above, subjects nested in clusters, five each.

``run_study`` fits every replicate with the cross-validation score V and the
known-variance score U across a ladder of inflation factors alpha, plus an
oracle that minimizes the true loss directly (loss_l1 / loss_l2 / loss_l3 for
real / latent / mixture).  It reports per-replicate losses, efficacy ratios
oracle/selector, variance estimates and Sigma-implied variance ratios, with
quantile summaries.

Fits use the full kernel basis by default, matching the source studies at
n = 100; ``basis_size`` switches to the random-subset basis, which the
growing-n convergence check uses to stay tractable.  (The subset cap on the
fitted degrees of freedom also suppresses the rare severe-undersmoothing
replicates that the alpha inflation exists to fix, so selector comparisons
across alpha are only meaningful on the full basis.)

Replicates are deterministic: a counter-based generator keyed by
``(seed, replicate)`` drives each one, so results are reproducible and
replicates can be computed in parallel in any order.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .design import (
    Dataset,
    FullBasis,
    GroupingFactor,
    ModelSpec,
    SubsetBasis,
    build_design,
    default_subset_size,
)
from .kernels import KernelSpec, SplineFamily
from .selection import (
    NormalEquations,
    OptimizationError,
    ScoreUndefinedError,
    SearchBox,
    Truth,
    evaluate_grid,
    loss_l1,
    loss_l2,
    loss_l3,
    pick_best,
    score_u,
    score_v,
    sigma_hat,
    simplex_refine,
)
from .solver import NumericError, SmoothParams

__all__ = [
    "StudyError",
    "SimDesign",
    "SelectorRecord",
    "ReplicateSummary",
    "StudyResult",
    "gen_replicate",
    "run_replicate",
    "run_study",
    "asymptotic_check",
    "write_replicates_csv",
    "write_summary_json",
    "json_17g",
]

DEFAULT_ALPHAS = (1.0, 1.2, 1.4, 1.6, 1.8)
EFFICACY_QUANTILES = (0.10, 0.25, 0.50, 0.75, 0.90)
ORACLE_SLACK = 1e-12


class StudyError(RuntimeError):
    """More than the tolerated share of replicates failed."""


@dataclass(frozen=True)
class SimDesign:
    kind: str = "real"
    n: int = 100
    replicates: int = 100
    seed: int = 0
    alphas: tuple = DEFAULT_ALPHAS
    n_subjects: int = 10
    n_clusters: int = 2
    sigma: float = 0.5
    sigma_s: float = 0.5
    sigma_1: float = 0.5
    sigma_2: float = 0.3
    basis_size: int | None = None  # None fits the full kernel basis

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        if self.kind not in ("real", "latent", "mixture"):
            raise ValueError(f"unknown design kind {self.kind!r}")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        for name in ("sigma", "sigma_s", "sigma_1", "sigma_2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.kind in ("real", "mixture") and self.n % self.n_subjects:
            raise ValueError("n must be divisible by n_subjects")
        if self.kind in ("latent", "mixture") and self.n % self.n_clusters:
            raise ValueError("n must be divisible by n_clusters")
        if self.kind == "mixture" and self.n_subjects % self.n_clusters:
            raise ValueError("n_subjects must be divisible by n_clusters")

    @property
    def loss_name(self) -> str:
        return {"real": "l1", "latent": "l2", "mixture": "l3"}[self.kind]


def true_curve(x):
    """Smooth signal used by every design."""
    return 3.0 * np.sin(2.0 * np.pi * np.asarray(x, dtype=float))


def _replicate_rng(seed: int, r: int) -> np.random.Generator:
    # counter-based generator; (seed, replicate) keys independent substreams
    key = np.array([np.uint64(seed), np.uint64(r)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def gen_replicate(design: SimDesign, r: int):
    """Data, truth and design matrices for replicate ``r``; bit-deterministic."""
    if r < 0 or r >= design.replicates:
        raise ValueError(f"replicate index {r} outside 0..{design.replicates - 1}")
    rng = _replicate_rng(design.seed, r)
    n = design.n
    x = rng.uniform(0.0, 1.0, n)
    eps = rng.normal(0.0, design.sigma, n)

    factors, b_parts, var_parts, real_mask = [], [], [], []
    if design.kind in ("real", "mixture"):
        subj = np.repeat(np.arange(1, design.n_subjects + 1), n // design.n_subjects)
        b_s = rng.normal(0.0, design.sigma_s, design.n_subjects)
        factors.append(GroupingFactor("subject", tuple(subj), tying="shared"))
        b_parts.append(b_s)
        var_parts.append(np.full(design.n_subjects, design.sigma_s**2))
        real_mask.append(True)
    if design.kind in ("latent", "mixture"):
        if design.kind == "latent":
            clus = np.repeat(np.arange(1, design.n_clusters + 1),
                             n // design.n_clusters)
        else:
            # clusters follow the subject nesting, equal subjects per cluster
            per = design.n_subjects // design.n_clusters
            subj0 = np.repeat(np.arange(design.n_subjects), n // design.n_subjects)
            clus = subj0 // per + 1
        sds = np.full(design.n_clusters, design.sigma_1)
        if design.n_clusters >= 2:
            sds[1] = design.sigma_2
        b_c = rng.normal(0.0, 1.0, design.n_clusters) * sds
        factors.append(GroupingFactor("cluster", tuple(clus), tying="per_level"))
        b_parts.append(b_c)
        var_parts.append(sds**2)
        real_mask.append(False)

    b = np.concatenate(b_parts) if b_parts else np.zeros(0)
    b_var = np.concatenate(var_parts) if var_parts else np.zeros(0)
    eta = true_curve(x)

    # the subset seed is drawn either way to keep the stream layout fixed
    subset_seed = int(rng.integers(0, 2**63 - 1))
    if design.basis_size is None:
        basis = FullBasis()
    else:
        basis = SubsetBasis(size=min(design.basis_size, n), seed=subset_seed)
    spec = ModelSpec(
        kernel=KernelSpec(SplineFamily.CUBIC, domain_upper=1.0),
        random_effects=tuple(factors),
        basis=basis,
    )
    blocks = [f.indicator(n)[0] for f in factors]
    Z = np.column_stack(blocks) if blocks else np.zeros((n, 0))
    y = eta + Z @ b + eps
    data = Dataset(y=y, x=x, tau=None)
    dm = build_design(spec, data)
    truth = Truth(eta=eta, b=b, sigma2=design.sigma**2, b_var=b_var,
                  real_mask=tuple(real_mask))
    return data, truth, dm


def _loss_fn(design: SimDesign):
    return {"l1": loss_l1, "l2": loss_l2, "l3": loss_l3}[design.loss_name]


@dataclass
class SelectorRecord:
    name: str
    loss: float
    score: float
    log10_lambda: float
    gamma: tuple
    sigma_hat: float | None
    var_ratios: tuple


@dataclass
class ReplicateSummary:
    replicate: int
    oracle: SelectorRecord
    selectors: dict = field(default_factory=dict)


def _record(name, fit, sp, loss_val, score_val, dm) -> SelectorRecord:
    try:
        sh = sigma_hat(fit)
    except ScoreUndefinedError:
        sh = None
    ratios = tuple(np.exp(np.asarray(sp.gamma))) if sp.gamma else ()
    return SelectorRecord(name=name, loss=float(loss_val), score=float(score_val),
                          log10_lambda=float(sp.log10_lambda),
                          gamma=tuple(sp.gamma), sigma_hat=sh, var_ratios=ratios)


def run_replicate(design: SimDesign, r: int, box: SearchBox | None = None
                  ) -> ReplicateSummary:
    """Fit replicate ``r`` with every selector plus the loss oracle."""
    box = box or SearchBox()
    data, truth, dm = gen_replicate(design, r)
    loss = _loss_fn(design)
    ne = NormalEquations(dm, data.y)
    grid = evaluate_grid(ne, box)

    selectors = {}
    for alpha in design.alphas:
        for tag, scorer in (
            (f"v_{alpha:g}", lambda f, a=alpha: score_v(f, a)),
            (f"u_{alpha:g}", lambda f, a=alpha: score_u(f, design.sigma**2, a)),
        ):
            sp0, _, _ = pick_best(grid, scorer)
            sp, fit, sc = simplex_refine(ne, scorer, sp0, box)
            selectors[tag] = _record(tag, fit, sp, loss(fit, truth, dm), sc, dm)

    oracle_scorer = lambda f: loss(f, truth, dm)  # noqa: E731
    sp0, _, _ = pick_best(grid, oracle_scorer)
    sp_o, fit_o, loss_o = simplex_refine(ne, oracle_scorer, sp0, box)
    # the oracle is defined as the loss minimizer: restart from any selector
    # that stumbled on a better point than the oracle search found
    for rec in selectors.values():
        if rec.loss < loss_o - ORACLE_SLACK:
            sp_s = SmoothParams(rec.log10_lambda, rec.gamma, dm.kernel_theta)
            sp_c, fit_c, loss_c = simplex_refine(ne, oracle_scorer, sp_s, box)
            if loss_c < loss_o:
                sp_o, fit_o, loss_o = sp_c, fit_c, loss_c
    oracle = _record("oracle", fit_o, sp_o, loss_o, loss_o, dm)
    return ReplicateSummary(replicate=r, oracle=oracle, selectors=selectors)


@dataclass
class StudyResult:
    design: SimDesign
    replicates: list
    failures: list
    aggregate: dict


def _quantiles(values) -> dict:
    arr = np.asarray(sorted(values), dtype=float)
    return {f"q{int(q * 100)}": float(np.quantile(arr, q))
            for q in EFFICACY_QUANTILES}


def _aggregate(design: SimDesign, summaries) -> dict:
    selectors = {}
    names = list(summaries[0].selectors) if summaries else []
    for name in names:
        eff, losses, sighats = [], [], []
        for s in summaries:
            rec = s.selectors[name]
            eff.append(s.oracle.loss / rec.loss if rec.loss > 0 else 1.0)
            losses.append(rec.loss)
            if rec.sigma_hat is not None:
                sighats.append(rec.sigma_hat)
        selectors[name] = {
            "efficacy": _quantiles(eff),
            "loss_median": float(np.median(losses)),
            "sigma_hat_median": float(np.median(sighats)) if sighats else None,
        }
    return {
        "kind": design.kind,
        "n": design.n,
        "replicates_requested": design.replicates,
        "replicates_done": len(summaries),
        "loss": design.loss_name,
        "oracle_loss_median": float(np.median([s.oracle.loss for s in summaries]))
        if summaries else None,
        "selectors": selectors,
    }


def run_study(design: SimDesign, workers: int = 1) -> StudyResult:
    """Run every replicate, tolerate isolated failures, aggregate quantiles.

    A replicate failure (optimization error) is recorded and skipped; more
    than 10 percent failures raise ``StudyError``.
    """
    indices = range(design.replicates)
    summaries, failures = [], []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = pool.map(_worker, [(design, r) for r in indices])
            for r, outcome in zip(indices, results):
                ok, payload = outcome
                (summaries if ok else failures).append(payload)
    else:
        for r in indices:
            ok, payload = _worker((design, r))
            (summaries if ok else failures).append(payload)
    if len(failures) > 0.10 * design.replicates:
        raise StudyError(f"{len(failures)} of {design.replicates} replicates "
                         "failed")
    summaries.sort(key=lambda s: s.replicate)
    return StudyResult(design=design, replicates=summaries, failures=failures,
                       aggregate=_aggregate(design, summaries))


def _worker(args):
    design, r = args
    try:
        return True, run_replicate(design, r)
    except (OptimizationError, NumericError, ScoreUndefinedError) as exc:
        return False, {"replicate": r, "error": str(exc)}


# ---------------------------------------------------------------------------
# Empirical convergence of score-vs-loss gaps
# ---------------------------------------------------------------------------


def asymptotic_check(kind: str, n_list, replicates: int, seed: int,
                     workers: int = 1, basis_size=None) -> list:
    """Median of |score - loss - mean(eps^2)| / loss at the V-selected fit.

    One row per sample size, for both the U and V scores against the design's
    natural loss.  Group counts stay fixed as n grows, so the per-group
    sample sizes do the growing.  Fits use the subset basis (sized by
    ``default_subset_size`` unless given) to keep the large-n fits tractable.
    """
    rows = []
    for n in n_list:
        design = SimDesign(kind=kind, n=int(n), replicates=replicates, seed=seed,
                           alphas=(1.0,),
                           basis_size=basis_size or default_subset_size(int(n)))
        tasks = [(design, r) for r in range(replicates)]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                ratios = list(pool.map(_asymptotic_worker, tasks))
        else:
            ratios = [_asymptotic_worker(t) for t in tasks]
        u_ratios = [a for a, _, _ in ratios]
        v_ratios = [a for _, a, _ in ratios]
        losses = [a for _, _, a in ratios]
        rows.append({
            "kind": kind,
            "n": int(n),
            "replicates": replicates,
            "loss": design.loss_name,
            "u_ratio_median": float(np.median(u_ratios)),
            "v_ratio_median": float(np.median(v_ratios)),
            "loss_median": float(np.median(losses)),
        })
    return rows


def _asymptotic_worker(args):
    design, r = args
    data, truth, dm = gen_replicate(design, r)
    ne = NormalEquations(dm, data.y)
    scorer = lambda f: score_v(f, 1.0)  # noqa: E731
    sp0, _, _ = pick_best(evaluate_grid(ne), scorer)
    _, fit, _ = simplex_refine(ne, scorer, sp0)
    loss_val = _loss_fn(design)(fit, truth, dm)
    eps = data.y - truth.eta - dm.Z @ truth.b
    eps2 = float(eps @ eps) / dm.n
    u_val = score_u(fit, design.sigma**2, 1.0)
    v_val = score_v(fit, 1.0)
    return (abs(u_val - loss_val - eps2) / loss_val,
            abs(v_val - loss_val - eps2) / loss_val,
            loss_val)


# ---------------------------------------------------------------------------
# Serialization (CSV rows per replicate x selector, JSON summary)
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def write_replicates_csv(path, result: StudyResult):
    """One row per replicate and selector (oracle included); LF line endings."""
    n_gamma = len(result.replicates[0].oracle.gamma) if result.replicates else 0
    header = (["replicate", "selector", "loss", "efficacy", "score",
               "sigma_hat", "log10_lambda"]
              + [f"gamma_{i}" for i in range(n_gamma)]
              + [f"var_ratio_{i}" for i in range(n_gamma)])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for s in result.replicates:
            records = [s.oracle] + [s.selectors[k] for k in sorted(s.selectors)]
            for rec in records:
                eff = s.oracle.loss / rec.loss if rec.loss > 0 else 1.0
                row = [s.replicate, rec.name, _fmt(rec.loss), _fmt(float(eff)),
                       _fmt(rec.score), _fmt(rec.sigma_hat),
                       _fmt(rec.log10_lambda)]
                row += [_fmt(g) for g in rec.gamma]
                row += [_fmt(v) for v in rec.var_ratios]
                w.writerow(row)


def json_17g(obj, indent: int = 0) -> str:
    """JSON with floats printed at 17 significant digits; stable key order."""
    pad = " " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f'{pad}  {json_17g(str(k))}: {json_17g(v, indent + 2)}'
                 for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + f"\n{pad}}}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [f"{pad}  {json_17g(v, indent + 2)}" for v in obj]
        return "[\n" + ",\n".join(items) + f"\n{pad}]"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v) or math.isinf(v):
            return "null"
        return format(v, ".17g")
    if isinstance(obj, str):
        out = obj.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{out}"'
    raise TypeError(f"cannot serialize {type(obj)}")


def write_summary_json(path, result: StudyResult):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json_17g(result.aggregate))
        fh.write("\n")
