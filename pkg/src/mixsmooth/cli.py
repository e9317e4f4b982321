"""Command-line front end: ``fit``, ``simulate`` and ``check``.

Exit codes: 0 success, 1 failed check invariant, 2 bad configuration or
input data, 3 optimization failure, 4 too many failed simulation replicates.

The ``fit`` command reads a JSON config and a CSV with a header row.  Config
schema (defaults in parentheses):

    {
      "kernel": {"family": "cubic" | "exponential" | "anova",
                 "domain_upper": number (max of x),
                 "theta": number (0), "theta12": number (0),
                 "additive": bool (false)},
      "covariate": "x",            # covariate column name
      "response": "y",             # response column name
      "treatment": "tau",          # anova only: treatment column
      "random_effects": [{"column": "subject",
                          "tying": "shared" | "per_level" | "per_block",
                          "blocks": {"level label": group int, ...}}],
      "basis": {"type": "full" | "subset", "size": int, "seed": int (0)},
      "criterion": {"type": "gcv" | "unbiased_risk",
                    "sigma2": number, "alpha": number (1.0)},
      "box": {"log10_lambda": [lo, hi], "gamma": [lo, hi],
              "log10_theta": [lo, hi]},
      "output_dir": "."            # where fitted.csv etc. land
    }

Factor and treatment columns may be strings; labels map to level indices in
first-appearance order and the mapping is recorded in params.json.  Numbers
in all outputs carry 17 significant digits so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .checks import asymptotic_suite, identities_suite, oracle_suite
from .design import (
    Dataset,
    FullBasis,
    GroupingFactor,
    IdentifiabilityError,
    ModelSpec,
    RankError,
    SubsetBasis,
    build_design,
    eval_eta,
    rebuild_with_theta,
)
from .kernels import DomainError, KernelSpec, SplineFamily
from .selection import (
    OptimizationError,
    ScoreConfig,
    SearchBox,
    optimize,
    sigma_hat,
)
from .sim import (
    DEFAULT_ALPHAS,
    ScoreUndefinedError,
    SimDesign,
    StudyError,
    json_17g,
    run_study,
    write_replicates_csv,
    write_summary_json,
)

CURVE_POINTS = 201


class ConfigError(ValueError):
    pass


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if any(cell.strip() for cell in r)]
    cols = {}
    for j, name in enumerate(header):
        cols[name] = [r[j].strip() if j < len(r) else "" for r in body]
    return cols


def _numeric(values, field):
    try:
        return np.array([float(v) for v in values])
    except ValueError:
        raise ConfigError(f"column {field!r} contains a non-numeric value")


def _levels_first_appearance(values):
    order, codes = {}, []
    for v in values:
        if v not in order:
            order[v] = len(order) + 1
        codes.append(order[v])
    return codes, list(order)


def _kernel_from_config(cfg, x, tau_levels):
    kc = cfg.get("kernel", {})
    family = kc.get("family", "cubic")
    try:
        fam = SplineFamily(family)
    except ValueError:
        raise ConfigError(f"kernel.family: unknown family {family!r}")
    a = float(kc.get("domain_upper", float(np.max(x)) if len(x) else 1.0))
    if a < float(np.max(x)):
        raise ConfigError("kernel.domain_upper: smaller than the largest covariate")
    try:
        return KernelSpec(
            family=fam, domain_upper=a,
            theta=float(kc.get("theta", 0.0)),
            theta1=float(kc.get("theta1", 1.0)),
            theta12=float(kc.get("theta12", 0.0)),
            levels=tau_levels or 1,
            additive=bool(kc.get("additive", False)),
        )
    except DomainError as exc:
        raise ConfigError(f"kernel: {exc}")


def _box_from_config(cfg):
    bc = cfg.get("box", {})
    box = SearchBox()
    def pair(key, default):
        v = bc.get(key, default)
        if not (isinstance(v, (list, tuple)) and len(v) == 2 and v[0] <= v[1]):
            raise ConfigError(f"box.{key}: need [lo, hi]")
        return (float(v[0]), float(v[1]))
    return SearchBox(pair("log10_lambda", box.log10_lambda),
                     pair("gamma", box.gamma),
                     pair("log10_theta", box.log10_theta))


def cmd_fit(config_path: str, data_path: str) -> int:
    try:
        with open(config_path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        return _fail(2, f"config: {exc}")
    try:
        cols = _read_csv(data_path)
        resp = cfg.get("response", "y")
        covar = cfg.get("covariate", "x")
        for field in (resp, covar):
            if field not in cols:
                raise ConfigError(f"column {field!r} missing from {data_path}")
        y = _numeric(cols[resp], resp)
        x = _numeric(cols[covar], covar)
        if y.size == 0:
            raise ConfigError(f"{data_path}: no data rows")

        treatment = cfg.get("treatment")
        tau = None
        tau_labels = []
        if treatment is not None:
            if treatment not in cols:
                raise ConfigError(f"column {treatment!r} missing from {data_path}")
            tau, tau_labels = _levels_first_appearance(cols[treatment])
            tau = np.asarray(tau)

        kernel = _kernel_from_config(cfg, x, len(tau_labels))
        if kernel.family is SplineFamily.ANOVA and tau is None:
            raise ConfigError("treatment: required for the anova family")

        factors, factor_labels = [], {}
        for fc in cfg.get("random_effects", []):
            colname = fc.get("column")
            if colname not in cols:
                raise ConfigError(f"random_effects.column {colname!r} missing "
                                  f"from {data_path}")
            codes, labels = _levels_first_appearance(cols[colname])
            tying = fc.get("tying", "shared")
            blocks = None
            if tying == "per_block":
                bmap = fc.get("blocks")
                if not isinstance(bmap, dict):
                    raise ConfigError(f"random_effects.blocks: required for "
                                      f"per_block tying on {colname!r}")
                missing = [lab for lab in labels if lab not in bmap]
                if missing:
                    raise ConfigError(f"random_effects.blocks: no group for "
                                      f"level {missing[0]!r}")
                blocks = tuple(int(bmap[lab]) for lab in labels)
            try:
                factors.append(GroupingFactor(colname, tuple(codes),
                                              tying=tying, blocks=blocks))
            except ValueError as exc:
                raise ConfigError(f"random_effects: {exc}")
            factor_labels[colname] = labels

        bc = cfg.get("basis", {"type": "full"})
        if bc.get("type", "full") == "subset":
            basis = SubsetBasis(size=int(bc.get("size", 0)),
                                seed=int(bc.get("seed", 0)))
        else:
            basis = FullBasis()

        cc = cfg.get("criterion", {"type": "gcv"})
        crit_type = cc.get("type", "gcv")
        if crit_type not in ("gcv", "unbiased_risk"):
            raise ConfigError(f"criterion.type: unknown {crit_type!r}")
        try:
            score_cfg = ScoreConfig(criterion=crit_type,
                                    sigma2=cc.get("sigma2"),
                                    alpha=float(cc.get("alpha", 1.0)))
        except ValueError as exc:
            raise ConfigError(f"criterion: {exc}")
        box = _box_from_config(cfg)

        spec = ModelSpec(kernel=kernel, random_effects=tuple(factors), basis=basis)
        data = Dataset(y=y, x=x, tau=tau)
        dm = build_design(spec, data)
    except (ConfigError, DomainError, RankError, IdentifiabilityError,
            ValueError) as exc:
        return _fail(2, str(exc))

    try:
        params, fit, score = optimize(dm, y, score_cfg, box)
    except (OptimizationError, ScoreUndefinedError) as exc:
        return _fail(3, f"optimization: {exc}")

    out_dir = cfg.get("output_dir", ".")
    os.makedirs(out_dir, exist_ok=True)

    with open(os.path.join(out_dir, "fitted.csv"), "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "y", "eta_hat", "y_hat", "residual"])
        for i in range(dm.n):
            w.writerow([i, _g17(y[i]), _g17(fit.eta_hat[i]), _g17(fit.y_hat[i]),
                        _g17(fit.residuals[i])])

    try:
        sig2 = sigma_hat(fit)
    except ScoreUndefinedError:
        sig2 = None
    params_doc = {
        "log10_lambda": params.log10_lambda,
        "gamma": list(params.gamma),
        "kernel_theta": list(params.kernel_theta),
        "score": score,
        "criterion": crit_type,
        "alpha": score_cfg.alpha,
        "tr_a": fit.tr_a,
        "sigma_hat": sig2,
        "n": dm.n,
        "basis_size": int(dm.q - dm.m),
        "factor_levels": factor_labels,
        "treatment_levels": tau_labels,
    }
    with open(os.path.join(out_dir, "params.json"), "w", encoding="utf-8") as fh:
        fh.write(json_17g(params_doc))
        fh.write("\n")

    # rebuild under the selected kernel weights before evaluating the curve
    dm_sel = dm
    if params.kernel_theta and params.kernel_theta != dm.kernel_theta:
        dm_sel = rebuild_with_theta(dm, params.kernel_theta)
    grid = np.linspace(0.0, kernel.domain_upper, CURVE_POINTS)
    with open(os.path.join(out_dir, "curve.csv"), "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if kernel.family is SplineFamily.ANOVA:
            w.writerow(["x", "treatment", "eta_hat"])
            for t_idx, t_lab in enumerate(tau_labels, start=1):
                curve = eval_eta(dm_sel, fit.c_hat, grid,
                                 np.full(CURVE_POINTS, t_idx))
                for xv, ev in zip(grid, curve):
                    w.writerow([_g17(xv), t_lab, _g17(ev)])
        else:
            w.writerow(["x", "eta_hat"])
            curve = eval_eta(dm_sel, fit.c_hat, grid)
            for xv, ev in zip(grid, curve):
                w.writerow([_g17(xv), _g17(ev)])
    return 0


def _g17(v) -> str:
    return format(float(v), ".17g")


def cmd_simulate(args) -> int:
    try:
        design = SimDesign(kind=args.kind, n=args.n, replicates=args.replicates,
                           seed=args.seed,
                           alphas=tuple(float(a) for a in args.alphas.split(","))
                           if args.alphas else DEFAULT_ALPHAS,
                           basis_size=args.basis_size)
    except ValueError as exc:
        return _fail(2, f"design: {exc}")
    try:
        result = run_study(design, workers=args.workers)
    except StudyError as exc:
        return _fail(4, str(exc))
    os.makedirs(args.out_dir, exist_ok=True)
    write_replicates_csv(os.path.join(args.out_dir, "replicates.csv"), result)
    write_summary_json(os.path.join(args.out_dir, "summary.json"), result)
    if result.failures:
        print(f"warning: {len(result.failures)} replicates failed",
              file=sys.stderr)
    print(f"wrote {args.out_dir}/replicates.csv and summary.json "
          f"({len(result.replicates)} replicates)")
    return 0


def _print_outcomes(outcomes) -> bool:
    all_ok = True
    for oc in outcomes:
        status = "PASS" if oc.passed else "FAIL"
        print(f"{status} {oc.name}: max deviation {oc.deviation:.3e} "
              f"(bound {oc.bound:.3e})")
        all_ok = all_ok and oc.passed
    return all_ok


def cmd_check(args) -> int:
    if args.suite == "identities":
        ok = _print_outcomes(identities_suite(args.instances or 20, args.seed))
    elif args.suite == "oracle":
        ok = _print_outcomes(oracle_suite(args.instances or 50, args.seed))
    elif args.suite == "asymptotic":
        n_list = tuple(int(v) for v in args.n_list.split(","))
        outcomes, tables = asymptotic_suite(
            kinds=tuple(args.kinds.split(",")), n_list=n_list,
            replicates=args.replicates, seed=args.seed, workers=args.workers)
        for kind, rows in tables.items():
            for row in rows:
                print(f"{kind} n={row['n']}: median |U-loss-eps2|/loss = "
                      f"{row['u_ratio_median']:.4f}, |V-loss-eps2|/loss = "
                      f"{row['v_ratio_median']:.4f}")
        ok = _print_outcomes(outcomes)
    else:  # pragma: no cover - argparse restricts choices
        return _fail(2, f"unknown suite {args.suite!r}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixsmooth",
        description="Penalized least squares smoothing with random effects")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a model to a CSV dataset")
    p_fit.add_argument("config", help="JSON config path")
    p_fit.add_argument("data", help="CSV data path with header row")

    p_sim = sub.add_parser("simulate", help="run a Monte Carlo selector study")
    p_sim.add_argument("--kind", choices=["real", "latent", "mixture"],
                       default="real")
    p_sim.add_argument("--n", type=int, default=100)
    p_sim.add_argument("--replicates", type=int, default=100)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--alphas", default="",
                       help="comma list, default 1,1.2,1.4,1.6,1.8")
    p_sim.add_argument("--basis-size", type=int, default=None)
    p_sim.add_argument("--workers", type=int,
                       default=max(1, os.cpu_count() or 1))
    p_sim.add_argument("--out-dir", default=".")

    p_chk = sub.add_parser("check", help="run invariant/oracle/asymptotic suites")
    p_chk.add_argument("suite", choices=["identities", "oracle", "asymptotic"])
    p_chk.add_argument("--instances", type=int, default=None,
                       help="random instances per suite (20 identities, 50 oracle)")
    p_chk.add_argument("--seed", type=int, default=0)
    p_chk.add_argument("--kinds", default="real")
    p_chk.add_argument("--n-list", default="100,400,1600")
    p_chk.add_argument("--replicates", type=int, default=50)
    p_chk.add_argument("--workers", type=int,
                       default=max(1, os.cpu_count() or 1))
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on bad flags, which matches our contract
        return int(exc.code or 0)
    if args.command == "fit":
        return cmd_fit(args.config, args.data)
    if args.command == "simulate":
        return cmd_simulate(args)
    return cmd_check(args)


if __name__ == "__main__":
    sys.exit(main())
