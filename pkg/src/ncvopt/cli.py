"""Command-line interface: ``ncvopt {fit,quantile,sim,bench}``.

Exit codes: 0 on success, 2 when the run finished with convergence
warnings, 1 on errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, DataError, RunConfig, load_config, numeric_column, read_csv
from .families import make_family
from .fit import Problem
from .model import Factor, build_design
from .optimize import optimize_ncv
from .schemes import make_scheme
from .uq import covariance, pointwise_bands

log = logging.getLogger("ncvopt")

EXIT_OK, EXIT_ERROR, EXIT_WARN = 0, 1, 2


def _fmt(v) -> str:
    return f"{v:.17g}" if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def load_schema() -> dict:
    return json.loads((Path(__file__).parent / "schemas" / "summary.schema.json").read_text())


def _load_data(cfg: RunConfig):
    if cfg.data_path is None:
        raise ConfigError(f"{cfg.source}: no data file given (top-level key 'data')")
    data = read_csv(cfg.data_path)
    src = str(cfg.data_path)
    spec = cfg.model_spec
    factors = {t.var for terms in spec.predictors for t in terms if isinstance(t, Factor)}
    for name in spec.covariates():
        if name not in factors:
            data[name] = numeric_column(data, name, src)
        elif name not in data:
            raise DataError(f"{src}: no column named {name!r}")
    data[cfg.response] = numeric_column(data, cfg.response, src)
    return data


def _scheme(cfg: RunConfig, n: int, data):
    s = cfg.scheme
    return make_scheme(
        s["kind"], n, data, rule=s.get("rule"), folds=s.get("folds", 10), seed=cfg.seed, block=s.get("block", 1)
    )


def _family(cfg: RunConfig):
    return make_family(cfg.family, **cfg.family_params)


def _summary(command, cfg, pb, scheme, res, cov, threads, timings, nu_hat=None):
    fm, st, crit = res.fm, res.state, res.criterion
    design = pb.design
    labels = [f"eta{b.predictor + 1}:{b.label}" for b in design.blocks]
    return {
        "schema_version": 1,
        "command": command,
        "n": pb.n,
        "p": pb.p,
        "K": pb.K,
        "M": pb.M,
        "family": {"name": pb.family.name, **pb.family.params()},
        "scheme": {
            "kind": scheme.kind,
            "m": scheme.m,
            "rule": cfg.scheme.get("rule"),
            "mean_alpha_size": float(np.mean(scheme.alpha_sizes)),
        },
        "variant": cfg.variant,
        "gamma": cfg.gamma,
        "V": float(crit.value),
        "V_per_datum": float(crit.normalized),
        "rho": st.rho.tolist(),
        "lambda": np.exp(st.rho).tolist(),
        "edf": float(fm.edf),
        "edf_terms": dict(zip(labels, map(float, fm.edf_terms))),
        "n_indefinite": crit.n_indefinite,
        "n_singular": crit.n_singular,
        "nu_hat": nu_hat if nu_hat is None else float(nu_hat),
        "covariance_kind": cov.kind,
        "converged": bool(st.converged and fm.converged),
        "message": st.message,
        "n_iter": st.iter,
        "n_evals": st.n_evals,
        "seed": cfg.seed,
        "threads": threads,
        "timings": timings,
    }


def _write_fit(out: Path, pb, data, fm, cov, level, history):
    names = pb.design.column_names()
    se = cov.se
    write_csv(out / "coefficients.csv", ["name", "estimate", "se"], zip(names, fm.beta, se))
    write_csv(out / f"covariance_{cov.kind}.csv", ["name", *names], ([nm, *row] for nm, row in zip(names, cov.V_mat)))
    covs = pb.design.spec.covariates()
    rows = []
    for r in range(pb.K):
        b = pointwise_bands(fm.beta, cov, pb.X * pb.mask[r], level)
        for i in range(pb.n):
            rows.append([i, r + 1, *(data[c][i] for c in covs), b.fit[i], b.se[i], b.lower[i], b.upper[i]])
    write_csv(out / "bands.csv", ["row", "predictor", *covs, "fit", "se", "lower", "upper"], rows)
    with (out / "trace.jsonl").open("w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True, default=_json_default) + "\n")


def run_fit(cfg: RunConfig, threads: int, out: Path, command: str = "fit", family=None, extra=None):
    """Fit, write artifacts, return ``(summary, exit_code, fitted_model)``."""
    t0 = time.perf_counter()
    data = _load_data(cfg)
    y = data[cfg.response]
    design = build_design(cfg.model_spec, data)
    pb = Problem(design, y, family or _family(cfg))
    scheme = _scheme(cfg, pb.n, data)
    t1 = time.perf_counter()
    res = optimize_ncv(pb, scheme, cfg.variant, cfg.gamma, cfg.rho0, threads, cfg.optimizer)
    t2 = time.perf_counter()
    uq = cfg.uq
    cov = covariance(
        res.fm,
        scheme,
        res.criterion,
        kind=uq["kind"],
        use_cv_residuals=uq.get("use_cv_residuals", True),
        scaled_by_edf=uq.get("scaled_by_edf", True),
        nu_method=uq.get("nu_method", "trace"),
    )
    t3 = time.perf_counter()
    out.mkdir(parents=True, exist_ok=True)
    _write_fit(out, pb, data, res.fm, cov, uq.get("level", 0.95), res.state.history)
    timings = {"setup": t1 - t0, "optimize": t2 - t1, "covariance": t3 - t2, "total": time.perf_counter() - t0}
    summary = _summary(command, cfg, pb, scheme, res, cov, threads, timings, cov.nu_hat)
    if extra:
        summary.update(extra)
    write_json(out / "summary.json", summary)
    code = EXIT_OK if summary["converged"] else EXIT_WARN
    if code == EXIT_WARN:
        log.warning("smoothing parameter optimization did not converge: %s", res.state.message)
    return summary, code, res.fm


def cmd_fit(args) -> int:
    cfg = _apply_common(load_config(args.config), args)
    summary, code, _ = run_fit(cfg, cfg.threads, cfg.out_dir)
    print(f"V = {summary['V']:.6g}  edf = {summary['edf']:.3f}  rho = {np.round(summary['rho'], 4).tolist()}")
    print(f"outputs written to {cfg.out_dir}")
    return code


def cmd_quantile(args) -> int:
    from dataclasses import replace

    from .families import ELF
    from .model import ModelSpec
    from .quantile import pilot_fit, select_elf_lambda

    cfg = _apply_common(load_config(args.config), args)
    q = cfg.quantile
    tau = args.tau if args.tau is not None else q.get("tau", 0.5)
    n_boot = args.n_boot if args.n_boot is not None else q.get("n_boot", 200)
    grid = args.grid if args.grid is not None else q.get("grid")
    data = _load_data(cfg)
    spec = replace(cfg.model_spec, family="gaussian")
    var_spec = ModelSpec((q["var_terms"],), "gamma") if "var_terms" in q else None
    pilot = pilot_fit(dict(data, y=data[cfg.response]), spec, var_spec)
    sel = select_elf_lambda(pilot, tau, n_boot, cfg.seed, grid)
    fam = ELF(tau, pilot.sigma_hat, sel.lambda_star)
    cfg.family = "elf"
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(cfg.out_dir / "elf_selection.csv", ["lambda", "mse"], zip(sel.lambda_grid, sel.mse))
    summary, code, fm = run_fit(cfg, cfg.threads, cfg.out_dir, "quantile", fam)
    below = float(np.mean(data[cfg.response] < fm.eta[:, 0]))
    summary["quantile"] = {
        "tau": tau,
        "lambda_star": sel.lambda_star,
        "proportion_below": below,
        "boot_size": sel.boot_size,
        "n_boot": sel.n_boot,
        "pilot_edf": pilot.k_edf,
    }
    write_json(cfg.out_dir / "summary.json", summary)
    print(f"tau = {tau}  lambda* = {sel.lambda_star:.4g}  proportion below = {below:.4f}  edf = {summary['edf']:.3f}")
    print(f"outputs written to {cfg.out_dir}")
    return code


def cmd_sim(args) -> int:
    from .simulate import TooManyFailures, recipe_dict, run_sim

    cfg = _apply_common(load_config(args.config) if args.config else RunConfig(), args)
    over = {"kind": args.recipe, "reps": args.reps, "n": args.n, "family": args.family, "seed": args.seed}
    if args.criteria:
        over["criteria"] = tuple(args.criteria.split(","))
    recipe = cfg.sim_recipe(**over)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        table = run_sim(recipe, workers=cfg.threads)
    except TooManyFailures as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR
    rows = table.table_rows()
    cols = ["criterion", "cp", "mse", "edf", "sn", "n", "failed"] + (["exceed"] if "exceed" in rows[0] else [])
    write_csv(out / "simtable.csv", cols, ([r[c] for c in cols] for r in rows))
    rep_cols = ["rep", "criterion", "ok", "cover", "mse", "edf", "sn", "nu_hat", "exceed", "converged"]
    write_csv(out / "sim_replicates.csv", rep_cols, ([r.get(c, "") for c in rep_cols] for r in table.rows))
    write_json(
        out / "sim_summary.json",
        {"recipe": recipe_dict(recipe), "summary": table.summary, "seconds": time.perf_counter() - t0},
    )
    for r in rows:
        print(f"{r['criterion']:>13s}  CP {r['cp']:.3f}  MSE {r['mse']:.4f}  edf {r['edf']:.2f}  failed {r['failed']}")
    print(f"outputs written to {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import parallel_suite, scaling_suite

    out = Path(args.out_dir or "ncvopt-bench")
    out.mkdir(parents=True, exist_ok=True)
    report = {}
    rows = []
    if args.suite in ("scaling", "all"):
        kw = {"ns": (250, 500, 1000, 2000), "ps": (10, 20, 40, 80), "n_fixed": 1000, "repeats": 3} if args.quick else {}
        rep = scaling_suite(**kw, seed=args.seed or 0)
        report["scaling"] = rep.to_dict()
        rows += rep.rows
        print("fitted exponents: " + ", ".join(f"{k} {v:.2f}" for k, v in rep.exponents.items()))
    if args.suite in ("parallel", "all"):
        kw = {"n": 1000, "p": 30, "repeats": 3} if args.quick else {}
        rep = parallel_suite(**kw, seed=args.seed or 0)
        report["parallel"] = rep.to_dict()
        rows += rep.rows
        sp = ", ".join(f"{k}: {v:.2f}x" for k, v in rep.checks["speedup"].items())
        print(f"speedup {sp}; bit-identical {rep.checks['bit_identical']}")
    keys = ["suite", "n", "p", "alpha", "M", "threads", "downdate", "value", "derivative", "total", "refit"]
    write_csv(out / "bench.csv", keys, ([r.get(k, "") for k in keys] for r in rows))
    write_json(out / "bench.json", report)
    print(f"outputs written to {out}")
    return EXIT_OK


def _apply_common(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "threads", None) is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg.threads = args.threads
    if getattr(args, "out_dir", None) is not None:
        cfg.out_dir = Path(args.out_dir)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ncvopt", description="Neighbourhood cross validation for smooth regression models.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, help="random seed (overrides the config)")
        sp.add_argument("--threads", type=int, help="worker threads/processes (overrides the config)")
        sp.add_argument("--out-dir", help="output directory (overrides the config)")

    f = sub.add_parser("fit", help="fit a model with NCV smoothness selection")
    f.add_argument("config", help="TOML run configuration")
    common(f)
    f.set_defaults(func=cmd_fit)

    q = sub.add_parser("quantile", help="smooth quantile regression with the ELF loss")
    q.add_argument("config", help="TOML run configuration")
    q.add_argument("--tau", type=float, help="target quantile")
    q.add_argument("--n-boot", type=int, help="bootstrap resamples for the loss smoothing")
    q.add_argument(
        "--grid",
        type=lambda s: [float(v) for v in s.split(",")],
        help="comma-separated loss smoothing grid, in multiples of sd(z)",
    )
    common(q)
    q.set_defaults(func=cmd_quantile)

    s = sub.add_parser("sim", help="coverage / MSE simulation study")
    s.add_argument("--config", help="TOML file with a [sim] table")
    s.add_argument("--recipe", choices=["ar1_1d", "ma_1d", "spatial_ma", "quantile_sim"])
    s.add_argument("--reps", type=int)
    s.add_argument("--n", type=int, help="data count (grid side for spatial_ma)")
    s.add_argument("--family", choices=["gaussian", "poisson", "gamma"])
    s.add_argument("--criteria", help="comma-separated subset of ncv,ncv_loo,reml,gcv")
    common(s)
    s.set_defaults(func=cmd_sim)

    b = sub.add_parser("bench", help="timing suites")
    b.add_argument("--suite", choices=["scaling", "parallel", "all"], default="all")
    b.add_argument("--quick", action="store_true", help="smaller sizes")
    b.add_argument("--seed", type=int)
    b.add_argument("--out-dir")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except (ConfigError, DataError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, np.linalg.LinAlgError, RuntimeError) as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
