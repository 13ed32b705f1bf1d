"""Timing suites for NCV evaluation: scaling in n and p against exact
refitting, and thread scaling with bit-identity checks.

Timings use the monotonic ``perf_counter`` clock and report the median of
``repeats`` runs. Results assume an otherwise idle machine.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .families import Gaussian
from .fit import Problem, fit_inner
from .model import ModelSpec, build_design
from .ncv import fold_steps, ncv, ncv_refit
from .schemes import make_scheme

log = logging.getLogger(__name__)


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)
    exponents: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    cpu_count: int = field(default_factory=lambda: os.cpu_count() or 1)

    def to_dict(self) -> dict:
        return asdict(self)


def bench_problem(n: int, p: int, seed: int = 0) -> Problem:
    """Gaussian single-smooth problem with ``p`` coefficients."""
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(0, 1, n))
    y = np.sin(2 * np.pi * x) + 0.3 * rng.normal(size=n)
    design = build_design(ModelSpec(([f"s(x,k={p})"],), "gaussian"), {"x": x, "y": y})
    return Problem(design, y, Gaussian())


def median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def loglog_slope(x, t) -> float:
    """Least-squares slope of ``log t`` on ``log x``."""
    return float(np.polyfit(np.log(x), np.log(t), 1)[0])


def _time_ncv(pb, scheme, repeats, threads=1):
    fm = fit_inner(pb, np.zeros(pb.M))
    ncv(fm, scheme, gradient=True, threads=threads)  # JIT warm-up
    t_down = median_time(lambda: fold_steps(fm, scheme, threads), repeats)
    t_val = median_time(lambda: ncv(fm, scheme, gradient=False, threads=threads), repeats)
    t_tot = median_time(lambda: ncv(fm, scheme, gradient=True, threads=threads), repeats)
    return fm, {"downdate": t_down, "value": t_val, "derivative": max(t_tot - t_val, 0.0), "total": t_tot}


def scaling_suite(
    ns=(500, 1000, 2000, 4000),
    p_fixed: int = 40,
    ps=(20, 40, 80, 160),
    n_fixed: int = 4000,
    repeats: int = 5,
    brute: bool = True,
    brute_repeats: int = 1,
    seed: int = 0,
) -> BenchReport:
    """NCV evaluation (value + gradient, LOO folds) over ``n`` at fixed ``p``
    and over ``p`` at fixed ``n``; optionally exact refitting over ``n``."""
    rep = BenchReport()
    t_n, t_b = [], []
    for n in ns:
        pb = bench_problem(n, p_fixed, seed)
        sch = make_scheme("loo", n)
        fm, t = _time_ncv(pb, sch, repeats)
        row = {"suite": "n", "n": n, "p": pb.p, "alpha": 1, "M": pb.M, "threads": 1, **t}
        if brute:
            row["refit"] = median_time(lambda: ncv_refit(pb, fm.rho, sch, warm_start=fm.beta), brute_repeats)
            t_b.append(row["refit"])
        rep.rows.append(row)
        t_n.append(t["total"])
        log.info("n=%d p=%d total=%.4fs", n, pb.p, t["total"])
    t_p, p_act = [], []
    for p in ps:
        pb = bench_problem(n_fixed, p, seed)
        _, t = _time_ncv(pb, make_scheme("loo", n_fixed), repeats)
        rep.rows.append({"suite": "p", "n": n_fixed, "p": pb.p, "alpha": 1, "M": pb.M, "threads": 1, **t})
        t_p.append(t["total"])
        p_act.append(pb.p)
        log.info("n=%d p=%d total=%.4fs", n_fixed, pb.p, t["total"])
    rep.exponents["n"] = loglog_slope(ns, t_n)
    rep.exponents["p"] = loglog_slope(p_act, t_p)
    if brute:
        rep.exponents["refit_n"] = loglog_slope(ns, t_b)
    return rep


def parallel_suite(n: int = 4000, p: int = 50, threads=(1, 2, 4), repeats: int = 5, seed: int = 0) -> BenchReport:
    """NCV evaluation time per thread count; checks that value and gradient
    are bit-identical across thread counts."""
    rep = BenchReport()
    pb = bench_problem(n, p, seed)
    sch = make_scheme("loo", n)
    base = None
    identical = True
    times = {}
    for th in threads:
        fm, t = _time_ncv(pb, sch, repeats, threads=th)
        r = ncv(fm, sch, gradient=True, threads=th)
        out = (r.value, r.grad_rho.tobytes(), r.delta.tobytes())
        if base is None:
            base = out
        identical &= out == base
        times[th] = t["total"]
        rep.rows.append({"suite": "threads", "n": n, "p": pb.p, "alpha": 1, "M": pb.M, "threads": th, **t})
    t1 = times[threads[0]]
    rep.checks["bit_identical"] = bool(identical)
    rep.checks["speedup"] = {str(th): t1 / times[th] for th in threads}
    sp = [t1 / times[th] for th in threads]
    rep.checks["monotone"] = bool(all(b >= a for a, b in zip(sp, sp[1:])))
    return rep
