"""Command-line front end for the simulators, solvers, and experiments.

Four subcommands cover the toolkit: ``balance`` replicates closed
time-to-balance runs against the analytic bound, ``open`` measures sojourn
statistics (or, with --probe, runs the stability probe), ``meanfield``
integrates the occupancy flow or solves for its equilibrium, and
``verify`` runs the built-in consistency suites.

Every run writes a JSON manifest before any results, refuses to reuse an
existing output directory unless --force is given, and keeps timestamps
out of the CSV files so a repeated command with the same seed reproduces
them byte for byte. Exit codes: 0 success, 1 configuration or usage
error, 2 completed with warnings (censoring, inconclusive or failed
checks, flagged relaxations).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import product
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .balance import (
    initial_all_at_one,
    initial_from_file,
    initial_uniform,
    measure_balance_time,
)
from .ctmc import config_echo, simulate_coupled
from .meanfield import (
    SolverError,
    equilibrium_rls,
    integrate,
    make_rhs,
    mean_occupancy,
    point_mass,
    sojourn_time,
    solve_fixed_point_rlo,
    st_leq,
    throughput,
    write_fixed_point_csv,
    write_ode_trajectory_csv,
)
from .model import ConfigError, Policy, SystemConfig, measure_from_tails, tail_sums
from .stats import poisson_gof, standard_error
from . import experiments as exp

# in-window censoring above this fraction marks the estimate unreliable
CENSOR_WARN_FRACTION = 0.01


@dataclass
class RunManifest:
    """Provenance record, the only artifact carrying wall-clock times."""

    subcommand: str
    config: dict
    seeds: tuple
    outputs: tuple
    started: float
    finished: Optional[float] = None
    version: str = field(default=__version__)

    def write(self, path) -> None:
        data = {
            "subcommand": self.subcommand,
            "version": self.version,
            "config": self.config,
            "seeds": {
                "first": min(self.seeds) if self.seeds else None,
                "last": max(self.seeds) if self.seeds else None,
                "count": len(self.seeds),
            },
            "outputs": list(self.outputs),
            "started": self.started,
            "finished": self.finished,
        }
        with open(path, "w", newline="\n") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)
            fh.write("\n")


class _Parser(argparse.ArgumentParser):
    # usage mistakes are configuration errors, not the default argparse 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _env_seed() -> int:
    raw = os.environ.get("MIGRATE_SIM_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"MIGRATE_SIM_SEED must be an integer, got {raw!r}")


def _resolve_seed(args) -> int:
    return args.seed if args.seed is not None else _env_seed()


def _prepare_outdir(path, force: bool) -> Path:
    out = Path(path)
    if out.exists():
        if not force:
            raise ConfigError(
                f"output directory {out} already exists; pass --force to "
                "write into it"
            )
    else:
        out.mkdir(parents=True)
    return out


def _parse_rates(text: str):
    """'0.8' -> 0.8; '4.5,0,0' -> (4.5, 0.0, 0.0)."""
    parts = [p.strip() for p in text.split(",")]
    try:
        values = [float(p) for p in parts]
    except ValueError:
        raise ConfigError(f"rates must be numbers, got {text!r}")
    return values[0] if len(values) == 1 else tuple(values)


def _parse_stop(text: str):
    if text == "exact":
        return "balanced", None
    if text.startswith("eps="):
        try:
            return "eps", float(Fraction(text[4:]))
        except (ValueError, ZeroDivisionError):
            raise ConfigError(f"bad tolerance in {text!r}")
    raise ConfigError(f'--stop must be "exact" or "eps=<value>", got {text!r}')


# ---------------------------------------------------------------------------
# balance

def cmd_balance(args) -> int:
    seed = _resolve_seed(args)
    m, n = args.m, args.n
    if args.initial == "file":
        if args.initial_file is None:
            raise ConfigError("--initial file needs --initial-file <path>")
        initial = initial_from_file(args.initial_file, m)
        if sum(initial) != n:
            raise ConfigError(
                f"initial file holds {sum(initial)} clients, --n says {n}"
            )
    elif args.initial == "uniform":
        initial = initial_uniform(m, n)
    else:
        initial = initial_all_at_one(m, n)
    stop, eps = _parse_stop(args.stop)
    config = SystemConfig(m=m, policy=Policy.RLS, arrival_rates=0.0,
                          service_rates=1.0, resample_rate=args.beta)

    outdir = _prepare_outdir(args.out, args.force)
    csv_path = outdir / "balance_times.csv"
    manifest = RunManifest(
        subcommand="balance",
        config={"m": m, "n": n, "initial": args.initial, "stop": args.stop,
                "beta": args.beta, "reps": args.reps, "horizon": args.horizon},
        seeds=tuple(seed + k for k in range(args.reps)),
        outputs=(str(csv_path),), started=time.time(),
    )
    manifest.write(outdir / "manifest.json")

    res = measure_balance_time(config, initial, stop=stop, eps=eps,
                               reps=args.reps, base_seed=seed,
                               horizon=args.horizon, jobs=args.jobs)

    comments = [
        f"config={config_echo(config)}",
        f"initial={','.join(str(c) for c in initial)} stop={args.stop}",
        f"mean={res.mean!r} sd={res.sd!r} ci95={res.ci95!r}",
        f"bound={res.bound!r} lower_bounds={res.lower_bounds!r}",
        f"censored={res.censored} horizon={res.horizon!r}",
    ]
    rows = [{"rep": k, "seed": s, "balance_time": t}
            for k, (s, t) in enumerate(zip(res.seeds, res.times))]
    exp.write_results_csv(csv_path, ("rep", "seed", "balance_time"), rows,
                          comments)
    manifest.finished = time.time()
    manifest.write(outdir / "manifest.json")

    print(f"balance time over {args.reps} runs: mean={res.mean!r} sd={res.sd!r}")
    print(f"ci95={res.ci95!r}")
    print(f"analytic bound: {res.bound!r}")
    print(f"lower bounds: {res.lower_bounds!r}")
    if res.censored:
        print(f"warning: {res.censored} replication(s) censored at the horizon")
        return 2
    return 0


# ---------------------------------------------------------------------------
# open system

def cmd_open(args) -> int:
    seed = _resolve_seed(args)
    lam = _parse_rates(args.lam)
    mu = _parse_rates(args.mu)
    m = args.m
    if m is None:
        for v in (lam, mu):
            if isinstance(v, tuple):
                m = len(v)
                break
    if m is None:
        raise ConfigError("give --m, or per-server lists for --lambda/--mu")
    config = SystemConfig(m=m, policy=args.policy, arrival_rates=lam,
                          service_rates=mu, resample_rate=args.beta,
                          include_self=not args.exclude_self)
    warmup = 0.2 * args.horizon if args.warmup is None else args.warmup

    outdir = _prepare_outdir(args.out, args.force)
    csv_path = outdir / ("probe.csv" if args.probe else "sojourns.csv")
    manifest = RunManifest(
        subcommand="open",
        config={"config": json.loads(config_echo(config)),
                "horizon": args.horizon, "warmup": warmup,
                "reps": args.reps, "probe": bool(args.probe)},
        seeds=tuple(seed + k for k in range(args.reps)),
        outputs=(str(csv_path),), started=time.time(),
    )
    manifest.write(outdir / "manifest.json")

    if args.probe:
        report = exp.stability_probe(config, args.horizon,
                                     seed_set=range(seed, seed + args.reps),
                                     jobs=args.jobs)
        rows = [{"seed": s, "slope": sl}
                for s, sl in zip(report.seeds, report.per_seed_slopes)]
        comments = [
            f"config={config_echo(config)}",
            f"verdict={report.verdict} growth_slope={report.growth_slope!r}",
            f"slope_ci={report.slope_ci!r} tail_means={report.tail_means!r}",
        ]
        exp.write_results_csv(csv_path, ("seed", "slope"), rows, comments)
        manifest.finished = time.time()
        manifest.write(outdir / "manifest.json")
        print(f"verdict: {report.verdict}")
        print(f"growth slope: {report.growth_slope!r} ci95={report.slope_ci!r}")
        print(f"quarter-window means: {report.tail_means!r}")
        return 2 if report.verdict == "inconclusive" else 0

    load = config.total_arrival_rate / config.total_service_rate
    warnings: List[str] = []
    if load >= 1.0:
        warnings.append(
            f"offered load {load!r} >= 1: sojourn statistics are "
            "unreliable; rerun with --probe for a stability verdict"
        )
        cutoff = args.horizon
    else:
        cutoff = args.horizon - 12.0 / (1.0 - load)
        if cutoff <= warmup:
            warnings.append("horizon too short for a censoring margin")
            cutoff = args.horizon

    summary = exp.measure_sojourns(config, args.horizon, warmup, args.reps,
                                   base_seed=seed, cutoff=cutoff,
                                   jobs=args.jobs)
    rows = []
    for k, (total, done, cens) in enumerate(summary.per_rep):
        rows.append({
            "rep": k, "seed": seed + k, "clients": done, "censored": cens,
            "mean_sojourn": total / done if done else None,
            "throughput": done / total if done else None,
        })
    comments = [
        f"config={config_echo(config)}",
        f"horizon={args.horizon!r} warmup={warmup!r} cutoff={cutoff!r}",
        f"pooled mean_sojourn={summary.mean_sojourn!r} "
        f"throughput={summary.throughput!r} ci95={summary.ci95!r}",
        f"clients={summary.clients} censored={summary.censored}",
    ]
    exp.write_results_csv(
        csv_path,
        ("rep", "seed", "clients", "censored", "mean_sojourn", "throughput"),
        rows, comments)
    manifest.finished = time.time()
    manifest.write(outdir / "manifest.json")

    print(f"clients: {summary.clients} (censored in window: {summary.censored})")
    print(f"mean sojourn: {summary.mean_sojourn!r}")
    print(f"throughput: {summary.throughput!r} ci95={summary.ci95!r}")
    total_seen = summary.clients + summary.censored
    if total_seen and summary.censored / total_seen > CENSOR_WARN_FRACTION:
        warnings.append(
            f"{summary.censored} of {total_seen} in-window clients censored"
        )
    for w in warnings:
        print(f"warning: {w}")
    return 2 if warnings else 0


# ---------------------------------------------------------------------------
# mean field

def cmd_meanfield(args) -> int:
    lam, beta, cap = args.lam, args.beta, args.bcap
    outdir = _prepare_outdir(args.out, args.force)
    params = {"policy": args.policy, "lambda": lam, "beta": beta,
              "bcap": cap, "mode": args.mode, "t_end": args.t_end,
              "dt": args.dt, "tol": args.tol}

    if args.mode == "integrate":
        csv_path = outdir / "trajectory.csv"
        manifest = RunManifest("meanfield", params, (), (str(csv_path),),
                               started=time.time())
        manifest.write(outdir / "manifest.json")
        sample_dt = args.sample_dt if args.sample_dt else args.t_end / 100.0
        samples = integrate(args.policy, point_mass(0, cap), args.t_end,
                            dt=args.dt or 1e-3, sample_dt=sample_dt,
                            lam=lam, beta=beta)
        comments = [f"policy={args.policy} lambda={lam!r} beta={beta!r} "
                    f"B={cap} dt={args.dt or 1e-3!r}"]
        write_ode_trajectory_csv(csv_path, samples, comments)
        manifest.finished = time.time()
        manifest.write(outdir / "manifest.json")
        final = samples[-1][1]
        rhs = make_rhs(args.policy, lam, beta)
        print(f"integrated to t={samples[-1][0]!r} ({len(samples)} samples)")
        print(f"mean occupancy: {mean_occupancy(final)!r}")
        print(f"residual: {float(np.max(np.abs(rhs(final.x))))!r}")
        return 0

    # fixed-point mode
    csv_path = outdir / ("fixed_point.csv" if args.policy == "rlo"
                         else "equilibrium.csv")
    manifest = RunManifest("meanfield", params, (), (str(csv_path),),
                           started=time.time())
    manifest.write(outdir / "manifest.json")
    code = 0
    if args.policy == "rlo":
        fp = solve_fixed_point_rlo(lam, beta, cap, tol=args.tol)
        comments = [f"lambda={lam!r} beta={beta!r} B={cap}"]
        write_fixed_point_csv(csv_path, fp, comments)
        print(f"y (mean occupancy): {fp.y!r}")
        print(f"z: {fp.z!r} residual: {fp.residual!r}")
        if lam > 0:
            print(f"sojourn: {sojourn_time(fp.y, lam)!r} "
                  f"throughput: {throughput(fp.y, lam)!r}")
        else:
            print("sojourn/throughput: undefined for an empty system")
    else:
        with warnings.catch_warnings():
            # the flagged field is reported below; skip the noisy banner
            warnings.simplefilter("ignore", RuntimeWarning)
            eq = equilibrium_rls(lam, beta, cap, tol=args.tol, dt=args.dt)
        y = mean_occupancy(eq.state)
        with open(csv_path, "w", newline="\n") as fh:
            fh.write(f"# lambda={lam!r} beta={beta!r} B={cap}\n")
            fh.write(f"# y={y!r} residual={eq.residual!r} "
                     f"two_start_gap={eq.two_start_gap!r}\n")
            fh.write("k,x_k\n")
            for k, v in enumerate(eq.state.x):
                fh.write(f"{k},{float(v)!r}\n")
        print(f"y (mean occupancy): {y!r}")
        print(f"residual: {eq.residual!r}")
        print(f"two-start agreement (L1): {eq.two_start_gap!r}")
        if lam > 0:
            print(f"sojourn: {sojourn_time(y, lam)!r} "
                  f"throughput: {throughput(y, lam)!r}")
        if eq.flagged:
            print("warning: the two relaxations disagree beyond 10x tol")
            code = 2
    manifest.finished = time.time()
    manifest.write(outdir / "manifest.json")
    return code


# ---------------------------------------------------------------------------
# verify suites

def _check_coupling(seed: int, reps: int):
    rg = []
    br = []
    for k in range(reps):
        tr = simulate_coupled((5, 5), (1.0, 1.0), (1.0, 1.0), horizon=2.0,
                              seed=seed + k, sample_dt=None)
        rg.append(sum(tr.final.red) + sum(tr.final.green))
        br.append(sum(tr.final.blue) + sum(tr.final.red))
    stat, df, p = poisson_gof(rg, 4.0)
    mean_br = float(np.mean(br))
    se = standard_error(br)
    ok = p > 0.01 and abs(mean_br - 14.0) <= 3 * se
    detail = (f"red+green ~ Poisson(4): chi2={stat:.2f} df={df} p={p:.4f}; "
              f"blue+red mean={mean_br:.3f} (expect 14 within {3 * se:.3f})")
    return ok, detail


def _check_kurtz(seed: int):
    b_cap, lam, beta, t_end = 40, 0.8, 0.5, 10.0
    x0 = np.zeros(b_cap + 1)
    x0[0] = 1.0
    ode = integrate("rlo", x0, t_end, dt=1e-3, sample_dt=0.5, lam=lam, beta=beta)
    means = {}
    for m in (100, 400):
        cfg = SystemConfig(m=m, policy=Policy.RLO, arrival_rates=lam,
                           service_rates=1.0, resample_rate=beta, cap=b_cap)
        devs = [exp.kurtz_deviation(cfg, x0, t_end, seed=seed + k,
                                    sample_dt=0.5, ode=ode)
                for k in range(5)]
        means[m] = float(np.mean(devs))
    budget = 6.0 / math.sqrt(400)
    ok = means[400] < means[100] and means[400] <= budget
    detail = (f"sup-L1 mean: m=100 {means[100]:.4f}, m=400 {means[400]:.4f} "
              f"(budget {budget:.4f})")
    return ok, detail


def _check_lyapunov(m: int, max_n: int):
    lam = Fraction(1, 5)
    eps = Fraction(1, 10)
    gamma = Fraction(1, 20)
    cfg = SystemConfig(m=m, policy=Policy.RLS, arrival_rates=lam,
                       service_rates=Fraction(1), resample_rate=Fraction(1))
    k_threshold = exp.drift_exclusion_threshold(cfg, eps, gamma)
    checked = 0
    inside = 0
    bad = []
    for state in product(range(max_n + 1), repeat=m):
        drift = exp.lyapunov_drift(state, cfg, eps, gamma)
        k0 = sum(1 for c in state if c == 0)
        if k0 > 0 and sum(state) < k_threshold:
            inside += 1  # the finite set the proof carves out
            continue
        checked += 1
        if drift >= 0:
            bad.append(state)
    ok = not bad
    detail = (f"{checked} states outside the excluded set all drift down; "
              f"{inside} excluded (population < {k_threshold} with an empty "
              f"server)")
    if bad:
        detail = f"non-negative drift at {bad[:5]}"
    return ok, detail


def _check_monotone(seed: int, pairs: int = 20):
    b_cap, lam, beta, t_end = 30, 0.8, 0.5, 5.0
    rng = np.random.default_rng(seed)
    failures = 0
    for _ in range(pairs):
        xa = rng.dirichlet(np.ones(b_cap + 1))
        xb = rng.dirichlet(np.ones(b_cap + 1))
        upper = measure_from_tails(np.maximum(tail_sums(xa), tail_sums(xb)))
        lo = integrate("rlo", xa, t_end, dt=1e-3, sample_dt=1.0,
                       lam=lam, beta=beta)
        hi = integrate("rlo", upper, t_end, dt=1e-3, sample_dt=1.0,
                       lam=lam, beta=beta)
        for (_, a), (_, b) in zip(lo, hi):
            if not st_leq(a, b, slack=1e-9):
                failures += 1
                break
    ok = failures == 0
    detail = f"{pairs - failures}/{pairs} ordered pairs stayed ordered"
    return ok, detail


def cmd_verify(args) -> int:
    seed = _resolve_seed(args)
    suites = (("coupling", "kurtz", "lyapunov", "monotone")
              if args.suite == "all" else (args.suite,))
    results = []
    for name in suites:
        if name == "coupling":
            ok, detail = _check_coupling(seed, args.reps)
        elif name == "kurtz":
            ok, detail = _check_kurtz(seed)
        elif name == "lyapunov":
            ok, detail = _check_lyapunov(args.m, args.max_n)
        else:
            ok, detail = _check_monotone(seed)
        results.append((name, ok, detail))
        print(f"{name}: {'PASS' if ok else 'FAIL'} ({detail})")

    if args.out is not None:
        outdir = _prepare_outdir(args.out, args.force)
        csv_path = outdir / "verify.csv"
        manifest = RunManifest(
            "verify",
            {"suite": args.suite, "seed": seed, "reps": args.reps,
             "m": args.m, "max_n": args.max_n},
            (seed,), (str(csv_path),), started=time.time(),
        )
        manifest.write(outdir / "manifest.json")
        rows = [{"check": n, "passed": int(ok), "detail": d.replace(",", ";")}
                for n, ok, d in results]
        exp.write_results_csv(csv_path, ("check", "passed", "detail"), rows)
        manifest.finished = time.time()
        manifest.write(outdir / "manifest.json")

    return 0 if all(ok for _, ok, _ in results) else 2


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="migrate-sim", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    def common(p):
        p.add_argument("--seed", type=int, default=None,
                       help="base seed (default: $MIGRATE_SIM_SEED or 0)")
        p.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                       help="parallel worker processes")
        p.add_argument("--force", action="store_true",
                       help="write into an existing output directory")

    b = sub.add_parser("balance", help="closed-system time to balance")
    b.add_argument("--m", type=int, required=True, help="number of servers")
    b.add_argument("--n", type=int, required=True, help="number of clients")
    b.add_argument("--initial", choices=("all-at-one", "uniform", "file"),
                   default="all-at-one")
    b.add_argument("--initial-file", default=None,
                   help="occupancy file for --initial file")
    b.add_argument("--stop", default="exact", help='"exact" or "eps=<value>"')
    b.add_argument("--reps", type=int, default=200)
    b.add_argument("--beta", type=float, default=1.0, help="resampling rate")
    b.add_argument("--horizon", type=float, default=None,
                   help="censoring horizon (default: 100x the bound)")
    b.add_argument("--out", default="runs/balance")
    common(b)
    b.set_defaults(func=cmd_balance)

    o = sub.add_parser("open", help="open-system sojourn statistics")
    o.add_argument("--m", type=int, default=None)
    o.add_argument("--policy", choices=("rls", "rlo"), required=True)
    o.add_argument("--lambda", dest="lam", required=True,
                   help="arrival rate: scalar or comma list")
    o.add_argument("--mu", default="1", help="service rate: scalar or comma list")
    o.add_argument("--beta", type=float, default=1.0)
    o.add_argument("--horizon", type=float, default=2000.0)
    o.add_argument("--warmup", type=float, default=None,
                   help="discarded prefix (default: 20%% of the horizon)")
    o.add_argument("--reps", type=int, default=20)
    o.add_argument("--exclude-self", action="store_true",
                   help="rlo uniform walk without self-jumps")
    o.add_argument("--probe", action="store_true",
                   help="run the stability probe instead of sojourn stats")
    o.add_argument("--out", default="runs/open")
    common(o)
    o.set_defaults(func=cmd_open)

    f = sub.add_parser("meanfield", help="occupancy flow and equilibria")
    f.add_argument("--policy", choices=("rls", "rlo"), required=True)
    f.add_argument("--lambda", dest="lam", type=float, required=True)
    f.add_argument("--beta", type=float, required=True)
    f.add_argument("--bcap", type=int, default=100, help="occupancy bound B")
    f.add_argument("--mode", choices=("integrate", "fixedpoint"),
                   default="fixedpoint")
    f.add_argument("--t-end", type=float, default=50.0)
    f.add_argument("--dt", type=float, default=None)
    f.add_argument("--sample-dt", type=float, default=None)
    f.add_argument("--tol", type=float, default=1e-10)
    f.add_argument("--out", default="runs/meanfield")
    f.add_argument("--force", action="store_true")
    f.set_defaults(func=cmd_meanfield)

    v = sub.add_parser("verify", help="built-in consistency suites")
    v.add_argument("suite", choices=("coupling", "kurtz", "lyapunov",
                                     "monotone", "all"))
    v.add_argument("--seed", type=int, default=None)
    v.add_argument("--reps", type=int, default=10000,
                   help="replications for the coupling check")
    v.add_argument("--m", type=int, default=3, help="servers for lyapunov")
    v.add_argument("--max-n", type=int, default=6,
                   help="per-server enumeration bound for lyapunov")
    v.add_argument("--out", default=None,
                   help="also write the results as CSV + manifest")
    v.add_argument("--force", action="store_true")
    v.set_defaults(func=cmd_verify)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits for usage errors and --version
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, SolverError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
