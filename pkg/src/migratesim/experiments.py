"""Quantitative studies on top of the simulator and the mean-field layer.

Each study follows the same shape: a deterministic seed plan (cell index
times a fixed stride plus the replication index), independent replications
that can fan out over processes, and a plain-data result that the CLI can
dump to CSV next to a JSON manifest. Verdicts here are statistical, never
formal: a probe can answer "inconclusive" and a comparison can flag an
ordering without failing it.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .ctmc import simulate_open
from .meanfield import (
    OdeState,
    equilibrium_rls,
    integrate,
    mean_occupancy,
    solve_fixed_point_rlo,
    throughput,
)
from .model import (
    ConfigError,
    Policy,
    SystemConfig,
    SystemState,
    empirical_measure,
    rls_accepts,
)
from .stats import cell_seed, mean_sd, normal_ci, ols_slope


@dataclass(frozen=True)
class ExperimentResult:
    """One summarized metric: parameter echo, estimate, spread, provenance."""

    params: dict
    metric: str
    estimate: float
    sd: float
    ci95: Optional[tuple]
    reps: int
    seeds: tuple  # (first, last)
    wall_time: float

    def __post_init__(self):
        if self.ci95 is not None:
            lo, hi = self.ci95
            if not lo <= self.estimate <= hi:
                raise ValueError(
                    f"estimate {self.estimate!r} outside its own interval "
                    f"({lo!r}, {hi!r})"
                )


def summarize(params: dict, metric: str, values: Sequence[float],
              seeds: Sequence[int], wall_time: float) -> ExperimentResult:
    """Collapse per-replication values into an ExperimentResult row."""
    mean, sd = mean_sd(values)
    return ExperimentResult(
        params=dict(params), metric=metric, estimate=mean, sd=sd,
        ci95=normal_ci(values), reps=len(values),
        seeds=(min(seeds), max(seeds)), wall_time=wall_time,
    )


# ---------------------------------------------------------------------------
# stability probe

@dataclass
class StabilityReport:
    """Statistical verdict on positive recurrence from finite traces."""

    verdict: str  # stable | unstable | inconclusive
    growth_slope: float  # mean over per-seed slopes of total population
    slope_ci: Optional[tuple]
    tail_means: tuple  # population means over the 3rd and 4th quarter windows
    per_seed_slopes: tuple
    seeds: tuple
    horizon: float
    sample_dt: float


def _population_path(args):
    config, horizon, sample_dt, seed = args
    traj, _ = simulate_open(config, horizon, seed=seed, sample_dt=sample_dt,
                            track_sojourns=False)
    return np.asarray(traj.times), traj.counts.sum(axis=1).astype(float)


def stability_probe(config: SystemConfig, horizon: float,
                    seed_set: Sequence[int], sample_dt: Optional[float] = None,
                    jobs: int = 1) -> StabilityReport:
    """Classify an open system as stable, unstable, or inconclusive.

    Each seed contributes one total-population trace. The least-squares
    slope over the second half of the horizon is averaged over seeds;
    "stable" needs the slope interval to cover zero AND the third- and
    fourth-quarter population means to agree within 10%, "unstable" needs
    the interval to sit strictly above zero. Anything else is reported as
    inconclusive rather than guessed. With fewer seeds than the interval
    rule allows, no interval exists and the verdict is inconclusive.
    """
    if config.cap is not None:
        raise ConfigError(
            "stability probes need an uncapped system: a cap bounds the "
            "population and forces every config to look stable"
        )
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    seeds = tuple(int(s) for s in seed_set)
    if len(seeds) < 2:
        raise ValueError("need at least two seeds")
    if sample_dt is None:
        sample_dt = horizon / 500.0

    work = [(config, horizon, sample_dt, s) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            paths = list(pool.map(_population_path, work))
    else:
        paths = [_population_path(w) for w in work]

    times = paths[0][0]
    pops = np.stack([p for _, p in paths])
    half = times >= horizon / 2.0
    q3 = half & (times < 0.75 * horizon)
    q4 = times >= 0.75 * horizon
    if int(half.sum()) < 3 or not q3.any() or not q4.any():
        raise ValueError("too few samples for the window statistics; "
                         "shrink sample_dt")
    t_half = times[half]
    slopes = tuple(ols_slope(t_half, pop[half]) for pop in pops)
    mean_pop = pops.mean(axis=0)
    m3 = float(mean_pop[q3].mean())
    m4 = float(mean_pop[q4].mean())

    slope = float(np.mean(slopes))
    ci = normal_ci(slopes)
    quarters_agree = abs(m4 - m3) <= 0.10 * max(m3, m4) or max(m3, m4) < 1e-9
    if ci is None:
        verdict = "inconclusive"
    elif ci[0] > 0.0:
        verdict = "unstable"
    elif ci[0] <= 0.0 <= ci[1] and quarters_agree:
        verdict = "stable"
    else:
        verdict = "inconclusive"
    return StabilityReport(
        verdict=verdict, growth_slope=slope, slope_ci=ci,
        tail_means=(m3, m4), per_seed_slopes=slopes, seeds=seeds,
        horizon=float(horizon), sample_dt=float(sample_dt),
    )


# ---------------------------------------------------------------------------
# Lyapunov drift enumeration

def _occupancy_step(count: int, eps, up: bool):
    # change in max(eps, n_i) when one client enters (up) or leaves
    if up:
        return 1 - eps if count == 0 else 1
    return eps - 1 if count == 1 else -1


def lyapunov_drift(state, config: SystemConfig, eps, gamma_check):
    """Exact generator drift of f(n) = sum_i max(eps, n_i) at one state.

    Enumerates every transition the open rls system can make from n:
    arrivals, departures, and accepted migrations at rate beta*n_i/m per
    (origin, candidate) pair, candidates drawn over all m servers with the
    origin itself always rejected by strictness. Arithmetic stays in
    whatever number type the inputs carry, so Fraction-valued rates give an
    exact rational drift.
    """
    if config.policy is not Policy.RLS:
        raise ConfigError("drift analysis applies to the rls policy")
    if not 0 < eps < 1:
        raise ConfigError(f"eps must lie in (0, 1), got {eps!r}")
    if gamma_check <= 0:
        raise ConfigError(f"gamma must be positive, got {gamma_check!r}")
    lam = config.arrival_rates
    mu = config.service_rates
    lhs = eps * sum(mu)
    rhs = sum(mu) - sum(lam) - gamma_check
    if not lhs < rhs:
        raise ConfigError(
            "eps*sum(mu) must stay below sum(mu - lambda) - gamma: "
            f"{lhs!r} >= {rhs!r}"
        )

    counts = state.counts if isinstance(state, SystemState) else tuple(
        int(c) for c in state)
    if len(counts) != config.m or any(c < 0 for c in counts):
        raise ValueError(f"state must be {config.m} non-negative occupancies")
    m = config.m
    beta = config.resample_rate
    cap = config.cap

    terms = []
    for i, ni in enumerate(counts):
        if lam[i] and (cap is None or ni < cap):
            terms.append(lam[i] * _occupancy_step(ni, eps, up=True))
        if ni >= 1:
            terms.append(mu[i] * _occupancy_step(ni, eps, up=False))
            if beta:
                for j, nj in enumerate(counts):
                    if j == i or (cap is not None and nj >= cap):
                        continue
                    if rls_accepts(mu[i], ni, mu[j], nj):
                        delta = (_occupancy_step(ni, eps, up=False)
                                 + _occupancy_step(nj, eps, up=True))
                        terms.append(beta * ni * delta / m)
    return sum(terms)


def drift_exclusion_threshold(config: SystemConfig, eps, gamma_check) -> int:
    """Population size above which empty-server states must drift down.

    States with no empty server drift below -gamma outright; for the rest,
    the migration feed into empty servers (at least beta*p/m) dominates
    once the population p reaches this threshold. Together the two cases
    leave a finite set where the drift may be non-negative.
    """
    lam_sum = sum(config.arrival_rates)
    mu_sum = sum(config.service_rates)
    mu_min = min(config.service_rates)
    if config.resample_rate <= 0:
        raise ConfigError("the drift argument needs a positive resample rate")
    need = config.m * (lam_sum - mu_min + eps * mu_sum + gamma_check)
    return max(1, math.floor(need / (eps * config.resample_rate)) + 1)


# ---------------------------------------------------------------------------
# Kurtz deviation

def counts_from_measure(x0, m: int) -> tuple:
    """Per-server occupancies realizing a measure exactly at system size m.

    m * x0_k must be integral for every level k; otherwise no finite system
    of m servers has x0 as its empirical measure and we refuse rather than
    round.
    """
    x = np.asarray(getattr(x0, "x", x0), dtype=float)
    scaled = x * m
    per_level = np.rint(scaled)
    if float(np.max(np.abs(scaled - per_level))) > 1e-9:
        raise ValueError(
            f"m*x0 is not integral at m={m}; pick a representable x0 "
            "(every level fraction a multiple of 1/m)"
        )
    per_level = per_level.astype(int)
    if int(per_level.sum()) != m:
        raise ValueError(
            f"level counts sum to {int(per_level.sum())}, expected m={m}"
        )
    counts: List[int] = []
    for k, c in enumerate(per_level):
        counts.extend([k] * c)
    return tuple(counts)


def kurtz_deviation(config: SystemConfig, x0, t_end: float, seed: int,
                    sample_dt: float = 0.1, dt: float = 1e-3,
                    ode: Optional[list] = None) -> float:
    """Sup over sample times of the L1 gap between one run and the ODE.

    The simulation starts from counts that realize x0 exactly, the ODE from
    x0 itself; both are sampled on the same grid and compared pairwise.
    Pass a precomputed ``ode`` (the integrate output for matching
    parameters) to share one integration across many seeds.
    """
    x = np.asarray(getattr(x0, "x", x0), dtype=float)
    b_cap = x.size - 1
    if len(set(config.arrival_rates)) != 1 or set(config.service_rates) != {1.0}:
        raise ConfigError(
            "the mean-field limit assumes homogeneous arrivals and unit "
            "service rates"
        )
    if config.cap != b_cap:
        raise ConfigError(
            f"config.cap={config.cap!r} must equal the measure's top level "
            f"{b_cap} so both sides live on the same support"
        )
    lam = config.arrival_rates[0]
    initial = counts_from_measure(x, config.m)
    traj, _ = simulate_open(config, horizon=t_end, seed=seed,
                            sample_dt=sample_dt, initial=initial,
                            track_sojourns=False)
    if ode is None:
        ode = integrate(config.policy, x, t_end, dt=dt, sample_dt=sample_dt,
                        lam=lam, beta=config.resample_rate)
    if len(ode) != len(traj.times):
        raise RuntimeError(
            f"sample grids diverged: {len(traj.times)} simulation rows vs "
            f"{len(ode)} ode rows"
        )
    worst = 0.0
    for (t_ode, xs), t_sim, row in zip(ode, traj.times, traj.counts):
        if abs(t_ode - t_sim) > dt + 1e-9:
            raise RuntimeError(
                f"sample grids diverged at t={t_sim!r} vs {t_ode!r}"
            )
        emp = empirical_measure(row, b_cap).x
        worst = max(worst, float(np.abs(emp - xs.x).sum()))
    return worst


# ---------------------------------------------------------------------------
# throughput comparison

@dataclass
class ThroughputRow:
    """One (m, lambda, policy) cell of the comparison table."""

    m: int
    lam: float
    beta: float
    policy: str
    single_entry: bool
    reps: int
    seeds: tuple  # (first, last)
    clients: int
    censored: int
    mean_sojourn: float
    throughput: float
    ci95: Optional[tuple]  # over per-replication throughputs
    prediction: Optional[float]  # m = infinity mean-field value
    rel_error: Optional[float]


def _sojourn_rep(args):
    config, horizon, warmup, cutoff, seed = args
    _, records = simulate_open(config, horizon, warmup=warmup, seed=seed,
                               sample_dt=None)
    censored = 0
    parts = []
    for rec in records:
        if rec.arrive_t > cutoff:
            continue  # too close to the horizon to trust
        if rec.depart_t is None:
            censored += 1
        else:
            parts.append(rec.sojourn)
    return math.fsum(parts), len(parts), censored


@dataclass
class SojournSummary:
    """Pooled sojourn statistics for one configuration over many seeds."""

    config: SystemConfig
    horizon: float
    warmup: float
    cutoff: float
    reps: int
    seeds: tuple  # (first, last)
    clients: int
    censored: int
    mean_sojourn: Optional[float]  # None when no sojourn completed
    throughput: Optional[float]
    ci95: Optional[tuple]  # over per-replication throughputs
    per_rep: tuple  # (total_sojourn, completed, censored) per seed


def measure_sojourns(config: SystemConfig, horizon: float, warmup: float,
                     reps: int, base_seed: int = 0, cutoff: Optional[float] = None,
                     jobs: int = 1) -> SojournSummary:
    """Replicate one open run and pool the in-window sojourns.

    The window keeps clients arriving in [warmup, cutoff]; cutoff defaults
    to the horizon itself, in which case late arrivals are counted censored
    rather than excluded. Throughput is the inverse of the pooled mean
    sojourn, its interval the normal one over per-replication throughputs.
    """
    if reps < 1:
        raise ValueError("need at least one replication")
    if cutoff is None:
        cutoff = horizon
    seeds = [base_seed + r for r in range(reps)]
    work = [(config, horizon, warmup, cutoff, s) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reps_out = list(pool.map(_sojourn_rep, work))
    else:
        reps_out = [_sojourn_rep(w) for w in work]

    clients = sum(r[1] for r in reps_out)
    censored = sum(r[2] for r in reps_out)
    if clients:
        pooled = math.fsum(r[0] for r in reps_out) / clients
        thr = 1.0 / pooled
        ci = normal_ci([r[1] / r[0] for r in reps_out if r[1] > 0])
    else:
        pooled = thr = ci = None
    return SojournSummary(
        config=config, horizon=float(horizon), warmup=float(warmup),
        cutoff=float(cutoff), reps=reps, seeds=(seeds[0], seeds[-1]),
        clients=clients, censored=censored, mean_sojourn=pooled,
        throughput=thr, ci95=ci, per_rep=tuple(reps_out),
    )


def _predict(policy: Policy, lam: float, beta: float, cap: int):
    if policy is Policy.RLO:
        fp = solve_fixed_point_rlo(lam, beta, cap)
        return throughput(fp.y, lam)
    eq = equilibrium_rls(lam, beta, cap)
    return throughput(mean_occupancy(eq.state), lam)


def throughput_comparison(
    m_list: Sequence[int],
    lambda_grid: Sequence[float],
    beta: float,
    policy_set: Sequence[Union[Policy, str]] = (Policy.RLS, Policy.RLO),
    horizon: float = 2000.0,
    reps: int = 20,
    warmup: Optional[float] = None,
    base_seed: int = 0,
    include_self: bool = True,
    single_entry: bool = False,
    prediction_cap: int = 120,
    jobs: int = 1,
) -> List[ThroughputRow]:
    """Mean throughput per (m, lambda, policy), with the mean-field column.

    lambda is the offered load per server; with single_entry the whole
    stream m*lambda enters at server 1 and the prediction column is left
    empty (the homogeneous fixed point does not apply). Sojourns are
    measured over clients arriving in [warmup, horizon - 12/(1-lambda)]:
    the leading margin discards the transient (default one fifth of the
    horizon), the trailing margin keeps right-censoring negligible.
    Throughput is the inverse of the pooled mean sojourn; the interval is
    over per-replication throughputs.
    """
    policies = tuple(Policy(p) for p in policy_set)
    for lam in lambda_grid:
        if not 0 < lam < 1:
            raise ValueError(
                f"offered load {lam!r} outside (0, 1): sojourn estimation "
                "needs a stable system"
            )
    if warmup is None:
        warmup = 0.2 * horizon

    predictions: Dict[tuple, float] = {}
    if not single_entry:
        for lam in lambda_grid:
            for pol in policies:
                predictions[(lam, pol)] = _predict(pol, lam, beta,
                                                   prediction_cap)

    rows: List[ThroughputRow] = []
    cell = 0
    for m in m_list:
        for lam in lambda_grid:
            cutoff = horizon - 12.0 / (1.0 - lam)
            if cutoff <= warmup:
                raise ValueError(
                    f"horizon {horizon!r} too short for load {lam!r}: the "
                    "measurement window is empty"
                )
            for pol in policies:
                if single_entry:
                    arrivals: Union[float, tuple] = (m * lam,) + (0.0,) * (m - 1)
                else:
                    arrivals = lam
                config = SystemConfig(
                    m=m, policy=pol, arrival_rates=arrivals,
                    service_rates=1.0, resample_rate=beta,
                    include_self=include_self,
                )
                summary = measure_sojourns(
                    config, horizon, warmup, reps,
                    base_seed=cell_seed(base_seed, cell, 0),
                    cutoff=cutoff, jobs=jobs,
                )
                if summary.throughput is None:
                    raise RuntimeError(
                        f"no completed sojourns in cell m={m}, lam={lam!r}, "
                        f"policy={pol.value}; lengthen the horizon"
                    )
                pred = predictions.get((lam, pol))
                rows.append(ThroughputRow(
                    m=m, lam=lam, beta=beta, policy=pol.value,
                    single_entry=single_entry, reps=reps,
                    seeds=summary.seeds, clients=summary.clients,
                    censored=summary.censored,
                    mean_sojourn=summary.mean_sojourn,
                    throughput=summary.throughput, ci95=summary.ci95,
                    prediction=pred,
                    rel_error=None if pred is None
                    else abs(summary.throughput - pred) / pred,
                ))
                cell += 1
    return rows


def sojourn_ordering_flags(rows: Sequence[ThroughputRow]) -> List[str]:
    """Check rls sojourns never exceed rlo sojourns at matching cells.

    Returns human-readable flags: an inversion whose intervals overlap is
    reported as noise, one with disjoint intervals as a violation. An empty
    list means the expected ordering held everywhere.
    """
    cells: Dict[tuple, Dict[str, ThroughputRow]] = {}
    for row in rows:
        cells.setdefault((row.m, row.lam), {})[row.policy] = row
    flags = []
    for (m, lam), pair in sorted(cells.items()):
        if set(pair) != {"rls", "rlo"}:
            continue
        rls, rlo = pair["rls"], pair["rlo"]
        if rls.throughput >= rlo.throughput:
            continue  # faster service under rls, as expected
        overlap = (rls.ci95 is None or rlo.ci95 is None
                   or (rls.ci95[0] <= rlo.ci95[1]
                       and rlo.ci95[0] <= rls.ci95[1]))
        kind = "within noise" if overlap else "ordering violated"
        flags.append(
            f"m={m} lambda={lam!r}: rls throughput {rls.throughput!r} below "
            f"rlo {rlo.throughput!r} ({kind})"
        )
    return flags


# ---------------------------------------------------------------------------
# artifact writers

THROUGHPUT_COLUMNS = (
    "m", "lambda", "beta", "policy", "single_entry", "reps", "clients",
    "censored", "mean_sojourn", "throughput", "ci_lo", "ci_hi",
    "prediction", "rel_error",
)


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, bool):
        return str(int(value))
    return str(value)


def write_results_csv(path, columns: Sequence[str],
                      rows: Sequence[dict], comments: Sequence[str] = ()) -> None:
    """Generic results table: '#' comment lines, header row, repr floats."""
    with open(path, "w", newline="\n") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_cell(row.get(c)) for c in columns) + "\n")


def throughput_table_rows(rows: Sequence[ThroughputRow]) -> List[dict]:
    out = []
    for r in rows:
        out.append({
            "m": r.m, "lambda": r.lam, "beta": r.beta, "policy": r.policy,
            "single_entry": r.single_entry, "reps": r.reps,
            "clients": r.clients, "censored": r.censored,
            "mean_sojourn": r.mean_sojourn, "throughput": r.throughput,
            "ci_lo": None if r.ci95 is None else r.ci95[0],
            "ci_hi": None if r.ci95 is None else r.ci95[1],
            "prediction": r.prediction, "rel_error": r.rel_error,
        })
    return out


def write_manifest(path, name: str, params: dict, seeds: Sequence[int],
                   outputs: Sequence[str], started: float,
                   finished: float) -> None:
    """JSON run manifest; the only artifact that carries timestamps."""
    from . import __version__

    seeds = sorted(int(s) for s in seeds)
    data = {
        "experiment": name,
        "version": __version__,
        "params": params,
        "seeds": {"first": seeds[0], "last": seeds[-1], "count": len(seeds)}
        if seeds else {"first": None, "last": None, "count": 0},
        "outputs": list(outputs),
        "started": started,
        "finished": finished,
    }
    with open(path, "w", newline="\n") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
