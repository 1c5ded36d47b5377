"""Balance predicates, diagnostics, and time-to-balance measurement.

The closed-system question is how long the load-sensitive resampling
dynamics needs to even out an arbitrary initial placement of n clients on
m servers. Exact balance means no two servers differ by more than one
client; relative (eps) balance means every server sits within a factor
1 +- eps of the ideal level n/m. All level arithmetic is exact rational,
so boundary occupancies are classified deterministically.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

from .ctmc import simulate_closed
from .model import SystemConfig, eps_band, exact_fraction
from .stats import mean_sd, normal_ci


def balance_time_bound(m: int, n: int) -> float:
    """Upper bound on the expected time to exact balance from any start.

    Evaluates 3 (1 + ln m) (m^2 / n + ln m + 1) with the natural log.
    """
    if m < 2:
        raise ValueError(f"the bound needs at least two servers, got m={m}")
    if n < 1:
        raise ValueError(f"the bound needs at least one client, got n={n}")
    log_m = math.log(m)
    return 3.0 * (1.0 + log_m) * (m * m / n + log_m + 1.0)


def lower_bound_estimates(m: int, n: int) -> dict:
    """Reference lower bounds to report alongside measured balance times.

    last_move   m^2 / (m + n): expected wait for the final accepted move
                when exact balance requires hitting one specific server
                (sharp when m divides n).
    all_at_one  ln m: cost of draining a single fully loaded server, a
                lower bound only for the everything-on-one-server start.
    """
    if m < 1 or n < 1:
        raise ValueError("need m >= 1 servers and n >= 1 clients")
    return {"last_move": m * m / (m + n), "all_at_one": math.log(m)}


def is_balanced(counts: Sequence[int]) -> bool:
    """True iff no two servers differ by more than one client."""
    return max(counts) - min(counts) <= 1


def is_eps_balanced(counts: Sequence[int], eps) -> bool:
    """True iff every occupancy is within a factor 1 +- eps of n/m."""
    m = len(counts)
    n = sum(counts)
    lo, hi = eps_band(m, n, eps)
    return min(counts) >= lo and max(counts) <= hi


@dataclass
class BalanceDiagnostics:
    """Exact rational snapshot of how far a state is from balance.

    peak_level       the maximum occupancy v
    peak_count       servers holding exactly v
    near_peak_count  servers holding exactly v - 1
    below_count      servers holding less than v - 1
    target           ideal level n/m as a Fraction
    underflow        per-server max(target - N_i, 0)
    overflow         per-server max(N_i - target, 0)
    eps              tolerance used for the three load classes
    overloaded       indices with N_i > (1 + eps) target
    underloaded      indices with N_i < (1 - eps) target
    compliant        the rest
    overload_excess  sum over overloaded servers of N_i - (1 + eps) target
    """

    counts: tuple
    m: int
    n: int
    peak_level: int
    peak_count: int
    near_peak_count: int
    below_count: int
    target: Fraction
    underflow: tuple
    overflow: tuple
    total_underflow: Fraction
    total_overflow: Fraction
    eps: Fraction
    overloaded: tuple
    underloaded: tuple
    compliant: tuple
    overload_excess: Fraction
    balanced: bool
    eps_balanced: bool


def diagnostics(counts: Sequence[int], eps) -> BalanceDiagnostics:
    """Full balance diagnostics for one occupancy vector.

    Total underflow and overflow are equal by construction (mass above the
    ideal level must come from below it); that identity is recomputed and
    checked here rather than assumed.
    """
    counts = tuple(int(c) for c in counts)
    m = len(counts)
    if m == 0:
        raise ValueError("no servers")
    if any(c < 0 for c in counts):
        raise ValueError(f"negative occupancy in {counts}")
    n = sum(counts)
    eps = exact_fraction(eps)
    if not 0 < eps < 1:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    target = Fraction(n, m)
    v = max(counts)
    peak_count = sum(1 for c in counts if c == v)
    near_peak = sum(1 for c in counts if c == v - 1)
    below = m - peak_count - near_peak

    underflow = tuple(max(target - c, Fraction(0)) for c in counts)
    overflow = tuple(max(c - target, Fraction(0)) for c in counts)
    total_under = sum(underflow, Fraction(0))
    total_over = sum(overflow, Fraction(0))
    if total_under != total_over:
        raise AssertionError(
            f"underflow {total_under} != overflow {total_over}; "
            "rational bookkeeping is broken"
        )

    hi = (1 + eps) * target
    lo = (1 - eps) * target
    overloaded = tuple(i for i, c in enumerate(counts) if c > hi)
    underloaded = tuple(i for i, c in enumerate(counts) if c < lo)
    compliant = tuple(i for i in range(m)
                      if i not in overloaded and i not in underloaded)
    excess = sum((counts[i] - hi for i in overloaded), Fraction(0))

    return BalanceDiagnostics(
        counts=counts, m=m, n=n,
        peak_level=v, peak_count=peak_count,
        near_peak_count=near_peak, below_count=below,
        target=target, underflow=underflow, overflow=overflow,
        total_underflow=total_under, total_overflow=total_over,
        eps=eps, overloaded=overloaded, underloaded=underloaded,
        compliant=compliant, overload_excess=excess,
        balanced=is_balanced(counts),
        eps_balanced=not overloaded and not underloaded,
    )


# --- initial placements ----------------------------------------------------

def initial_all_at_one(m: int, n: int) -> tuple:
    """All n clients stacked on the first server."""
    if m < 1 or n < 0:
        raise ValueError("need m >= 1 and n >= 0")
    return (n,) + (0,) * (m - 1)


def initial_uniform(m: int, n: int) -> tuple:
    """As even as integers allow: floor(n/m) each, remainder on the lowest indices."""
    if m < 1 or n < 0:
        raise ValueError("need m >= 1 and n >= 0")
    base, rem = divmod(n, m)
    return tuple(base + (1 if i < rem else 0) for i in range(m))


def initial_from_file(path, m: int) -> tuple:
    """Read an occupancy vector: one non-negative integer per line or comma-separated."""
    with open(path) as fh:
        text = fh.read()
    tokens = [tok for tok in text.replace(",", " ").split() if tok]
    try:
        counts = tuple(int(tok) for tok in tokens)
    except ValueError:
        raise ValueError(f"{path}: occupancies must be integers, got {tokens!r}")
    if len(counts) != m:
        raise ValueError(f"{path}: found {len(counts)} occupancies, expected m={m}")
    if any(c < 0 for c in counts):
        raise ValueError(f"{path}: occupancies must be non-negative")
    return counts


# --- measurement -----------------------------------------------------------

@dataclass
class BalanceTimeResult:
    """Replicated time-to-balance measurement for one (config, start, stop) cell."""

    config: SystemConfig
    initial: tuple
    stop: str
    eps: Optional[float]
    seeds: tuple
    horizon: float
    times: tuple  # per replication; None where censored
    censored: int
    mean: Optional[float]  # over uncensored replications
    sd: Optional[float]
    ci95: Optional[tuple]  # None when fewer than 20 uncensored replications
    bound: Optional[float]
    lower_bounds: Optional[dict]

    @property
    def uncensored_times(self) -> list:
        return [t for t in self.times if t is not None]


def _balance_rep(args) -> Optional[float]:
    config, initial, stop, eps, horizon, seed = args
    res = simulate_closed(config, initial, horizon=horizon, stop=stop, eps=eps,
                          seed=seed, sample_dt=None)
    return res.stop_time if not res.censored else None


def measure_balance_time(config: SystemConfig, initial: Sequence[int],
                         stop: str = "balanced", eps=None, reps: int = 2,
                         base_seed: int = 0, horizon: Optional[float] = None,
                         jobs: int = 1) -> BalanceTimeResult:
    """Replicate a closed run over seeds base_seed .. base_seed + reps - 1.

    The default horizon is 100 times the analytic bound on the expected
    balance time, so an uncensored run is overwhelmingly likely whenever
    the dynamics does balance. Censored replications are excluded from the
    mean but counted and reported. A confidence interval (normal
    approximation) is attached only when at least 20 replications finished.
    """
    if reps < 2:
        raise ValueError(f"need at least 2 replications, got {reps}")
    initial = tuple(int(c) for c in initial)
    m = config.m
    n = sum(initial)
    bound = balance_time_bound(m, n) if m >= 2 and n >= 1 else None
    if horizon is None:
        if bound is None:
            raise ValueError("horizon required when the analytic bound is undefined")
        horizon = 100.0 * bound
    seeds = tuple(base_seed + k for k in range(reps))
    work = [(config, initial, stop, eps, horizon, s) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            times = list(pool.map(_balance_rep, work))
    else:
        times = [_balance_rep(w) for w in work]

    done = [t for t in times if t is not None]
    if done:
        mean, sd = mean_sd(done)
        ci = normal_ci(done)
    else:
        mean = sd = ci = None
    lower = lower_bound_estimates(m, n) if m >= 1 and n >= 1 else None
    return BalanceTimeResult(
        config=config, initial=initial, stop=stop,
        eps=None if eps is None else float(exact_fraction(eps)),
        seeds=seeds, horizon=horizon, times=tuple(times),
        censored=len(times) - len(done),
        mean=mean, sd=sd, ci95=ci, bound=bound, lower_bounds=lower,
    )
