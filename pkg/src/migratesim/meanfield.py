"""Large-system occupancy dynamics for both migration policies.

As the number of servers grows, the fraction x_k of servers holding exactly
k clients evolves along a deterministic ODE. Both policies share the same
queueing skeleton and differ only in the migration flux:

* load-oblivious ("rlo"): every client hops at rate beta to a uniformly
  chosen server, so a server gains migrants at rate beta * y, where
  y = sum_k k x_k is the mean per-server occupancy. The dynamics collapse
  to a birth-death flow with birth rate lam + beta * y below the cap and
  death rate 1 + beta * k off the empty level.
* load-sensitive ("rls"): a resampled client moves only when the move
  strictly improves her service share, which at this scale means the
  origin holds at least two clients more than the destination. The
  migration terms couple each level to the prefix and suffix of the
  distribution instead of to y alone.

Boundary discipline, used consistently everywhere: an empty server neither
serves nor ejects clients, and a server at the cap accepts neither arrivals
nor migrants. Written as flux differences, every right-hand side then
conserves probability mass exactly, level by level, which is what the
stochastic system does.

The stationary law of the rlo flow is available in closed form up to a
scalar root: flux balance gives xi_i = xi_0 * z**i / prod_{j<=i}(1+beta*j)
with z = lam + beta*y, and z is pinned down by the self-consistency of y,
expressed here as the root of ``g_of_z``. The rls flow has no closed form;
``equilibrium_rls`` relaxes the ODE from the two extreme starts and reports
how well they agree.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .model import Policy

__all__ = [
    "SolverError",
    "OdeState",
    "FixedPoint",
    "RlsEquilibrium",
    "point_mass",
    "rhs_rlo",
    "rhs_rlo_tail",
    "rhs_rls",
    "make_rhs",
    "rk4_step",
    "integrate",
    "g_of_z",
    "solve_fixed_point_rlo",
    "equilibrium_rls",
    "mean_occupancy",
    "sojourn_time",
    "throughput",
    "st_leq",
    "write_fixed_point_csv",
    "write_ode_trajectory_csv",
    "write_sweep_csv",
]

# Mass drift allowed before a step is declared broken, and how far below
# zero a component may dip before clipping is refused.
MASS_TOL = 1e-9
NEG_TOL = 1e-12


class SolverError(RuntimeError):
    """A numerical routine left its stated tolerance."""


def _vec(x) -> np.ndarray:
    """Accept a bare vector or anything carrying one in an ``x`` attribute."""
    return np.asarray(getattr(x, "x", x), dtype=float)


@dataclass(frozen=True)
class OdeState:
    """Occupancy distribution over the levels k = 0..b_cap."""

    x: np.ndarray
    b_cap: int

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        object.__setattr__(self, "x", x)
        if x.ndim != 1 or x.size != self.b_cap + 1:
            raise ValueError(
                f"state has {x.size} entries, expected b_cap+1 = {self.b_cap + 1}"
            )
        if abs(float(x.sum()) - 1.0) > MASS_TOL:
            raise ValueError(f"total mass {float(x.sum())!r} is not 1 within {MASS_TOL}")
        if float(x.min()) < -NEG_TOL:
            k = int(np.argmin(x))
            raise ValueError(f"x[{k}] = {float(x[k])!r} is below -{NEG_TOL}")


def point_mass(k: int, b_cap: int) -> OdeState:
    """The distribution with all servers at level k."""
    if not 0 <= k <= b_cap:
        raise ValueError(f"level {k} outside 0..{b_cap}")
    x = np.zeros(b_cap + 1)
    x[k] = 1.0
    return OdeState(x, b_cap)


def rhs_rlo(x, lam: float, beta: float) -> np.ndarray:
    """Time derivative of the occupancy distribution under the oblivious walk.

    Birth rate lam + beta*y below the cap (arrivals plus the uniform migrant
    stream), death rate 1 + beta*k off the empty level (one processor-sharing
    completion plus k independent resample clocks). Returns the flux
    differences, so the entries sum to zero up to rounding.
    """
    x = _vec(x)
    b = x.size - 1
    k = np.arange(x.size, dtype=float)
    y = float(k @ x)
    up = (lam + beta * y) * x
    up[b] = 0.0  # full servers accept neither arrivals nor migrants
    down = (1.0 + beta * k) * x
    down[0] = 0.0  # empty servers neither serve nor eject
    dx = -(up + down)
    dx[1:] += up[:-1]
    dx[:-1] += down[1:]
    return dx


def rhs_rlo_tail(s, lam: float, beta: float) -> np.ndarray:
    """Same flow expressed on tail sums s_k = sum_{j>=k} x_j.

    s_0 is the total mass and stays put; for k >= 1 the tail changes only
    through the flux across the k-1 | k boundary. The mean occupancy is
    recovered as y = sum_{j>=1} s_j.
    """
    s = _vec(s)
    y = float(s[1:].sum())
    k = np.arange(s.size, dtype=float)
    s_prev = np.empty_like(s)
    s_prev[0] = 0.0
    s_prev[1:] = s[:-1]
    s_next = np.empty_like(s)
    s_next[-1] = 0.0
    s_next[:-1] = s[1:]
    ds = (lam + beta * y) * (s_prev - s) - (1.0 + beta * k) * (s - s_next)
    ds[0] = 0.0
    return ds


def rhs_rls(x, lam: float, beta: float) -> np.ndarray:
    """Time derivative under load-sensitive resampling.

    The queueing part is the same birth-death flow as rhs_rlo with beta = 0.
    A resampled client accepts a move exactly when origin occupancy exceeds
    destination occupancy plus one, so level k gains migrants from levels
    >= k+2 and loses residents to levels <= k-2:

        beta * [ x_{k-1} T_{k+1} - x_k T_{k+2} - k x_k P_{k-2}
                 + (k+1) x_{k+1} P_{k-1} ]

    with T_j = sum_{i>=j} i x_i and P_j = sum_{i<=j} x_i (empty outside
    0..B). These four terms telescope, so mass is conserved, and no migrant
    can land above the cap because that would need an origin above it.
    """
    x = _vec(x)
    b = x.size - 1
    k = np.arange(x.size, dtype=float)

    up = lam * x
    up[b] = 0.0
    down = x.copy()
    down[0] = 0.0
    dx = -(up + down)
    dx[1:] += up[:-1]
    dx[:-1] += down[1:]

    # T padded two above the cap, P padded two below zero, so the shifted
    # reads below never index out of range.
    t_pad = np.zeros(x.size + 2)
    t_pad[:-2] = np.cumsum((k * x)[::-1])[::-1]
    p_pad = np.zeros(x.size + 2)
    p_pad[2:] = np.cumsum(x)
    x_prev = np.empty_like(x)
    x_prev[0] = 0.0
    x_prev[1:] = x[:-1]
    x_next = np.empty_like(x)
    x_next[-1] = 0.0
    x_next[:-1] = x[1:]

    idx = np.arange(x.size)
    gain_hi = x_prev * t_pad[idx + 1]  # migrant lands, origin held >= k+1
    loss_hi = x * t_pad[idx + 2]  # migrant lands elsewhere on level k
    loss_lo = k * x * p_pad[idx]  # resident leaves for a level <= k-2
    gain_lo = (k + 1.0) * x_next * p_pad[idx + 1]  # resident leaves level k+1
    dx += beta * (gain_hi - loss_hi - loss_lo + gain_lo)
    return dx


def make_rhs(policy: Union[Policy, str], lam: float, beta: float) -> Callable:
    """Bind rates into a one-argument derivative function."""
    policy = Policy(policy)
    if policy is Policy.RLO:
        return lambda x: rhs_rlo(x, lam, beta)
    return lambda x: rhs_rls(x, lam, beta)


def rk4_step(rhs: Callable, x: np.ndarray, dt: float) -> np.ndarray:
    k1 = rhs(x)
    k2 = rhs(x + (0.5 * dt) * k1)
    k3 = rhs(x + (0.5 * dt) * k2)
    k4 = rhs(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _advance(rhs: Callable, x: np.ndarray, dt: float, t: float) -> np.ndarray:
    """One step plus the mass audit: renormalize small drift, refuse large."""
    x = rk4_step(rhs, x, dt)
    mass = float(x.sum())
    if abs(mass - 1.0) >= MASS_TOL:
        raise SolverError(
            f"mass drifted to {mass!r} by t={t!r}; the step size dt={dt!r} "
            f"is too large for these rates, reduce it"
        )
    low = float(x.min())
    if low < -NEG_TOL:
        raise SolverError(
            f"component went to {low!r} by t={t!r}; the step size dt={dt!r} "
            f"is too large for these rates, reduce it"
        )
    np.maximum(x, 0.0, out=x)
    x /= x.sum()
    return x


def integrate(
    rhs,
    x0,
    t_end: float,
    dt: float = 1e-3,
    sample_dt: Optional[float] = None,
    lam: Optional[float] = None,
    beta: Optional[float] = None,
) -> List[Tuple[float, OdeState]]:
    """Classical fourth-order fixed-step integration of either flow.

    ``rhs`` is a one-argument callable, or a policy name ("rlo"/"rls") in
    which case ``lam`` and ``beta`` must be supplied. Samples are recorded
    at t=0, then whenever the running time crosses a multiple of
    ``sample_dt`` (every step if it is None), and always at t_end.
    """
    if isinstance(rhs, (str, Policy)):
        if lam is None or beta is None:
            raise ValueError("a policy-name rhs needs explicit lam and beta")
        rhs = make_rhs(rhs, lam, beta)
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt!r}")
    if t_end < 0:
        raise ValueError(f"t_end must be >= 0, got {t_end!r}")
    x = _vec(x0).copy()
    b_cap = x.size - 1
    OdeState(x, b_cap)  # validate the start before running

    samples: List[Tuple[float, OdeState]] = [(0.0, OdeState(x.copy(), b_cap))]
    n_full = int(math.floor(t_end / dt + 1e-9))
    remainder = t_end - n_full * dt
    next_sample = sample_dt if sample_dt is not None else 0.0
    for i in range(1, n_full + 1):
        t = i * dt
        x = _advance(rhs, x, dt, t)
        if sample_dt is None:
            samples.append((t, OdeState(x.copy(), b_cap)))
        elif t + 1e-12 >= next_sample:
            samples.append((t, OdeState(x.copy(), b_cap)))
            next_sample += sample_dt * math.ceil((t + 1e-12 - next_sample) / sample_dt + 1e-12)
    if remainder > 1e-12 * max(1.0, dt):
        x = _advance(rhs, x, remainder, t_end)
        samples.append((t_end, OdeState(x.copy(), b_cap)))
    elif samples[-1][0] < t_end - 1e-12 or not samples:
        samples.append((t_end, OdeState(x.copy(), b_cap)))
    return samples


def _relax(rhs: Callable, x: np.ndarray, tol: float, dt: float, max_t: float,
           check_every: float) -> Tuple[np.ndarray, float, float]:
    """Step until the derivative's max norm drops below tol.

    Returns (state, residual, elapsed). The fixed point of the exact flow is
    also a fixed point of the discrete step, so dt limits stability and the
    convergence clock, never where we land.
    """
    steps_per_check = max(1, int(round(check_every / dt)))
    t = 0.0
    residual = float(np.max(np.abs(rhs(x))))
    while residual >= tol:
        if t >= max_t:
            raise SolverError(
                f"no equilibrium within t={max_t}: residual {residual!r} "
                f"still above tol={tol!r}"
            )
        for _ in range(steps_per_check):
            t += dt
            x = _advance(rhs, x, dt, t)
        residual = float(np.max(np.abs(rhs(x))))
    return x, residual, t


def _check_rates(lam, beta, b_cap) -> None:
    if not (isinstance(b_cap, int) and b_cap >= 1):
        raise ValueError(f"b_cap must be an integer >= 1, got {b_cap!r}")
    if not (math.isfinite(lam) and lam >= 0):
        raise ValueError(f"lam must be a finite rate >= 0, got {lam!r}")
    if not (math.isfinite(beta) and beta >= 0):
        raise ValueError(f"beta must be a finite rate >= 0, got {beta!r}")


def g_of_z(z: float, lam: float, beta: float, b_cap: int) -> float:
    """Root function for the stationary oblivious-walk occupancy.

    With w_i = z**i / prod_{j<=i}(1 + beta*j),

        g(z) = (z - lam) * (1 + sum_i w_i) - beta * sum_i i*w_i.

    At the root, y = (z - lam)/beta equals the mean of the normalized w,
    which is exactly the self-consistency the stationary law needs. The
    beta factor on the second sum keeps those two readings of y identical;
    dropping it would misplace the root for every beta != 1. Products are
    accumulated iteratively and rescaled near the float ceiling, so large
    caps neither overflow nor lose the sign.
    """
    _check_rates(lam, beta, b_cap)
    if z < 0:
        raise ValueError(f"z must be >= 0, got {z!r}")
    w = 1.0
    total = 0.0  # sum of w_i, possibly rescaled
    total_i = 0.0  # sum of i * w_i, same scale
    shift = 0
    for i in range(1, b_cap + 1):
        w *= z / (1.0 + beta * i)
        if w > 1e300 or total > 1e300 or total_i > 1e300:
            w *= 1e-300
            total *= 1e-300
            total_i *= 1e-300
            shift += 1
        total += w
        total_i += i * w
    core = (z - lam) * total - beta * total_i
    if shift == 0:
        return (z - lam) + core
    # The constant (z - lam) term is invisible at this magnitude; only the
    # sign can matter to a caller hunting a bracket.
    if core == 0.0:
        return z - lam
    return math.copysign(math.inf, core)


@dataclass(frozen=True)
class FixedPoint:
    """Stationary occupancy law of the oblivious walk."""

    xi: np.ndarray
    y: float  # mean per-server occupancy
    z: float  # root of g_of_z; z = lam + beta * y
    residual: float  # max-norm of rhs_rlo at xi


def _xi_from_z(z: float, lam: float, beta: float, b_cap: int) -> np.ndarray:
    """xi_i by iterative products, normalized with a compensated sum."""
    xi = np.empty(b_cap + 1)
    xi[0] = 1.0
    for i in range(1, b_cap + 1):
        xi[i] = xi[i - 1] * z / (1.0 + beta * i)
    xi /= math.fsum(xi)
    return xi


def solve_fixed_point_rlo(lam: float, beta: float, b_cap: int,
                          tol: float = 1e-10) -> FixedPoint:
    """Stationary law, mean occupancy and root for the oblivious walk.

    Bisects g_of_z on [lam, z_hi], growing z_hi geometrically until the
    sign flips; g is negative at lam and eventually positive because every
    product term gains the factor (z - lam - beta*i) once z clears
    lam + beta*b_cap. Requires lam < 1: at or above unit load no stationary
    regime exists, matching the stability threshold of the finite system.
    """
    _check_rates(lam, beta, b_cap)
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol!r}")
    if lam >= 1:
        raise ValueError(
            f"no stationary law at per-server load lam={lam!r}: the fixed "
            f"point requires lam < 1 (unit service rate)"
        )
    if lam == 0.0:
        xi = np.zeros(b_cap + 1)
        xi[0] = 1.0
        return FixedPoint(xi=xi, y=0.0, z=0.0, residual=0.0)
    if beta == 0.0:
        # Plain birth-death truncation: xi_k proportional to lam**k.
        xi = np.empty(b_cap + 1)
        xi[0] = 1.0
        for i in range(1, b_cap + 1):
            xi[i] = xi[i - 1] * lam
        xi /= math.fsum(xi)
        y = float(np.arange(b_cap + 1) @ xi)
        residual = float(np.max(np.abs(rhs_rlo(xi, lam, beta))))
        if residual >= tol:
            raise SolverError(f"degenerate fixed point residual {residual!r} >= tol")
        return FixedPoint(xi=xi, y=y, z=lam, residual=residual)

    lo = lam
    hi = max(1.0, 2.0 * lam)
    for _ in range(400):
        if g_of_z(hi, lam, beta, b_cap) > 0.0:
            break
        hi *= 2.0
    else:
        raise SolverError(f"could not bracket the root above z={hi!r}")
    for _ in range(400):
        if hi - lo <= 1e-15 * max(1.0, hi):
            break
        mid = 0.5 * (lo + hi)
        if g_of_z(mid, lam, beta, b_cap) > 0.0:
            hi = mid
        else:
            lo = mid
    z = 0.5 * (lo + hi)
    xi = _xi_from_z(z, lam, beta, b_cap)
    y = (z - lam) / beta
    residual = float(np.max(np.abs(rhs_rlo(xi, lam, beta))))
    if residual >= tol:
        raise SolverError(
            f"fixed point at z={z!r} has residual {residual!r} >= tol={tol!r}"
        )
    return FixedPoint(xi=xi, y=y, z=z, residual=residual)


@dataclass(frozen=True)
class RlsEquilibrium:
    """Relaxed load-sensitive equilibrium plus the two-start agreement audit.

    Uniqueness of this equilibrium is an observation, not a theorem, so the
    distance between the empty-start and full-start limits is reported
    rather than assumed away; ``flagged`` marks a gap above 10x the
    residual tolerance.
    """

    state: OdeState
    residual: float
    two_start_gap: float
    flagged: bool
    elapsed: float


def equilibrium_rls(lam: float, beta: float, b_cap: int, tol: float = 1e-10,
                    dt: Optional[float] = None, max_t: float = 20000.0,
                    check_every: float = 2.0) -> RlsEquilibrium:
    """Relax the load-sensitive flow to rest from both extreme starts.

    Returns the empty-start limit. The full-start run only feeds the
    agreement gap.
    """
    _check_rates(lam, beta, b_cap)
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol!r}")
    if lam >= 1:
        raise ValueError(
            f"no equilibrium at per-server load lam={lam!r}: requires lam < 1"
        )
    if dt is None:
        # Explicit stepping is stable for dt against the stiffest level's
        # total rate; stay a factor of a few inside that.
        dt = 0.5 / (1.0 + lam + beta * b_cap)
    rhs = make_rhs(Policy.RLS, lam, beta)
    x_empty, residual, elapsed = _relax(
        rhs, point_mass(0, b_cap).x.copy(), tol, dt, max_t, check_every
    )
    x_full, _, elapsed_full = _relax(
        rhs, point_mass(b_cap, b_cap).x.copy(), tol, dt, max_t, check_every
    )
    gap = float(np.abs(x_empty - x_full).sum())
    flagged = gap > 10.0 * tol
    if flagged:
        warnings.warn(
            f"two-start equilibria differ by {gap!r} in L1 (tol {tol!r}); "
            f"treat the returned state with care",
            RuntimeWarning,
            stacklevel=2,
        )
    return RlsEquilibrium(
        state=OdeState(x_empty, b_cap),
        residual=residual,
        two_start_gap=gap,
        flagged=flagged,
        elapsed=max(elapsed, elapsed_full),
    )


def mean_occupancy(x) -> float:
    """y = sum_k k x_k, the mean number of clients per server."""
    x = _vec(x)
    return float(np.arange(x.size, dtype=float) @ x)


def sojourn_time(y: float, lam: float) -> float:
    """Mean time in system via the population law y = lam * T."""
    if lam <= 0:
        raise ValueError(f"sojourn time needs a positive arrival rate, got {lam!r}")
    return y / lam


def throughput(y: float, lam: float) -> float:
    """Inverse mean sojourn time, lam / y."""
    if y <= 0:
        raise ValueError(
            f"throughput lam/y is undefined at mean occupancy y={y!r}"
        )
    return lam / y


def st_leq(x, x_prime, slack: float = 1e-12) -> bool:
    """Stochastic dominance: every prefix of x at least matches x_prime's.

    Smaller in this order means more mass at low occupancies.
    """
    a = _vec(x)
    b = _vec(x_prime)
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    return bool(np.all(np.cumsum(a) >= np.cumsum(b) - slack))


def write_fixed_point_csv(path, fp: FixedPoint, comments: Sequence[str] = ()) -> None:
    """Two columns (k, xi_k); '#' lines first, stable float text via repr."""
    with open(path, "w", newline="\n") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        fh.write(f"# y={fp.y!r} z={fp.z!r} residual={fp.residual!r}\n")
        fh.write("k,xi_k\n")
        for k, v in enumerate(fp.xi):
            fh.write(f"{k},{float(v)!r}\n")


def write_ode_trajectory_csv(path, samples: Sequence[Tuple[float, OdeState]],
                             comments: Sequence[str] = ()) -> None:
    """Wide format (t, x_0..x_B), one row per recorded sample."""
    if not samples:
        raise ValueError("no samples to write")
    b_cap = samples[0][1].b_cap
    with open(path, "w", newline="\n") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        fh.write("t," + ",".join(f"x_{k}" for k in range(b_cap + 1)) + "\n")
        for t, state in samples:
            fh.write(f"{float(t)!r}," + ",".join(f"{float(v)!r}" for v in state.x) + "\n")


SWEEP_COLUMNS = ("lambda", "beta", "B", "policy", "y", "sojourn", "throughput", "residual")


def write_sweep_csv(path, rows: Sequence[dict], comments: Sequence[str] = ()) -> None:
    """Summary table, one row per (lambda, beta, B, policy) cell."""
    with open(path, "w", newline="\n") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        fh.write(",".join(SWEEP_COLUMNS) + "\n")
        for row in rows:
            cells = []
            for col in SWEEP_COLUMNS:
                v = row[col]
                cells.append(f"{v!r}" if isinstance(v, float) else str(v))
            fh.write(",".join(cells) + "\n")
