"""Core types and primitive operations for the migration system.

A system is a pool of ``m`` parallel servers. Each server serves its
resident clients processor-sharing style at a fixed total rate, so a client
sharing a server with ``k - 1`` others receives a ``rate / k`` slice.
Clients may arrive from outside, depart on service completion, and resample
their server at a fixed per-client rate. Two resampling policies exist:

* ``rls``: the client draws a candidate server uniformly at random and moves
  only if its service share would strictly improve there.
* ``rlo``: the client hops along a configured random walk regardless of
  load, so the move is always accepted.

Everything downstream (event-driven simulation, balance diagnostics, mean
field limits) builds on the value objects and predicates defined here.
"""

from __future__ import annotations

import json
import math
import numbers
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Optional, Sequence, Union

import numpy as np


class Policy(str, Enum):
    """Resampling policy: load-sensitive ("rls") or load-oblivious ("rlo")."""

    RLS = "rls"
    RLO = "rlo"


class ConfigError(ValueError):
    """Raised when a system description is structurally invalid."""


def _as_rate_tuple(value, m: int, key: str) -> tuple:
    """Broadcast a scalar rate to length m, or validate a length-m sequence.

    Exact numeric types (int, Fraction) are kept as-is so that callers doing
    exact-arithmetic audits, such as the drift enumeration, are not silently
    degraded to floats.
    """
    if isinstance(value, numbers.Real):
        value = [value] * m
    try:
        rates = tuple(value)
    except TypeError:
        raise ConfigError(f"{key!r} must be a number or a sequence of numbers")
    if len(rates) != m:
        raise ConfigError(f"{key!r} has length {len(rates)}, expected m={m}")
    for i, r in enumerate(rates):
        if not isinstance(r, numbers.Real) or not math.isfinite(float(r)) or r < 0:
            raise ConfigError(f"{key}[{i}] = {r!r} is not a finite non-negative rate")
    return rates


def uniform_jump_matrix(m: int, include_self: bool = True) -> tuple:
    """Uniform random-walk row distribution over the m servers.

    With include_self, every entry is 1/m and a jump may land on the origin
    server (a no-op move). Without it, mass 1/(m-1) is spread over the other
    servers; m must then be at least 2.
    """
    if include_self:
        row = (1.0 / m,) * m
        return tuple(row for _ in range(m))
    if m < 2:
        raise ConfigError("cannot exclude self-jumps with a single server")
    rows = []
    for i in range(m):
        rows.append(tuple(0.0 if j == i else 1.0 / (m - 1) for j in range(m)))
    return tuple(rows)


def _check_jump_matrix(q, m: int) -> tuple:
    rows = []
    if len(q) != m:
        raise ConfigError(f"'jump_matrix' has {len(q)} rows, expected m={m}")
    for i, row in enumerate(q):
        row = tuple(float(v) for v in row)
        if len(row) != m:
            raise ConfigError(f"'jump_matrix' row {i} has length {len(row)}, expected {m}")
        if any(v < 0 or not math.isfinite(v) for v in row):
            raise ConfigError(f"'jump_matrix' row {i} has a negative or non-finite entry")
        if abs(sum(row) - 1.0) > 1e-9:
            raise ConfigError(f"'jump_matrix' row {i} sums to {sum(row)!r}, expected 1")
        rows.append(row)
    _check_irreducible(rows)
    return tuple(rows)


def _reachable(rows, start: int, transpose: bool) -> set:
    m = len(rows)
    seen = {start}
    stack = [start]
    while stack:
        i = stack.pop()
        for j in range(m):
            w = rows[j][i] if transpose else rows[i][j]
            # self-loops do not contribute to connectivity
            if j != i and w > 0 and j not in seen:
                seen.add(j)
                stack.append(j)
    return seen


def _check_irreducible(rows) -> None:
    m = len(rows)
    fwd = _reachable(rows, 0, transpose=False)
    if len(fwd) != m:
        missing = sorted(set(range(m)) - fwd)
        raise ConfigError(
            f"'jump_matrix' is reducible: servers {missing} are unreachable from server 0"
        )
    bwd = _reachable(rows, 0, transpose=True)
    if len(bwd) != m:
        missing = sorted(set(range(m)) - bwd)
        raise ConfigError(
            f"'jump_matrix' is reducible: servers {missing} cannot reach server 0"
        )


@dataclass(frozen=True)
class SystemConfig:
    """Immutable description of one system.

    m                number of servers (>= 1)
    service_rates    per-server total service rate, length m
    arrival_rates    per-server exogenous arrival rate, length m
    resample_rate    per-client resampling clock rate (>= 0)
    policy           Policy.RLS or Policy.RLO
    jump_matrix      row-stochastic walk for rlo; None means uniform over all
                     m servers, self-jumps included (include_self toggles that)
    cap              optional per-server occupancy cap (arrivals beyond it
                     are dropped and counted)
    include_self     whether the default uniform walk may land on the origin
    """

    m: int
    service_rates: tuple = ()
    arrival_rates: tuple = ()
    resample_rate: float = 1.0
    policy: Policy = Policy.RLS
    jump_matrix: Optional[tuple] = None
    cap: Optional[int] = None
    include_self: bool = True

    def __post_init__(self):
        if not isinstance(self.m, int) or self.m < 1:
            raise ConfigError(f"'m' must be a positive integer, got {self.m!r}")
        try:
            object.__setattr__(self, "policy", Policy(self.policy))
        except ValueError:
            raise ConfigError(
                f"'policy' must be one of {[p.value for p in Policy]}, got {self.policy!r}"
            ) from None
        svc = self.service_rates if self.service_rates != () else 1.0
        arr = self.arrival_rates if self.arrival_rates != () else 0.0
        object.__setattr__(self, "service_rates", _as_rate_tuple(svc, self.m, "service_rates"))
        object.__setattr__(self, "arrival_rates", _as_rate_tuple(arr, self.m, "arrival_rates"))
        if (
            not isinstance(self.resample_rate, numbers.Real)
            or not math.isfinite(float(self.resample_rate))
            or self.resample_rate < 0
        ):
            raise ConfigError(f"'resample_rate' must be >= 0, got {self.resample_rate!r}")
        if self.jump_matrix is not None:
            if self.policy is Policy.RLS:
                raise ConfigError("'jump_matrix' only applies to the rlo policy")
            object.__setattr__(self, "jump_matrix", _check_jump_matrix(self.jump_matrix, self.m))
        elif self.policy is Policy.RLO and not self.include_self and self.m < 2:
            raise ConfigError("cannot exclude self-jumps with a single server")
        if self.cap is not None and (not isinstance(self.cap, int) or self.cap < 1):
            raise ConfigError(f"'cap' must be a positive integer, got {self.cap!r}")

    @property
    def total_arrival_rate(self) -> float:
        return math.fsum(self.arrival_rates)

    @property
    def total_service_rate(self) -> float:
        return math.fsum(self.service_rates)

    def effective_jump_rows(self) -> tuple:
        """The walk actually used by rlo, materializing the uniform default."""
        if self.jump_matrix is not None:
            return self.jump_matrix
        return uniform_jump_matrix(self.m, self.include_self)


@dataclass(frozen=True)
class SystemState:
    """Occupancy snapshot: time and per-server client counts."""

    t: float
    counts: tuple

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if any(c < 0 for c in counts):
            raise ValueError(f"negative occupancy in state {counts}")
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return sum(self.counts)


@dataclass
class EmpiricalMeasure:
    """Fraction of servers holding exactly k clients, k = 0 .. b_cap."""

    x: np.ndarray
    b_cap: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        if self.x.shape != (self.b_cap + 1,):
            raise ValueError(
                f"measure has shape {self.x.shape}, expected ({self.b_cap + 1},)"
            )
        if np.any(self.x < -1e-12):
            raise ValueError("measure has a negative entry")
        if abs(float(self.x.sum()) - 1.0) > 1e-12:
            raise ValueError(f"measure sums to {self.x.sum()!r}, expected 1")


def exact_fraction(value) -> Fraction:
    """Read a tolerance or rate as an exact rational.

    Floats are interpreted through their decimal literal (0.1 means 1/10,
    not the nearest binary double), so band edges land where the caller
    wrote them.
    """
    if isinstance(value, float):
        return Fraction(str(value))
    return Fraction(value)


def eps_band(m: int, n: int, eps) -> tuple:
    """Integer occupancy band [lo, hi] allowed within relative deviation eps.

    The target level is the exact rational n/m; a server occupancy N is in
    the band iff (1 - eps) n/m <= N <= (1 + eps) n/m, endpoints included.
    Raises if no integer satisfies that, since a predicate over integer
    occupancies could then never hold.
    """
    eps = exact_fraction(eps)
    if not 0 < eps < 1:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    p = Fraction(n, m)
    lo = math.ceil((1 - eps) * p)
    hi = math.floor((1 + eps) * p)
    if lo > hi:
        raise ValueError(
            f"no integer occupancy lies within a factor 1 +- {float(eps)} of "
            f"n/m = {n}/{m}; the predicate is unsatisfiable"
        )
    return lo, hi


def rls_accepts(service_from, count_from, service_to, count_to) -> bool:
    """Would a load-sensitive client move from its server to a candidate?

    The client currently gets service_from / count_from. After joining the
    candidate it would get service_to / (count_to + 1). The move happens iff
    that share strictly improves; ties stay put. Cross-multiplied so integer
    or rational inputs are decided exactly.
    """
    if count_from < 1:
        raise ValueError("source server must hold the deciding client (count_from >= 1)")
    return service_to * count_from > service_from * (count_to + 1)


def rlo_next_server(config: SystemConfig, current: int, u: float) -> int:
    """Destination of a load-oblivious jump, by inverse CDF on the walk row.

    u is a uniform draw in [0, 1). The destination is the smallest index j
    whose cumulative row mass exceeds u.
    """
    if not 0 <= current < config.m:
        raise ValueError(f"server index {current} out of range for m={config.m}")
    if not 0.0 <= u < 1.0:
        raise ValueError(f"uniform draw {u!r} outside [0, 1)")
    if config.jump_matrix is None:
        if config.include_self:
            return min(int(u * config.m), config.m - 1)
        k = min(int(u * (config.m - 1)), config.m - 2)
        return k if k < current else k + 1
    row = config.jump_matrix[current]
    acc = 0.0
    for j, w in enumerate(row):
        acc += w
        if u < acc:
            return j
    return config.m - 1  # cumulative roundoff fell short of 1


def empirical_measure(state: Union[SystemState, Sequence[int]], b_cap: int) -> EmpiricalMeasure:
    """Histogram of per-server occupancies, normalized by the server count.

    Raises if any server exceeds b_cap: truncation is never silent.
    """
    counts = state.counts if isinstance(state, SystemState) else tuple(int(c) for c in state)
    m = len(counts)
    if m == 0:
        raise ValueError("empty system has no empirical measure")
    over = [i for i, c in enumerate(counts) if c > b_cap]
    if over:
        raise ValueError(
            f"servers {over} hold more than b_cap={b_cap} clients; "
            "raise b_cap instead of truncating"
        )
    hist = np.bincount(np.asarray(counts, dtype=np.int64), minlength=b_cap + 1)
    return EmpiricalMeasure(hist / m, b_cap)


def tail_sums(x) -> np.ndarray:
    """s_k = sum of x_j over j >= k. s_0 is the total mass, s_{B+1} would be 0."""
    if isinstance(x, EmpiricalMeasure):
        x = x.x
    x = np.asarray(x, dtype=float)
    return np.cumsum(x[::-1])[::-1]


def measure_from_tails(s) -> np.ndarray:
    """Inverse of tail_sums: x_k = s_k - s_{k+1}, with s beyond the end = 0."""
    s = np.asarray(s, dtype=float)
    x = s.copy()
    x[:-1] -= s[1:]
    return x


def stationary_distribution(jump_matrix, tol: float = 1e-12) -> np.ndarray:
    """Stationary law pi of a row-stochastic irreducible walk: pi Q = pi.

    Solved as a dense linear system with the normalization sum(pi) = 1
    substituted for one redundant balance equation. The residual
    max|pi Q - pi| is checked against tol and the result is strictly
    positive componentwise (guaranteed by irreducibility).
    """
    q = np.asarray(jump_matrix, dtype=float)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise ValueError(f"jump matrix must be square, got shape {q.shape}")
    m = q.shape[0]
    _check_jump_matrix([tuple(row) for row in q], m)
    a = q.T - np.eye(m)
    a[-1, :] = 1.0
    b = np.zeros(m)
    b[-1] = 1.0
    pi = np.linalg.solve(a, b)
    residual = float(np.max(np.abs(pi @ q - pi)))
    if residual > tol:
        raise RuntimeError(f"stationary solve residual {residual:.3e} exceeds {tol:.1e}")
    if np.any(pi <= 0):
        raise RuntimeError("stationary law has a non-positive entry despite irreducibility")
    return pi


# --- config file interface -------------------------------------------------

_CONFIG_KEYS = {
    "m", "policy", "arrival_rates", "service_rates", "resample_rate",
    "jump_matrix", "cap", "include_self",
}


def config_from_dict(data: dict) -> SystemConfig:
    """Build a SystemConfig from a parsed mapping, naming any offending key."""
    if not isinstance(data, dict):
        raise ConfigError(f"config must be a mapping, got {type(data).__name__}")
    unknown = sorted(set(data) - _CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    if "m" not in data:
        raise ConfigError("config is missing required key 'm'")
    if "policy" not in data:
        raise ConfigError("config is missing required key 'policy'")
    try:
        policy = Policy(data["policy"])
    except ValueError:
        raise ConfigError(
            f"'policy' must be one of {[p.value for p in Policy]}, got {data['policy']!r}"
        )
    kwargs = dict(data)
    jm = kwargs.get("jump_matrix")
    if jm is not None:
        kwargs["jump_matrix"] = tuple(tuple(row) for row in jm)
    kwargs["policy"] = policy
    kwargs.setdefault("service_rates", 1.0)
    kwargs.setdefault("arrival_rates", 0.0)
    return SystemConfig(**kwargs)


def load_config(path) -> SystemConfig:
    """Read a JSON config file (schema documented in the README)."""
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})")
    return config_from_dict(data)
