"""Event-driven simulation of the migration system.

Three drivers share one transition law:

* ``simulate_closed``: a fixed client population moving between servers,
  arrivals and service completions switched off. Only the per-client
  resampling clocks run, so the total event rate is resample_rate * n.
* ``simulate_open``: arrivals, processor-sharing service completions and
  resampling all active. Optionally tracks individual clients through
  migrations to produce sojourn records.
* ``simulate_coupled``: the three-colour particle system used to audit the
  open-system dynamics. All particles (blue, red, green) perform the same
  random walk; blue arrivals come from one Poisson stream, and a second
  stream marks a blue particle red where possible, otherwise deposits a
  green one.

``step`` is the single-transition reference implementation. The loop
drivers are written for speed but consume random draws in exactly the same
order, one event at a time:

    closed:  dt ~ expovariate(total) ; slot = randrange(n) ; destination draw
    open:    dt ~ expovariate(total) ; u = random() picks the event category
             and, within arrivals/departures/resampling, the server or slot;
             resampling destination and (when tracking) the departing
             resident need further draws

so a single step from a freshly constructed state is bit-identical to the
first loop event under the same seed.
"""

from __future__ import annotations

import json
import math
from bisect import bisect_right
from dataclasses import dataclass
from random import Random
from typing import Optional, Sequence

import numpy as np

from .model import Policy, SystemConfig, SystemState, eps_band


class SimulationError(RuntimeError):
    """Raised when a run cannot proceed (deadlock) or an invariant breaks."""


@dataclass(frozen=True)
class Event:
    """One transition: its kind, waiting time, and the servers involved."""

    kind: str  # arrival | departure | migration | resample_rejected |
    #            resample_self | arrival_dropped | migration_blocked
    dt: float
    server_from: Optional[int] = None
    server_to: Optional[int] = None


@dataclass
class SojournRecord:
    """Lifetime of one tracked client; depart_t is None if still in system."""

    client_id: int
    arrive_t: float
    entry_server: int
    depart_t: Optional[float] = None

    @property
    def sojourn(self) -> Optional[float]:
        if self.depart_t is None:
            return None
        return self.depart_t - self.arrive_t


@dataclass
class Trajectory:
    """Sampled occupancy path plus event tallies for one run."""

    times: np.ndarray  # (k,)
    counts: np.ndarray  # (k, m) occupancies, left-limits at the sample times
    event_counts: dict
    seed: int
    final: SystemState


@dataclass
class ClosedRunResult:
    trajectory: Trajectory
    stop_time: Optional[float]  # None when censored at the horizon
    censored: bool


@dataclass(frozen=True)
class CoupledState:
    t: float
    blue: tuple
    red: tuple
    green: tuple


@dataclass
class CoupledTrajectory:
    times: np.ndarray
    blue: np.ndarray  # (k, m)
    red: np.ndarray
    green: np.ndarray
    arrivals_so_far: np.ndarray  # cumulative blue arrivals at each sample
    event_counts: dict
    seed: int
    final: CoupledState


def _cumulative(seq) -> list:
    acc = 0.0
    out = []
    for v in seq:
        acc += v
        out.append(acc)
    return out


def _jump_destination(config: SystemConfig, rows_cum, origin: int, rng: Random) -> int:
    """Destination draw for one rlo jump. rows_cum is None for the uniform walk."""
    m = config.m
    if rows_cum is None:
        if config.include_self:
            return rng.randrange(m)
        k = rng.randrange(m - 1)
        return k if k < origin else k + 1
    u = rng.random()
    j = bisect_right(rows_cum[origin], u)
    return min(j, m - 1)


def _rows_cum(config: SystemConfig):
    if config.policy is Policy.RLO and config.jump_matrix is not None:
        return [_cumulative(row) for row in config.jump_matrix]
    return None


def step(state: SystemState, config: SystemConfig, rng: Random,
         closed: bool = False) -> tuple:
    """Advance the system by exactly one event. Returns (new_state, event).

    In closed mode only the resampling clocks run; the caller guarantees
    all arrival rates are zero. A zero total event rate means nothing can
    ever happen, which is reported as a deadlock instead of hanging.
    """
    m = config.m
    counts = list(state.counts)
    n = sum(counts)
    svc = config.service_rates
    beta = config.resample_rate

    if closed:
        if any(r != 0.0 for r in config.arrival_rates):
            raise SimulationError("closed mode requires all arrival rates to be zero")
        total = beta * n
        if total <= 0.0:
            raise SimulationError(
                "total event rate is zero; the closed system is stuck "
                f"(n={n}, resample_rate={beta})"
            )
        dt = rng.expovariate(total)
        slot = rng.randrange(n)
        acc = 0
        origin = m - 1
        for i, c in enumerate(counts):
            acc += c
            if slot < acc:
                origin = i
                break
        event = _resample_event(config, _rows_cum(config), counts, origin, rng, dt)
        return SystemState(state.t + dt, tuple(counts)), event

    arr = config.arrival_rates
    cum_arr = _cumulative(arr)
    total_arr = cum_arr[-1] if m else 0.0
    busy_svc = math.fsum(svc[i] for i in range(m) if counts[i] > 0)
    total = total_arr + busy_svc + beta * n
    if total <= 0.0:
        raise SimulationError("total event rate is zero; no transition is possible")
    dt = rng.expovariate(total)
    w = rng.random() * total

    if w < total_arr:
        i = bisect_right(cum_arr, w)
        if config.cap is not None and counts[i] >= config.cap:
            return SystemState(state.t + dt, tuple(counts)), Event(
                "arrival_dropped", dt, server_to=i)
        counts[i] += 1
        return SystemState(state.t + dt, tuple(counts)), Event("arrival", dt, server_to=i)

    w -= total_arr
    if w < busy_svc:
        homogeneous = len(set(svc)) == 1
        if homogeneous:
            busy = [i for i in range(m) if counts[i] > 0]
            i = busy[min(int(w / svc[0]), len(busy) - 1)]
        else:
            acc = 0.0
            i = max(j for j in range(m) if counts[j] > 0)
            for j in range(m):
                if counts[j] > 0:
                    acc += svc[j]
                    if w < acc:
                        i = j
                        break
        counts[i] -= 1
        return SystemState(state.t + dt, tuple(counts)), Event("departure", dt, server_from=i)

    w -= busy_svc
    slot = min(int(w / beta), n - 1)
    acc = 0
    origin = m - 1
    for i, c in enumerate(counts):
        acc += c
        if slot < acc:
            origin = i
            break
    event = _resample_event(config, _rows_cum(config), counts, origin, rng, dt)
    return SystemState(state.t + dt, tuple(counts)), event


def _resample_event(config, rows_cum, counts, origin, rng: Random, dt: float) -> Event:
    """Mutates counts according to one resampling attempt from ``origin``."""
    svc = config.service_rates
    if config.policy is Policy.RLS:
        dest = rng.randrange(config.m)
        # strict improvement of the client's service share, ties stay
        if svc[dest] * counts[origin] > svc[origin] * (counts[dest] + 1):
            if config.cap is not None and counts[dest] >= config.cap:
                return Event("migration_blocked", dt, origin, dest)
            counts[origin] -= 1
            counts[dest] += 1
            return Event("migration", dt, origin, dest)
        return Event("resample_rejected", dt, origin, dest)
    dest = _jump_destination(config, rows_cum, origin, rng)
    if dest == origin:
        return Event("resample_self", dt, origin, dest)
    if config.cap is not None and counts[dest] >= config.cap:
        return Event("migration_blocked", dt, origin, dest)
    counts[origin] -= 1
    counts[dest] += 1
    return Event("migration", dt, origin, dest)


def simulate_closed(config: SystemConfig, initial: Sequence[int], horizon: float,
                    stop: str = "balanced", eps=None, seed: int = 0,
                    sample_dt: Optional[float] = None) -> ClosedRunResult:
    """Run the closed system until a stopping predicate or the horizon.

    stop is one of "balanced" (max - min <= 1), "eps" (every occupancy
    within a factor 1 +- eps of n/m), or "horizon" (time limit only).
    The returned stop_time is the exact event time at which the predicate
    first held; if the horizon hits first the result is flagged censored.
    Under the rls policy the running maximum occupancy is checked to be
    non-increasing, and the number of servers at the maximum non-increasing
    while the maximum is flat, after every accepted move.
    """
    if any(r != 0.0 for r in config.arrival_rates):
        raise SimulationError("closed runs require all arrival rates to be zero")
    if horizon is None or horizon <= 0:
        raise ValueError("closed runs need a positive horizon")
    m = config.m
    counts = [int(c) for c in initial]
    if len(counts) != m or any(c < 0 for c in counts):
        raise ValueError(f"initial occupancy must be {m} non-negative integers")
    if config.cap is not None and any(c > config.cap for c in counts):
        raise ValueError("initial occupancy exceeds the configured cap")
    n = sum(counts)

    if stop == "balanced":
        def stopped(lo_v, hi_v):
            return hi_v - lo_v <= 1
    elif stop == "eps":
        if eps is None:
            raise ValueError('stop="eps" needs an eps value')
        band_lo, band_hi = eps_band(m, n, eps)

        def stopped(lo_v, hi_v):
            return lo_v >= band_lo and hi_v <= band_hi
    elif stop == "horizon":
        def stopped(lo_v, hi_v):
            return False
    else:
        raise ValueError(f'stop must be "balanced", "eps" or "horizon", got {stop!r}')

    rng = Random(seed)
    beta = config.resample_rate
    svc = list(config.service_rates)
    homogeneous = len(set(svc)) == 1
    rls = config.policy is Policy.RLS
    rows_cum = _rows_cum(config)
    include_self = config.include_self
    uniform_walk = config.jump_matrix is None

    # occupancy histogram with tracked extremes gives O(1) predicate checks
    hist = [0] * (n + 2)
    for c in counts:
        hist[c] += 1
    cur_max = max(counts)
    cur_min = min(counts)

    # one entry per client; entry value = its current server
    slots = []
    for i, c in enumerate(counts):
        slots.extend([i] * c)

    cap = config.cap
    events = {"migration": 0, "resample_rejected": 0, "resample_self": 0,
              "migration_blocked": 0}
    times = [0.0]
    snaps = [tuple(counts)]
    sample_idx = 1
    next_sample = sample_dt if sample_dt else math.inf

    t = 0.0
    stop_time = None
    if stopped(cur_min, cur_max) and stop != "horizon":
        stop_time = 0.0
    elif n == 0 or beta == 0.0:
        if stop == "horizon":
            while next_sample <= horizon:
                times.append(next_sample)
                snaps.append(tuple(counts))
                sample_idx += 1
                next_sample = sample_idx * sample_dt
            t = horizon
        else:
            raise SimulationError(
                "total event rate is zero and the stopping predicate does not "
                f"hold (n={n}, resample_rate={beta})"
            )
    else:
        total = beta * n
        prev_cmax_count = hist[cur_max]
        while True:
            t_next = t + rng.expovariate(total)
            if t_next > horizon:
                while next_sample <= horizon:
                    times.append(next_sample)
                    snaps.append(tuple(counts))
                    sample_idx += 1
                    next_sample = sample_idx * sample_dt
                t = horizon
                break
            while next_sample <= t_next:
                times.append(next_sample)
                snaps.append(tuple(counts))
                sample_idx += 1
                next_sample = sample_idx * sample_dt
            t = t_next

            slot = rng.randrange(n)
            i = slots[slot]
            ci = counts[i]
            moved = False
            if rls:
                j = rng.randrange(m)
                if homogeneous:
                    accept = ci > counts[j] + 1
                else:
                    accept = svc[j] * ci > svc[i] * (counts[j] + 1)
                if accept:
                    moved = True
                else:
                    events["resample_rejected"] += 1
            else:
                if uniform_walk:
                    if include_self:
                        j = rng.randrange(m)
                    else:
                        k = rng.randrange(m - 1)
                        j = k if k < i else k + 1
                else:
                    u = rng.random()
                    j = min(bisect_right(rows_cum[i], u), m - 1)
                if j == i:
                    events["resample_self"] += 1
                else:
                    moved = True
            if moved and cap is not None and counts[j] >= cap:
                events["migration_blocked"] += 1
                moved = False
            if moved:
                cj = counts[j]
                counts[i] = ci - 1
                counts[j] = cj + 1
                slots[slot] = j
                events["migration"] += 1
                hist[ci] -= 1
                hist[ci - 1] += 1
                hist[cj] -= 1
                hist[cj + 1] += 1
                prev_max = cur_max
                if cj + 1 > cur_max:
                    cur_max = cj + 1
                elif ci == cur_max and hist[ci] == 0:
                    cur_max = ci - 1
                if ci - 1 < cur_min:
                    cur_min = ci - 1
                elif cj == cur_min and hist[cj] == 0:
                    cur_min = cj + 1
                if rls:
                    if cur_max > prev_max:
                        raise SimulationError(
                            f"maximum occupancy rose from {prev_max} to {cur_max} "
                            "during a closed rls run"
                        )
                    if cur_max == prev_max and hist[cur_max] > prev_cmax_count:
                        raise SimulationError(
                            "server count at the maximum level rose while the "
                            "maximum was flat during a closed rls run"
                        )
                    prev_cmax_count = hist[cur_max]
                if stopped(cur_min, cur_max):
                    stop_time = t
                    break

    if times[-1] < t:  # the horizon may already sit on the sample grid
        times.append(t)
        snaps.append(tuple(counts))
    censored = stop_time is None and stop != "horizon"
    traj = Trajectory(
        times=np.asarray(times),
        counts=np.asarray(snaps, dtype=np.int64),
        event_counts=events,
        seed=seed,
        final=SystemState(t, tuple(counts)),
    )
    return ClosedRunResult(traj, stop_time if stop != "horizon" else horizon, censored)


def simulate_open(config: SystemConfig, horizon: float, warmup: float = 0.0,
                  seed: int = 0, sample_dt: Optional[float] = 0.1,
                  initial: Optional[Sequence[int]] = None,
                  track_sojourns: bool = True) -> tuple:
    """Run the open system to the horizon. Returns (trajectory, sojourns).

    Sojourn records cover clients arriving at or after warmup, with
    depart_t None for clients still present at the horizon. Clients seeded
    through ``initial`` take part in the dynamics but get no records since
    they never arrived. With track_sojourns False the records list is empty
    and the per-client bookkeeping (including the draw selecting which
    resident departs) is skipped; trajectories for a fixed seed are
    reproducible per tracking mode.
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if not 0 <= warmup <= horizon:
        raise ValueError("warmup must lie within [0, horizon]")
    m = config.m
    counts = [0] * m if initial is None else [int(c) for c in initial]
    if len(counts) != m or any(c < 0 for c in counts):
        raise ValueError(f"initial occupancy must be {m} non-negative integers")
    if config.cap is not None and any(c > config.cap for c in counts):
        raise ValueError("initial occupancy exceeds the configured cap")

    rng = Random(seed)
    beta = config.resample_rate
    svc = list(config.service_rates)
    arr = list(config.arrival_rates)
    cum_arr = _cumulative(arr)
    total_arr = cum_arr[-1] if m else 0.0
    homogeneous_svc = len(set(svc)) == 1
    svc0 = svc[0]
    rls = config.policy is Policy.RLS
    rows_cum = _rows_cum(config)
    include_self = config.include_self
    uniform_walk = config.jump_matrix is None
    cap = config.cap

    # busy list with positions for O(1) homogeneous departure picks
    busy = [i for i in range(m) if counts[i] > 0]
    busy_pos = [-1] * m
    for k, i in enumerate(busy):
        busy_pos[i] = k
    busy_svc = math.fsum(svc[i] for i in busy)

    # per-client slot bookkeeping; per-server bags give O(1) departures
    slot_server = []
    bags = [[] for _ in range(m)]
    slot_bagpos = []
    slot_id = [] if track_sojourns else None
    arrive_t = []
    entry_server = []
    depart_t = {}
    for i, c in enumerate(counts):
        for _ in range(c):
            s = len(slot_server)
            slot_server.append(i)
            slot_bagpos.append(len(bags[i]))
            bags[i].append(s)
            if track_sojourns:
                slot_id.append(-1)  # seeded clients carry no record

    n_live = len(slot_server)
    next_id = 0
    events = {"arrival": 0, "departure": 0, "migration": 0,
              "resample_rejected": 0, "resample_self": 0,
              "arrival_dropped": 0, "migration_blocked": 0}
    times = [0.0]
    snaps = [tuple(counts)]
    sample_idx = 1
    next_sample = sample_dt if sample_dt else math.inf

    def _remove_slot(s: int) -> None:
        nonlocal n_live
        last = n_live - 1
        i = slot_server[s]
        bag = bags[i]
        p = slot_bagpos[s]
        moved = bag[-1]
        bag[p] = moved
        slot_bagpos[moved] = p
        bag.pop()
        if s != last:
            slot_server[s] = slot_server[last]
            slot_bagpos[s] = slot_bagpos[last]
            bags[slot_server[s]][slot_bagpos[s]] = s
            if track_sojourns:
                slot_id[s] = slot_id[last]
        slot_server.pop()
        slot_bagpos.pop()
        if track_sojourns:
            slot_id.pop()
        n_live = last

    t = 0.0
    refresh = 0
    while True:
        total = total_arr + busy_svc + beta * n_live
        t_next = t + rng.expovariate(total) if total > 0.0 else math.inf
        if t_next > horizon:
            while next_sample <= horizon:
                times.append(next_sample)
                snaps.append(tuple(counts))
                sample_idx += 1
                next_sample = sample_idx * sample_dt
            t = horizon
            break
        while next_sample <= t_next:
            times.append(next_sample)
            snaps.append(tuple(counts))
            sample_idx += 1
            next_sample = sample_idx * sample_dt
        t = t_next
        w = rng.random() * total

        if w < total_arr:
            i = bisect_right(cum_arr, w)
            if cap is not None and counts[i] >= cap:
                events["arrival_dropped"] += 1
                continue
            counts[i] += 1
            if counts[i] == 1:
                busy_pos[i] = len(busy)
                busy.append(i)
                busy_svc += svc[i]
            s = len(slot_server)
            slot_server.append(i)
            slot_bagpos.append(len(bags[i]))
            bags[i].append(s)
            if track_sojourns:
                slot_id.append(next_id)
                arrive_t.append(t)
                entry_server.append(i)
                next_id += 1
            n_live += 1
            events["arrival"] += 1
            continue

        w -= total_arr
        if w < busy_svc:
            if homogeneous_svc:
                i = busy[min(int(w / svc0), len(busy) - 1)]
            else:
                acc = 0.0
                i = busy[-1]
                for j in busy:
                    acc += svc[j]
                    if w < acc:
                        i = j
                        break
            if track_sojourns:
                # the departing client is uniform among the residents
                r = rng.randrange(counts[i])
                s = bags[i][r]
                cid = slot_id[s]
                if cid >= 0:
                    depart_t[cid] = t
            else:
                # counts do not depend on which resident leaves
                s = bags[i][-1]
            counts[i] -= 1
            if counts[i] == 0:
                p = busy_pos[i]
                moved = busy[-1]
                busy[p] = moved
                busy_pos[moved] = p
                busy.pop()
                busy_svc -= svc[i]
            _remove_slot(s)
            events["departure"] += 1
            refresh += 1
            if refresh >= 65536 and not homogeneous_svc:
                busy_svc = math.fsum(svc[j] for j in busy)  # stop float drift
                refresh = 0
            continue

        w -= busy_svc
        s = min(int(w / beta), n_live - 1)
        i = slot_server[s]
        ci = counts[i]
        moved = False
        if rls:
            j = rng.randrange(m)
            if svc[j] * ci > svc[i] * (counts[j] + 1):
                if cap is not None and counts[j] >= cap:
                    events["migration_blocked"] += 1
                else:
                    moved = True
            else:
                events["resample_rejected"] += 1
        else:
            if uniform_walk:
                if include_self:
                    j = rng.randrange(m)
                else:
                    k = rng.randrange(m - 1)
                    j = k if k < i else k + 1
            else:
                u = rng.random()
                j = min(bisect_right(rows_cum[i], u), m - 1)
            if j == i:
                events["resample_self"] += 1
            elif cap is not None and counts[j] >= cap:
                events["migration_blocked"] += 1
            else:
                moved = True
        if moved:
            counts[i] = ci - 1
            counts[j] += 1
            if counts[i] == 0:
                p = busy_pos[i]
                mv = busy[-1]
                busy[p] = mv
                busy_pos[mv] = p
                busy.pop()
                busy_svc -= svc[i]
            if counts[j] == 1:
                busy_pos[j] = len(busy)
                busy.append(j)
                busy_svc += svc[j]
            slot_server[s] = j
            bag = bags[i]
            p = slot_bagpos[s]
            mv = bag[-1]
            bag[p] = mv
            slot_bagpos[mv] = p
            bag.pop()
            slot_bagpos[s] = len(bags[j])
            bags[j].append(s)
            events["migration"] += 1

    if times[-1] < t:  # the horizon may already sit on the sample grid
        times.append(t)
        snaps.append(tuple(counts))
    traj = Trajectory(
        times=np.asarray(times),
        counts=np.asarray(snaps, dtype=np.int64),
        event_counts=events,
        seed=seed,
        final=SystemState(t, tuple(counts)),
    )
    records = []
    if track_sojourns:
        for cid in range(next_id):
            if arrive_t[cid] >= warmup:
                records.append(SojournRecord(
                    client_id=cid,
                    arrive_t=arrive_t[cid],
                    entry_server=entry_server[cid],
                    depart_t=depart_t.get(cid),
                ))
    return traj, records


def simulate_coupled(initial_blue: Sequence[int], arrival_rates: Sequence[float],
                     removal_rates: Sequence[float], jump_matrix=None,
                     horizon: float = 1.0, seed: int = 0,
                     sample_dt: Optional[float] = 0.1) -> CoupledTrajectory:
    """Run the three-colour auditing system.

    Every particle, whatever its colour, walks independently from server i
    to j at rate jump_matrix[i][j] (None means the uniform row 1/m, whose
    self-jumps are no-ops). Blue particles arrive in a Poisson stream with
    per-server intensities ``arrival_rates``. A second Poisson stream with
    intensities ``removal_rates`` picks a server: if a blue particle is
    present there one blue turns red, otherwise a green particle appears.

    Structurally, every removal-stream event adds exactly one particle to
    the red-plus-green pool, and the blue-plus-red total changes only
    through blue arrivals.
    """
    m = len(initial_blue)
    blue = [int(c) for c in initial_blue]
    if any(c < 0 for c in blue):
        raise ValueError("initial blue counts must be non-negative")
    ell = [float(v) for v in arrival_rates]
    rho = [float(v) for v in removal_rates]
    if len(ell) != m or len(rho) != m:
        raise ValueError("arrival and removal rate vectors must have length m")
    if any(v < 0 for v in ell + rho):
        raise ValueError("arrival and removal rates must be non-negative")
    if jump_matrix is None:
        rows = [[1.0 / m] * m for _ in range(m)]
    else:
        rows = [[float(v) for v in row] for row in jump_matrix]
        if len(rows) != m or any(len(r) != m for r in rows):
            raise ValueError("jump matrix shape does not match the server count")
    walk_rate = [math.fsum(r) for r in rows]  # per-particle clock at server i
    rows_cum = [_cumulative(r) for r in rows]
    cum_ell = _cumulative(ell)
    cum_rho = _cumulative(rho)
    total_ell = cum_ell[-1]
    total_rho = cum_rho[-1]

    red = [0] * m
    green = [0] * m
    rng = Random(seed)
    t = 0.0
    arrivals = 0
    events = {"walk": 0, "walk_self": 0, "arrival": 0,
              "removal_hit": 0, "removal_miss": 0}
    times = [0.0]
    snaps_b = [tuple(blue)]
    snaps_r = [tuple(red)]
    snaps_g = [tuple(green)]
    snaps_a = [0]
    sample_idx = 1
    next_sample = sample_dt if sample_dt else math.inf

    def _emit(upto: float) -> None:
        nonlocal sample_idx, next_sample
        while next_sample <= upto:
            times.append(next_sample)
            snaps_b.append(tuple(blue))
            snaps_r.append(tuple(red))
            snaps_g.append(tuple(green))
            snaps_a.append(arrivals)
            sample_idx += 1
            next_sample = sample_idx * sample_dt

    while True:
        # plain left-to-right sum so the selection scan below reproduces the
        # exact partial sums and a draw below walk_total always lands
        walk_total = 0.0
        for i in range(m):
            walk_total += (blue[i] + red[i] + green[i]) * walk_rate[i]
        total = walk_total + total_ell + total_rho
        if total <= 0.0:
            _emit(horizon)
            t = horizon
            break
        t_next = t + rng.expovariate(total)
        if t_next > horizon:
            _emit(horizon)
            t = horizon
            break
        _emit(t_next)
        t = t_next
        w = rng.random() * total

        if w < walk_total:
            # locate the walking particle: server first, then colour
            i = m - 1
            acc = 0.0
            for k in range(m):
                acc += (blue[k] + red[k] + green[k]) * walk_rate[k]
                if w < acc:
                    i = k
                    break
            z_i = blue[i] + red[i] + green[i]
            r = w - (acc - z_i * walk_rate[i])
            c = int(r / walk_rate[i]) if walk_rate[i] > 0 else 0
            c = min(c, z_i - 1)
            u = rng.random()
            j = min(bisect_right(rows_cum[i], u * walk_rate[i]), m - 1)
            if j == i:
                events["walk_self"] += 1
                continue
            if c < blue[i]:
                blue[i] -= 1
                blue[j] += 1
            elif c < blue[i] + red[i]:
                red[i] -= 1
                red[j] += 1
            else:
                green[i] -= 1
                green[j] += 1
            events["walk"] += 1
            continue

        w -= walk_total
        if w < total_ell:
            i = bisect_right(cum_ell, w)
            blue[i] += 1
            arrivals += 1
            events["arrival"] += 1
            continue

        w -= total_ell
        i = bisect_right(cum_rho, w)
        if blue[i] > 0:
            blue[i] -= 1
            red[i] += 1
            events["removal_hit"] += 1
        else:
            green[i] += 1
            events["removal_miss"] += 1

    if times[-1] < t:  # the horizon may already sit on the sample grid
        times.append(t)
        snaps_b.append(tuple(blue))
        snaps_r.append(tuple(red))
        snaps_g.append(tuple(green))
        snaps_a.append(arrivals)
    return CoupledTrajectory(
        times=np.asarray(times),
        blue=np.asarray(snaps_b, dtype=np.int64),
        red=np.asarray(snaps_r, dtype=np.int64),
        green=np.asarray(snaps_g, dtype=np.int64),
        arrivals_so_far=np.asarray(snaps_a, dtype=np.int64),
        event_counts=events,
        seed=seed,
        final=CoupledState(t, tuple(blue), tuple(red), tuple(green)),
    )


# --- CSV serialization -----------------------------------------------------

def config_echo(config: SystemConfig) -> str:
    """Deterministic one-line JSON echo of a config, for CSV comment headers."""
    data = {
        "m": config.m,
        "policy": config.policy.value,
        "arrival_rates": list(config.arrival_rates),
        "service_rates": list(config.service_rates),
        "resample_rate": config.resample_rate,
        "cap": config.cap,
        "include_self": config.include_self,
        "jump_matrix": None if config.jump_matrix is None
        else [list(r) for r in config.jump_matrix],
    }
    return json.dumps(data, sort_keys=True)


def write_trajectory_csv(traj: Trajectory, path, config: SystemConfig) -> None:
    """Columns t, N_1 .. N_m, preceded by seed and config comment lines."""
    m = traj.counts.shape[1]
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# seed={traj.seed}\n")
        fh.write(f"# config={config_echo(config)}\n")
        fh.write("t," + ",".join(f"N_{i + 1}" for i in range(m)) + "\n")
        for t, row in zip(traj.times, traj.counts):
            fh.write(f"{float(t)!r}," + ",".join(str(int(v)) for v in row) + "\n")


def write_sojourns_csv(records, path, config: SystemConfig, seed: int) -> None:
    """Columns client_id, arrive_t, depart_t, sojourn; empty cells if censored."""
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# seed={seed}\n")
        fh.write(f"# config={config_echo(config)}\n")
        fh.write("client_id,arrive_t,depart_t,sojourn\n")
        for rec in records:
            if rec.depart_t is None:
                fh.write(f"{rec.client_id},{rec.arrive_t!r},,\n")
            else:
                fh.write(
                    f"{rec.client_id},{rec.arrive_t!r},{rec.depart_t!r},"
                    f"{rec.sojourn!r}\n"
                )
