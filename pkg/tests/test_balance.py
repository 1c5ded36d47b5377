"""Balance predicates, exact diagnostics, and replicated time-to-balance runs."""

import math
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from migratesim.balance import (
    balance_time_bound,
    diagnostics,
    initial_all_at_one,
    initial_from_file,
    initial_uniform,
    is_balanced,
    is_eps_balanced,
    lower_bound_estimates,
    measure_balance_time,
)
from migratesim.model import SystemConfig


RLS = SystemConfig(m=2, policy="rls", resample_rate=1.0)


# --- analytic bound -----------------------------------------------------------

def test_bound_frozen_values():
    assert balance_time_bound(4, 16) == pytest.approx(24.242085417097435, rel=1e-14)
    assert balance_time_bound(16, 256) == pytest.approx(54.0150431682317, rel=1e-14)
    assert balance_time_bound(32, 1024) == pytest.approx(73.22559916906266, rel=1e-14)


def test_bound_matches_direct_transcription():
    for m in (2, 4, 8, 16, 32):
        for n in (m, 4 * m, m * m):
            direct = 3.0 * (1.0 + math.log(m)) * (m * m / n + math.log(m) + 1.0)
            assert balance_time_bound(m, n) == pytest.approx(direct, rel=1e-15)


def test_bound_domain():
    with pytest.raises(ValueError):
        balance_time_bound(1, 10)
    with pytest.raises(ValueError):
        balance_time_bound(4, 0)


def test_lower_bound_estimates():
    est = lower_bound_estimates(4, 16)
    assert est["last_move"] == pytest.approx(16.0 / 20.0)
    assert est["all_at_one"] == pytest.approx(math.log(4))


# --- predicates and diagnostics -------------------------------------------------

def test_is_balanced_edges():
    assert is_balanced((2, 2, 2))
    assert is_balanced((2, 3, 2))
    assert not is_balanced((1, 3, 2))
    assert is_balanced((0,))


def test_is_eps_balanced():
    # target 5 with a 20% band allows occupancies 4..6
    assert is_eps_balanced((4, 5, 6), 0.2)
    assert not is_eps_balanced((3, 6, 6), 0.2)
    assert not is_eps_balanced((4, 4, 7), 0.2)


def test_diagnostics_hand_case():
    d = diagnostics((9, 1, 5), 0.2)
    assert d.target == Fraction(5)
    assert d.peak_level == 9 and d.peak_count == 1
    assert d.near_peak_count == 0 and d.below_count == 2
    assert d.overloaded == (0,)
    assert d.underloaded == (1,)
    assert d.compliant == (2,)
    # band edge is exactly 6, so the excess above it is 3
    assert d.overload_excess == Fraction(3)
    assert d.underflow == (Fraction(0), Fraction(4), Fraction(0))
    assert d.overflow == (Fraction(4), Fraction(0), Fraction(0))
    assert d.total_underflow == d.total_overflow == Fraction(4)
    assert not d.balanced and not d.eps_balanced


def test_diagnostics_balanced_state():
    d = diagnostics((5, 5, 5), 0.1)
    assert d.balanced and d.eps_balanced
    assert d.overload_excess == 0
    assert d.overloaded == d.underloaded == ()


def test_diagnostics_validation():
    with pytest.raises(ValueError):
        diagnostics((), 0.1)
    with pytest.raises(ValueError):
        diagnostics((1, -1), 0.1)
    with pytest.raises(ValueError):
        diagnostics((1, 1), 0.0)


@given(st.lists(st.integers(0, 20), min_size=1, max_size=10))
def test_diagnostics_mass_bookkeeping(counts):
    # excess above the ideal level always equals the deficit below it,
    # and the three peak classes partition the servers
    d = diagnostics(counts, Fraction(3, 10))
    assert d.total_underflow == d.total_overflow
    assert d.peak_count + d.near_peak_count + d.below_count == d.m
    assert len(d.overloaded) + len(d.underloaded) + len(d.compliant) == d.m


# --- initial placements ----------------------------------------------------------

def test_initial_placements():
    assert initial_all_at_one(4, 7) == (7, 0, 0, 0)
    assert initial_uniform(4, 7) == (2, 2, 2, 1)
    assert initial_uniform(3, 9) == (3, 3, 3)
    with pytest.raises(ValueError):
        initial_all_at_one(0, 5)


def test_initial_from_file(tmp_path):
    path = tmp_path / "counts.txt"
    path.write_text("3, 0\n2\n")
    assert initial_from_file(path, 3) == (3, 0, 2)
    path.write_text("1 2 x")
    with pytest.raises(ValueError, match="integers"):
        initial_from_file(path, 3)
    path.write_text("1 2")
    with pytest.raises(ValueError, match="expected m=3"):
        initial_from_file(path, 3)
    path.write_text("1 -2 0")
    with pytest.raises(ValueError, match="non-negative"):
        initial_from_file(path, 3)


# --- replicated measurement --------------------------------------------------------

def test_two_client_balance_time_is_exponential():
    """From (2, 0) each attempt succeeds with probability 1/2 at event rate 2,
    so the balance time is Exp(1); the sample mean must sit within four
    standard errors of 1."""
    res = measure_balance_time(RLS, (2, 0), reps=400, base_seed=0)
    assert res.censored == 0
    assert abs(res.mean - 1.0) < 4.0 / math.sqrt(400)
    assert res.ci95 is not None
    lo, hi = res.ci95
    assert lo <= res.mean <= hi
    assert res.bound == pytest.approx(balance_time_bound(2, 2))


def test_balance_time_censoring():
    res = measure_balance_time(RLS, (2, 0), reps=3, horizon=1e-9)
    assert res.censored == 3
    assert res.mean is None and res.sd is None and res.ci95 is None
    assert res.times == (None, None, None)


def test_balance_time_needs_two_reps():
    with pytest.raises(ValueError):
        measure_balance_time(RLS, (2, 0), reps=1)


def test_balance_time_small_sample_has_no_ci():
    res = measure_balance_time(RLS, (2, 0), reps=5, base_seed=3)
    assert res.ci95 is None
    assert res.mean is not None


def test_balance_time_eps_stop():
    cfg = SystemConfig(m=4, policy="rls", resample_rate=1.0)
    res = measure_balance_time(cfg, initial_all_at_one(4, 8), stop="eps",
                               eps=0.5, reps=4, base_seed=1)
    assert res.eps == 0.5
    assert res.censored == 0
    assert all(t is not None and t >= 0 for t in res.times)


def test_balance_time_jobs_parity():
    serial = measure_balance_time(RLS, (4, 0), reps=4, base_seed=7)
    fanned = measure_balance_time(RLS, (4, 0), reps=4, base_seed=7, jobs=2)
    assert serial.times == fanned.times
    assert serial.seeds == fanned.seeds == (7, 8, 9, 10)
