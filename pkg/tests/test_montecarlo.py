"""Path simulation tests on small fields.

Randomness is counter-based and keyed by (seed, path block), which is
what the prefix and thread-invariance tests below pin down.
"""

import numpy as np
import pytest

from carbon_fbsde import (
    jump_consistency_test,
    martingale_test,
    simulate,
    solve_multi_period,
)
from carbon_fbsde.config import preset_coefficients
from carbon_fbsde.errors import CoverageError, ValidationError
from carbon_fbsde.model import MarketSpec, make_cap_allocation
from carbon_fbsde.montecarlo import events_csv, paths_csv
from carbon_fbsde.oracle import ou_moments
from carbon_fbsde.pde_kernel import SolverConfig


def flat_spec():
    return MarketSpec(
        coefficients=preset_coefficients("no-factor", {"m0": 1.2, "m2": 1.0}, 0.0),
        horizon="finite", period_ends=(1.0,),
        caps=make_cap_allocation([0.5], "banking-withdrawal"),
        label="one-period-flat")


def factor_spec():
    return MarketSpec(
        coefficients=preset_coefficients("linear-abatement", {}, 0.05),
        horizon="finite", period_ends=(0.5, 1.0),
        caps=make_cap_allocation([0.5, 0.4], "banking-withdrawal"),
        label="two-period-small-factor")


@pytest.fixture(scope="module")
def flat_field():
    spec = flat_spec()
    return spec, solve_multi_period(spec, SolverConfig(e_min=-2.0, e_max=2.5, n_e=128))


@pytest.fixture(scope="module")
def factor_field():
    spec = factor_spec()
    config = SolverConfig(e_min=-0.9, e_max=2.3, n_e=80,
                          p_min=-3.0, p_max=3.0, n_p=31)
    return spec, solve_multi_period(spec, config)


# ----------------------------------------------------------------------
# deterministic degenerate case
# ----------------------------------------------------------------------

def test_no_factor_paths_are_deterministic(flat_field):
    spec, field = flat_field
    bundle = simulate(field, spec, n_paths=8, steps_per_period=64, seed=1)
    for snap in (bundle.snap_E, bundle.snap_Y):
        assert np.all(snap == snap[:, :1]), "paths diverged without noise"
    assert bundle.abort_fraction == 0.0


def test_initial_price_matches_the_field(flat_field):
    spec, field = flat_field
    bundle = simulate(field, spec, n_paths=4, steps_per_period=32, seed=0,
                      e0=0.1)
    i0 = bundle.snapshot_index(0.0)
    assert bundle.snap_Y[i0, 0] == pytest.approx(field.value(0.0, None, 0.1),
                                                 abs=1e-12)


def test_emissions_fall_as_the_price_bites(flat_field):
    """With mu = 1.2 - y the emission rate stays below 1.2, and paths
    short of the cap emit less than the uncontrolled trend."""
    spec, field = flat_field
    bundle = simulate(field, spec, n_paths=2, steps_per_period=128, seed=0,
                      e0=0.0)
    iT = bundle.snapshot_index(1.0)
    total = bundle.snap_E[iT, 0]
    assert 0.0 < total < 1.2


# ----------------------------------------------------------------------
# keyed randomness
# ----------------------------------------------------------------------

def test_prefix_paths_do_not_depend_on_n_paths(factor_field):
    spec, field = factor_field
    small = simulate(field, spec, n_paths=200, steps_per_period=32, seed=7)
    large = simulate(field, spec, n_paths=600, steps_per_period=32, seed=7)
    assert np.array_equal(small.snap_P, large.snap_P[:, :200])
    assert np.array_equal(small.snap_E, large.snap_E[:, :200])
    assert np.array_equal(small.snap_Y, large.snap_Y[:, :200])


def test_seed_changes_the_draws(factor_field):
    spec, field = factor_field
    a = simulate(field, spec, n_paths=64, steps_per_period=32, seed=0)
    b = simulate(field, spec, n_paths=64, steps_per_period=32, seed=1)
    assert not np.array_equal(a.snap_P, b.snap_P)


def test_factor_moments_track_the_exact_transition(factor_field):
    """Sample mean and variance of the factor stay inside sampling error
    of the closed-form one-period moments."""
    spec, field = factor_field
    n = 20_000
    bundle = simulate(field, spec, n_paths=n, steps_per_period=16, seed=5,
                      p0=0.8)
    coeffs = spec.coefficients
    mean, var = ou_moments(0.8, coeffs.ou_kappa, coeffs.ou_sigma, 1.0)
    iT = bundle.snapshot_index(1.0)
    sample = bundle.snap_P[iT]
    se_mean = np.sqrt(var / n)
    assert abs(sample.mean() - mean) < 4.0 * se_mean
    assert abs(sample.var() - var) < 0.05 * var


# ----------------------------------------------------------------------
# guards
# ----------------------------------------------------------------------

def test_reach_check_blocks_escaping_starts(factor_field):
    spec, field = factor_field
    with pytest.raises(CoverageError):
        simulate(field, spec, n_paths=4, steps_per_period=8, seed=0, e0=2.0)


def test_snapshot_lookup_tolerance(flat_field):
    spec, field = flat_field
    bundle = simulate(field, spec, n_paths=2, steps_per_period=64, seed=0)
    with pytest.raises(ValidationError):
        bundle.snapshot_index(0.123456)


def test_martingale_window_may_not_straddle_a_date(factor_field):
    spec, field = factor_field
    bundle = simulate(field, spec, n_paths=256, steps_per_period=32, seed=0)
    with pytest.raises(ValidationError):
        martingale_test(bundle, 0.05, 0.2, 0.8, period_ends=(0.5, 1.0))


def test_martingale_report_fields(factor_field):
    spec, field = factor_field
    bundle = simulate(field, spec, n_paths=4096, steps_per_period=32, seed=0,
                      snapshot_times=[0.0, 0.25, 0.5, 0.75, 1.0])
    report = martingale_test(bundle, 0.05, 0.0, 0.25, period_ends=(0.5, 1.0))
    assert report.n_used == 4096
    assert report.se > 0.0
    assert np.isfinite(report.delta)


# ----------------------------------------------------------------------
# compliance records and writers
# ----------------------------------------------------------------------

def test_compliance_branches_partition_the_paths(factor_field):
    spec, field = factor_field
    bundle = simulate(field, spec, n_paths=512, steps_per_period=32, seed=2)
    report = jump_consistency_test(bundle)
    assert len(report.per_period) == bundle.branch.shape[0]
    counted = report.n_above + report.n_below + report.n_at
    assert counted == bundle.branch.size


def test_csv_writers_shape(tmp_path, factor_field):
    spec, field = factor_field
    bundle = simulate(field, spec, n_paths=32, steps_per_period=16, seed=0,
                      keep_paths=5)
    p_file = tmp_path / "paths.csv"
    e_file = tmp_path / "events.csv"
    paths_csv(bundle, p_file)
    events_csv(bundle, e_file)
    p_lines = p_file.read_text().strip().splitlines()
    e_lines = e_file.read_text().strip().splitlines()
    assert p_lines[0] == "path,t,P,E,Y"
    assert len(p_lines) == 1 + 5 * bundle.times.size
    assert e_lines[0] == "path,k,E_Tk,cap,Y_left,Y_right,branch"
    assert len(e_lines) == 1 + 2 * 32
