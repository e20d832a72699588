"""Path simulation against a solved price field, with statistical checks.

The forward system is degenerate: the factor diffuses on its own, the
cumulative-emissions state moves at the emission rate evaluated at the
current price, and the price itself is read back from the solved field
at every sub-step.  Paths are processed in fixed-size blocks, each block
drawing from a counter-based stream keyed by (seed, block index), so
results are bit-identical regardless of thread count or how many paths
run (prefixes agree).

A path that leaves the stored grid box is frozen where it was and
reported; the run only fails when more than 0.1% of paths do that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import CoverageError, SimulationError, ValidationError
from .model import MarketSpec
from .multi_period import MultiPeriodField
from .pde_kernel import ValueGrid

__all__ = [
    "PathBundle",
    "simulate",
    "martingale_test",
    "jump_consistency_test",
    "MartingaleReport",
    "JumpReport",
    "paths_csv",
    "events_csv",
]

_BLOCK = 8192
BRANCH_BELOW, BRANCH_AT, BRANCH_ABOVE, BRANCH_ABORTED = -1, 0, 1, -2
_BRANCH_NAMES = {BRANCH_BELOW: "below", BRANCH_AT: "at", BRANCH_ABOVE: "above",
                 BRANCH_ABORTED: "aborted"}


# ----------------------------------------------------------------------
# clipped field probing (non-raising, mask-reporting)
# ----------------------------------------------------------------------

def _axis_pos(nodes, x):
    h = nodes[1] - nodes[0]
    pos = (x - nodes[0]) / h
    ok = (pos >= -1e-9) & (pos <= nodes.size - 1 + 1e-9)
    i = np.clip(np.floor(pos).astype(np.int64), 0, nodes.size - 2)
    w = np.clip(pos - i, 0.0, 1.0)
    return i, w, ok


def _gather(S, axes):
    acc = 0.0
    for corner in product((0, 1), repeat=len(axes)):
        w = 1.0
        idx = []
        for (i, wt), c in zip(axes, corner):
            w = w * (wt if c else (1.0 - wt))
            idx.append(i + c)
        acc = acc + w * S[tuple(idx)]
    return acc


def _probe(grid: ValueGrid, t: float, P, E, eparam):
    """Field value at scalar time ``t`` for path arrays; returns (y, ok).

    Out-of-box points are clipped for the lookup and flagged in ``ok``;
    the caller decides whether that aborts the path.
    """
    times = grid.times
    t = min(max(t, times[0]), times[-1])
    it = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, times.size - 2))
    wt = (t - times[it]) / (times[it + 1] - times[it])
    wt = min(max(wt, 0.0), 1.0)

    axes = []
    ok = np.ones(np.shape(E), dtype=bool)
    if grid.has_p:
        i, w, good = _axis_pos(grid.p_nodes, np.asarray(P, dtype=float))
        axes.append((i, w))
        ok &= good
    i, w, good = _axis_pos(grid.e_nodes, np.asarray(E, dtype=float))
    axes.append((i, w))
    ok &= good
    if grid.has_eparam:
        i, w, good = _axis_pos(grid.eparam_nodes, np.asarray(eparam, dtype=float))
        axes.append((i, w))
        ok &= good

    y = _gather(grid.values[it], axes)
    if wt > 0.0:
        y = (1.0 - wt) * y + wt * _gather(grid.values[it + 1], axes)
    return y, ok


# ----------------------------------------------------------------------
# bundle
# ----------------------------------------------------------------------

@dataclass(eq=False)
class PathBundle:
    """Simulated paths, snapshots and compliance-date records.

    Full trajectories are kept for the first ``kept_idx.size`` paths
    only; every path contributes to the snapshot arrays (indexed as
    ``[snapshot, path]``) and to the per-date compliance records
    (indexed as ``[period, path]``).  ``branch`` uses -1/0/+1 for
    below/at/above and -2 for paths that left the grid box.
    """

    n_paths: int
    seed: int
    times: np.ndarray
    snapshot_times: np.ndarray
    snap_P: Optional[np.ndarray]
    snap_E: np.ndarray
    snap_Y: np.ndarray
    kept_idx: np.ndarray
    path_P: Optional[np.ndarray]
    path_E: np.ndarray
    path_Y: np.ndarray
    compliance_E: np.ndarray
    compliance_cap: np.ndarray
    compliance_left: np.ndarray
    compliance_right: np.ndarray
    branch: np.ndarray
    aborted: np.ndarray
    abort_step: np.ndarray
    rate: float
    meta: dict = field(default_factory=dict)

    @property
    def n_periods(self) -> int:
        return self.compliance_E.shape[0]

    @property
    def abort_fraction(self) -> float:
        return float(self.aborted.mean()) if self.n_paths else 0.0

    def snapshot_index(self, t: float, tol: Optional[float] = None) -> int:
        if tol is None:
            tol = 0.51 * float(self.times[1] - self.times[0])
        gap = np.abs(self.snapshot_times - t)
        j = int(np.argmin(gap))
        if gap[j] > tol:
            raise ValidationError(
                f"no snapshot near t={t:g}; stored times: "
                f"{np.round(self.snapshot_times, 6).tolist()}"
            )
        return j


# ----------------------------------------------------------------------
# simulation
# ----------------------------------------------------------------------

def _period_table(field, spec: MarketSpec, n_periods: Optional[int]):
    """Per-period (grid, t_start, t_end, e_offset, cap_fn) descriptors."""
    rows = []
    if isinstance(field, MultiPeriodField):
        for k in range(1, field.n_periods + 1):
            t0, t1 = spec.period_bounds(k)
            rows.append((field.period_grid(k), t0, t1, 0.0, spec.caps[k - 1]))
        nxt = [field.period_grid(k) for k in range(2, field.n_periods + 1)] + [None]
        return rows, nxt
    if isinstance(field, ValueGrid):
        if spec.horizon != "infinite":
            raise ValidationError("a bare grid simulates only the rolling market")
        q = 1 if n_periods is None else int(n_periods)
        if q < 1:
            raise ValidationError("n_periods must be >= 1")
        tau, lam = spec.period_length, spec.cap_per_period
        for k in range(1, q + 1):
            rows.append((field, (k - 1) * tau, k * tau, (k - 1) * lam, None))
        return rows, [field] * q
    raise ValidationError(f"cannot simulate against {type(field).__name__}")


def _step_factor(coeffs, P, dt: float, sq: float, xi):
    """One factor step: exact mean-reverting transition when declared."""
    if coeffs.ou_kappa is not None:
        k, s, ref = coeffs.ou_kappa, coeffs.ou_sigma, coeffs.ou_ref
        if k > 0.0:
            a = math.exp(-k * dt)
            sd = s * math.sqrt((1.0 - a * a) / (2.0 * k))
        else:
            a, sd = 1.0, s * sq
        return ref + (P - ref) * a + sd * xi
    drift = np.asarray(coeffs.drift(P), dtype=float)
    vol = np.asarray(coeffs.vol(P), dtype=float)
    return P + drift * dt + vol * sq * xi


def simulate(field, spec: MarketSpec, n_paths: int, steps_per_period: int = 512,
             seed: int = 0, p0: float = 0.0, e0: float = 0.0,
             snapshot_times: Optional[Sequence[float]] = None,
             keep_paths: int = 100, n_periods: Optional[int] = None,
             coeffs=None) -> PathBundle:
    """Euler-simulate (P, E, Y) paths against a solved field.

    ``field`` is a multi-period field or, for the rolling market, the
    stationary grid (then ``n_periods`` chooses how many periods to roll
    forward and the price reads the grid in period-local coordinates).
    The factor steps by its exact mean-reverting transition when the
    coefficients declare one, otherwise by an Euler increment.  The
    emissions state integrates the rate with a trapezoidal
    predictor-corrector, re-reading the price at the predictor point;
    the first-order coupling error of a plain Euler update shows up as
    spurious drift in the discounted price at practical step counts.
    """
    coeffs = spec.coefficients if coeffs is None else coeffs
    if n_paths < 1 or steps_per_period < 1:
        raise ValidationError("need n_paths >= 1 and steps_per_period >= 1")
    if seed < 0:
        raise ValidationError("seed must be a non-negative integer")
    periods, next_grids = _period_table(field, spec, n_periods)
    q = len(periods)
    has_p = coeffs.dim_p == 1
    g0 = periods[0][0]

    _check_reach_box(coeffs, spec, g0, periods, p0, e0)

    n_steps = q * steps_per_period
    t_end = periods[-1][2]
    times = np.empty(n_steps + 1)
    for k, (_, t0, t1, _, _) in enumerate(periods):
        loc = np.linspace(t0, t1, steps_per_period + 1)
        times[k * steps_per_period: (k + 1) * steps_per_period + 1] = loc

    if snapshot_times is None:
        snapshot_times = sorted({periods[0][1], t_end}
                                | {row[2] for row in periods}
                                | {0.5 * (row[1] + row[2]) for row in periods})
    snap_idx = sorted({int(np.argmin(np.abs(times - t))) for t in snapshot_times})
    snap_pos = {g: j for j, g in enumerate(snap_idx)}
    n_snap = len(snap_idx)

    keep = min(keep_paths, n_paths, _BLOCK)
    kept_idx = np.arange(keep)

    snap_P = np.empty((n_snap, n_paths)) if has_p else None
    snap_E = np.empty((n_snap, n_paths))
    snap_Y = np.empty((n_snap, n_paths))
    path_P = np.empty((keep, n_steps + 1)) if has_p else None
    path_E = np.empty((keep, n_steps + 1))
    path_Y = np.empty((keep, n_steps + 1))
    comp_E = np.empty((q, n_paths))
    comp_cap = np.empty((q, n_paths))
    comp_left = np.empty((q, n_paths))
    comp_right = np.empty((q, n_paths))
    branch = np.empty((q, n_paths), dtype=np.int8)
    aborted = np.zeros(n_paths, dtype=bool)
    abort_step = np.full(n_paths, -1, dtype=np.int32)

    n_blocks = (n_paths + _BLOCK - 1) // _BLOCK
    for b in range(n_blocks):
        lo, hi = b * _BLOCK, min((b + 1) * _BLOCK, n_paths)
        bs = hi - lo
        rng = np.random.Generator(np.random.Philox(key=np.array([seed, b],
                                                                dtype=np.uint64)))
        P = np.full(bs, float(p0)) if has_p else None
        E = np.full(bs, float(e0))
        Y = np.zeros(bs)
        alive = np.ones(bs, dtype=bool)
        eparam = E.copy()

        # one row of draws per path across the whole horizon, so path i
        # sees the same noise no matter how many paths share its block
        xi_rows = rng.standard_normal((bs, n_steps)) if has_p else None

        gstep = 0
        for k, (grid, t0, t1, e_off, cap) in enumerate(periods):
            dt = (t1 - t0) / steps_per_period
            sq = math.sqrt(dt)
            use_ep = grid.has_eparam
            for j in range(steps_per_period):
                t = times[gstep]
                y_new, ok = _probe(grid, t if e_off == 0.0 else t - t0,
                                   P, E - e_off,
                                   (eparam - e_off) if use_ep else None)
                newly = alive & ~ok
                if newly.any():
                    abort_step[lo:hi][newly] = gstep
                    aborted[lo:hi][newly] = True
                    alive &= ok
                Y = np.where(alive, y_new, Y)

                if gstep in snap_pos:
                    s = snap_pos[gstep]
                    if has_p:
                        snap_P[s, lo:hi] = P
                    snap_E[s, lo:hi] = E
                    snap_Y[s, lo:hi] = Y
                if b == 0 and keep > lo:
                    kb = min(keep - lo, bs)
                    if has_p:
                        path_P[lo:lo + kb, gstep] = P[:kb]
                    path_E[lo:lo + kb, gstep] = E[:kb]
                    path_Y[lo:lo + kb, gstep] = Y[:kb]

                mu0 = np.asarray(coeffs.mu(P, Y), dtype=float)
                if has_p:
                    P = np.where(alive,
                                 _step_factor(coeffs, P, dt, sq, xi_rows[:, gstep]), P)
                E_pred = E + mu0 * dt
                t_pred = min((t + dt) if e_off == 0.0 else t + dt - t0,
                             grid.last_interior_time)
                y_pred, okp = _probe(grid, t_pred, P, E_pred - e_off,
                                     (eparam - e_off) if use_ep else None)
                mu1 = np.asarray(coeffs.mu(P, np.where(okp, y_pred, Y)),
                                 dtype=float)
                E = np.where(alive, E + 0.5 * (mu0 + mu1) * dt, E)
                gstep += 1

            # -- compliance date T_k ------------------------------------
            if cap is not None:
                lvl = np.broadcast_to(
                    np.asarray(cap.level(eparam), dtype=float)
                    if not cap.is_constant else cap.constant_value,
                    (bs,)).astype(float)
            else:
                lvl = np.full(bs, e_off + spec.cap_per_period)
            # grid.last_interior_time is global for chained fields and
            # period-local for the rolling grid, same as the step reads
            y_left, okl = _probe(grid, grid.last_interior_time, P, E - e_off,
                                 (eparam - e_off) if use_ep else None)
            ng = next_grids[k]
            if ng is None:
                # after the final date the contract is settled: the right
                # value is the payout itself
                y_right = (E >= lvl).astype(float)
                okr = np.ones(bs, dtype=bool)
            else:
                off_n = periods[k + 1][3] if k + 1 < q else e_off + spec.cap_per_period
                if isinstance(field, MultiPeriodField):
                    y_right, okr = _probe(ng, ng.t0, P, E,
                                          E if ng.has_eparam else None)
                else:
                    y_right, okr = _probe(ng, 0.0, P, E - off_n, None)
            newly = alive & ~(okl & okr)
            if newly.any():
                abort_step[lo:hi][newly] = gstep
                aborted[lo:hi][newly] = True
                alive &= okl & okr

            comp_E[k, lo:hi] = E
            comp_cap[k, lo:hi] = lvl
            comp_left[k, lo:hi] = np.where(alive, y_left, np.nan)
            comp_right[k, lo:hi] = np.where(alive, y_right, np.nan)
            sign = np.sign(E - lvl)
            branch[k, lo:hi] = np.where(alive, sign, BRANCH_ABORTED).astype(np.int8)
            eparam = E.copy()
            Y = np.where(alive, y_right, Y)

        # final mesh point: right value of the last compliance date
        if n_steps in snap_pos:
            s = snap_pos[n_steps]
            if has_p:
                snap_P[s, lo:hi] = P
            snap_E[s, lo:hi] = E
            snap_Y[s, lo:hi] = Y
        if b == 0 and keep > lo:
            kb = min(keep - lo, bs)
            if has_p:
                path_P[lo:lo + kb, n_steps] = P[:kb]
            path_E[lo:lo + kb, n_steps] = E[:kb]
            path_Y[lo:lo + kb, n_steps] = Y[:kb]

    frac = float(aborted.mean())
    if frac > 1e-3:
        raise SimulationError(
            f"{frac:.2%} of paths left the grid box (limit 0.1%); widen the "
            "grids or move the start point"
        )

    return PathBundle(
        n_paths=n_paths, seed=seed, times=times,
        snapshot_times=times[snap_idx], snap_P=snap_P, snap_E=snap_E,
        snap_Y=snap_Y, kept_idx=kept_idx, path_P=path_P, path_E=path_E,
        path_Y=path_Y, compliance_E=comp_E, compliance_cap=comp_cap,
        compliance_left=comp_left, compliance_right=comp_right, branch=branch,
        aborted=aborted, abort_step=abort_step, rate=coeffs.rate,
        meta={
            "steps_per_period": steps_per_period,
            "block_size": _BLOCK,
            "n_periods": q,
            "delta_e": g0.delta_e,
            "p0": p0, "e0": e0,
            "period_ends": [row[2] for row in periods],
            "market_label": spec.label,
        },
    )


def _check_reach_box(coeffs, spec, g0, periods, p0, e0):
    """Interval bound on the reachable states vs the stored grid box."""
    horizon = periods[-1][2] - periods[0][1]
    problems = []
    if coeffs.dim_p == 1:
        p_nodes = g0.p_nodes
        vol = float(np.max(np.asarray(coeffs.vol(p_nodes), dtype=float)))
        reach = abs(p0) + 4.0 * vol * math.sqrt(horizon)
        if -reach < p_nodes[0] or reach > p_nodes[-1]:
            problems.append(
                f"factor box [{p_nodes[0]:g}, {p_nodes[-1]:g}] may not hold "
                f"4-sigma excursions (|p| up to {reach:g})"
            )
        mu_hi = float(np.max(np.asarray(coeffs.emissions_rate(
            p_nodes, np.zeros_like(p_nodes)), dtype=float)))
        mu_lo = float(np.min(np.asarray(coeffs.emissions_rate(
            p_nodes, np.ones_like(p_nodes)), dtype=float)))
    else:
        mu_hi = float(coeffs.emissions_rate(None, 0.0))
        mu_lo = float(coeffs.emissions_rate(None, 1.0))
    # grids are read in period-local coordinates for the rolling market,
    # so the per-period drift bound applies to each period separately
    rolling = periods[0][4] is None
    span_t = (periods[0][2] - periods[0][1]) if rolling else horizon
    e_top = e0 + max(mu_hi, 0.0) * span_t
    e_bot = e0 + min(mu_lo, 0.0) * span_t
    if e_bot < g0.e_nodes[0] or e_top > g0.e_nodes[-1]:
        problems.append(
            f"emissions box [{g0.e_nodes[0]:g}, {g0.e_nodes[-1]:g}] cannot hold "
            f"the reachable interval [{e_bot:g}, {e_top:g}]"
        )
    if problems:
        raise CoverageError("; ".join(problems))


# ----------------------------------------------------------------------
# statistics
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class MartingaleReport:
    t1: float
    t2: float
    n_used: int
    delta: float
    se: float
    mean_t1: float
    mean_t2: float
    passed: bool


def martingale_test(bundle: PathBundle, r: float, t1: float, t2: float,
                    period_ends: Optional[Sequence[float]] = None) -> MartingaleReport:
    """Check that the discounted price has no drift between t1 and t2.

    Uses the paired per-path differences, so the standard error reflects
    the increment, not the levels.  ``t2`` may sit exactly on a
    compliance date, in which case the left limit is used; a date
    strictly inside (t1, t2) is refused because the discounted price is
    only a martingale within a period.
    """
    if bundle.n_paths == 0:
        raise ValidationError("empty bundle")
    if not t2 > t1:
        raise ValidationError("need t2 > t1")
    if period_ends is None:
        period_ends = bundle.meta.get("period_ends", [])
    ends = np.asarray(period_ends, dtype=float)
    inside = (ends > t1 + 1e-9) & (ends < t2 - 1e-9)
    if inside.any():
        raise ValidationError(
            f"compliance date at {ends[inside][0]:g} lies strictly inside "
            f"({t1:g}, {t2:g}); the discounted price jumps there"
        )

    j1 = bundle.snapshot_index(t1)
    y1 = bundle.snap_Y[j1]
    on_date = ends.size and np.any(np.abs(ends - t2) <= 1e-9)
    if on_date:
        k = int(np.argmin(np.abs(ends - t2)))
        y2 = bundle.compliance_left[k]
    else:
        y2 = bundle.snap_Y[bundle.snapshot_index(t2)]

    ok = ~bundle.aborted & np.isfinite(y1) & np.isfinite(y2)
    n = int(ok.sum())
    if n == 0:
        raise ValidationError("no usable paths")
    d = math.exp(-r * t2) * y2[ok] - math.exp(-r * t1) * y1[ok]
    delta = float(np.mean(d))
    se = float(np.std(d, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    passed = abs(delta) <= 3.0 * se + 1e-12
    return MartingaleReport(t1=float(t1), t2=float(t2), n_used=n, delta=delta,
                            se=se, mean_t1=float(np.mean(y1[ok])),
                            mean_t2=float(np.mean(y2[ok])), passed=passed)


@dataclass(frozen=True)
class JumpReport:
    margin_cells: float
    above_residual: Optional[float]
    below_residual: Optional[float]
    n_above: int
    n_below: int
    n_at: int
    per_period: tuple


def jump_consistency_test(bundle: PathBundle, margin_cells: float = 3.0) -> JumpReport:
    """Trichotomy check at every compliance date.

    Paths above the cap by at least ``margin_cells`` cells must price the
    certain penalty (left limit near 1); paths below by the same margin
    must carry the next period's value across the date.  Paths inside
    the margin band are counted but judged by neither branch, since at
    the cap the limit is only bracketed, not pinned.
    """
    de = bundle.meta["delta_e"]
    band = margin_cells * de
    rows = []
    r_above_all, r_below_all = [], []
    n_above = n_below = n_at = 0
    for k in range(bundle.n_periods):
        ok = bundle.branch[k] != BRANCH_ABORTED
        gap = bundle.compliance_E[k] - bundle.compliance_cap[k]
        sel_a = ok & (gap >= band) & (gap > 0)
        sel_b = ok & (-gap >= band) & (gap < 0)
        sel_at = ok & ~sel_a & ~sel_b
        ra = (float(np.max(np.abs(bundle.compliance_left[k][sel_a] - 1.0)))
              if sel_a.any() else None)
        rb = (float(np.max(np.abs(bundle.compliance_left[k][sel_b]
                                  - bundle.compliance_right[k][sel_b])))
              if sel_b.any() else None)
        rows.append({"period": k + 1, "above": ra, "below": rb,
                     "n_above": int(sel_a.sum()), "n_below": int(sel_b.sum()),
                     "n_at": int(sel_at.sum())})
        if ra is not None:
            r_above_all.append(ra)
        if rb is not None:
            r_below_all.append(rb)
        n_above += int(sel_a.sum())
        n_below += int(sel_b.sum())
        n_at += int(sel_at.sum())
    return JumpReport(
        margin_cells=float(margin_cells),
        above_residual=max(r_above_all) if r_above_all else None,
        below_residual=max(r_below_all) if r_below_all else None,
        n_above=n_above, n_below=n_below, n_at=n_at, per_period=tuple(rows),
    )


# ----------------------------------------------------------------------
# CSV export
# ----------------------------------------------------------------------

def paths_csv(bundle: PathBundle, path: Union[str, Path]) -> None:
    """Kept trajectories, one row per (path, time)."""
    has_p = bundle.path_P is not None
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("path,t" + (",P" if has_p else "") + ",E,Y\n")
        for row, pidx in enumerate(bundle.kept_idx):
            for j, t in enumerate(bundle.times):
                cells = [str(int(pidx)), f"{t:.17g}"]
                if has_p:
                    cells.append(f"{bundle.path_P[row, j]:.17g}")
                cells.append(f"{bundle.path_E[row, j]:.17g}")
                cells.append(f"{bundle.path_Y[row, j]:.17g}")
                fh.write(",".join(cells) + "\n")


def events_csv(bundle: PathBundle, path: Union[str, Path]) -> None:
    """Compliance-date records for every path."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("path,k,E_Tk,cap,Y_left,Y_right,branch\n")
        for k in range(bundle.n_periods):
            for i in range(bundle.n_paths):
                fh.write(
                    f"{i},{k + 1},{bundle.compliance_E[k, i]:.17g},"
                    f"{bundle.compliance_cap[k, i]:.17g},"
                    f"{bundle.compliance_left[k, i]:.17g},"
                    f"{bundle.compliance_right[k, i]:.17g},"
                    f"{_BRANCH_NAMES[int(bundle.branch[k, i])]}\n"
                )
