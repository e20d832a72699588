"""Market primitives: coefficients, caps, terminal surfaces, market specs.

The model layer is deliberately dumb about numerics.  It holds the market
description (factor dynamics, emission rate, compliance caps, terminal
payout surface) and checks the structural properties the pricing theory
needs: Lipschitz bounds, strict monotonicity of the emission rate in the
price variable, non-increasing net supply, and the shape constraints on
terminal surfaces (values in [0, 1], non-decreasing in cumulative
emissions, correct far-field limits).

Conventions
-----------
* ``p`` is the exogenous factor state (dimension ``dim_p``, possibly 0),
  ``y`` the allowance price, ``e`` cumulative emissions, and ``eparam``
  the emissions level recorded at the start of the current period (only
  relevant when a cap rule feeds back on it).
* All user-supplied callables must accept numpy arrays and broadcast.
  For ``dim_p == 0`` the factor argument is passed as ``None`` and must
  be ignored.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import CoverageError, ValidationError

__all__ = [
    "CoefficientSet",
    "CoefficientReport",
    "SampleBox",
    "validate_coefficients",
    "CapFunction",
    "CapReport",
    "validate_cap",
    "make_cap_allocation",
    "make_cap_msr",
    "TerminalSurface",
    "TerminalReport",
    "indicator_terminal",
    "smoothed_indicator",
    "constant_surface",
    "validate_terminal",
    "link_terminal",
    "MarketSpec",
]


# ----------------------------------------------------------------------
# coefficients
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class CoefficientSet:
    """Dynamics of the factor process and the emission rate.

    Parameters
    ----------
    dim_p:
        Dimension of the factor state; 0 means no factor.
    emissions_rate:
        ``mu(p, y)``, the instantaneous emission rate as a function of
        factor state and allowance price.  Must be strictly decreasing
        in ``y`` with one-sided slopes between ``mono_l1`` and
        ``mono_l2``.
    rate:
        Riskless interest rate ``r >= 0``.
    lipschitz_L:
        Common Lipschitz bound ``L >= 1`` for drift, volatility and
        emission rate.
    mono_l1, mono_l2:
        Lower and upper monotonicity constants of ``-mu`` in ``y``;
        ``1/L <= l1 <= l2 <= L``.
    drift, vol:
        ``b(p)`` and ``sigma(p)`` for the factor; required when
        ``dim_p > 0``.
    emissions_antiderivative:
        Optional closed form of ``M(p, y) = int_0^y mu(p, s) ds``.  When
        present the solver uses it verbatim; otherwise the flux is
        tabulated by quadrature.
    ou_kappa, ou_sigma, ou_ref:
        Set when the factor is the mean-reverting Gaussian process
        ``dP = -kappa (P - ref) dt + sigma dW``; the simulator then
        steps the factor by its exact transition instead of an Euler
        update.  Leave ``ou_kappa`` ``None`` for a generic factor.
    """

    dim_p: int
    emissions_rate: Callable
    rate: float
    lipschitz_L: float
    mono_l1: float
    mono_l2: float
    drift: Optional[Callable] = None
    vol: Optional[Callable] = None
    emissions_antiderivative: Optional[Callable] = None
    ou_kappa: Optional[float] = None
    ou_sigma: Optional[float] = None
    ou_ref: float = 0.0
    label: str = ""

    def __post_init__(self):
        if self.dim_p < 0:
            raise ValidationError("dim_p must be >= 0")
        if self.rate < 0:
            raise ValidationError("interest rate must be >= 0")
        if not self.lipschitz_L >= 1.0:
            raise ValidationError("lipschitz_L must be >= 1")
        ok = (1.0 / self.lipschitz_L) <= self.mono_l1 <= self.mono_l2 <= self.lipschitz_L
        if not ok:
            raise ValidationError(
                "monotonicity constants must satisfy 1/L <= l1 <= l2 <= L, got "
                f"l1={self.mono_l1}, l2={self.mono_l2}, L={self.lipschitz_L}"
            )
        if self.dim_p > 0 and (self.drift is None or self.vol is None):
            raise ValidationError("drift and vol are required when dim_p > 0")

    def mu(self, p, y):
        out = np.asarray(self.emissions_rate(p, y), dtype=float)
        return out


@dataclass(frozen=True)
class SampleBox:
    """Axis-aligned box over (factor, price) used for sampled validation."""

    y_low: float = -0.25
    y_high: float = 1.25
    p_low: Optional[Sequence[float]] = None
    p_high: Optional[Sequence[float]] = None

    def p_bounds(self, dim_p: int):
        if dim_p == 0:
            return None, None
        lo = np.full(dim_p, -1.0) if self.p_low is None else np.asarray(self.p_low, float)
        hi = np.full(dim_p, 1.0) if self.p_high is None else np.asarray(self.p_high, float)
        if lo.shape != (dim_p,) or hi.shape != (dim_p,) or np.any(hi <= lo):
            raise ValidationError("sample box factor bounds are inconsistent")
        return lo, hi


@dataclass(frozen=True)
class CoefficientReport:
    passed: bool
    lip_mu: float
    mono_min: float
    mono_max: float
    lip_drift: float = 0.0
    lip_vol: float = 0.0
    n_samples: int = 0
    violations: tuple = ()


def _pairs(rng, low, high, n):
    a = rng.uniform(low, high, size=n)
    b = rng.uniform(low, high, size=n)
    return a, b


def validate_coefficients(coeffs: CoefficientSet, box: SampleBox = SampleBox(),
                          n_samples: int = 4096, seed: int = 0,
                          rtol: float = 1e-6) -> CoefficientReport:
    """Check the declared Lipschitz and monotonicity constants on samples.

    Draws point pairs inside ``box`` and measures the worst difference
    quotients of ``mu`` (jointly in ``(p, y)``), of the drift and of the
    volatility, plus the one-sided monotonicity ratio

        (y - y') * (mu(p, y') - mu(p, y)) / |y - y'|^2

    at fixed factor state.  The report passes when every measured value
    sits within the declared constants up to ``rtol``.  Non-finite
    outputs raise :class:`ValidationError` immediately.
    """
    rng = np.random.default_rng(seed)
    d = coeffs.dim_p
    y_a, y_b = _pairs(rng, box.y_low, box.y_high, n_samples)
    keep = np.abs(y_a - y_b) > 1e-9
    y_a, y_b = y_a[keep], y_b[keep]

    if d > 0:
        lo, hi = box.p_bounds(d)
        shape = (y_a.size, d)
        p_a = rng.uniform(lo, hi, size=shape)
        p_b = rng.uniform(lo, hi, size=shape)
        if d == 1:
            p_a, p_b = p_a[:, 0], p_b[:, 0]
        p_dist = np.abs(np.reshape(p_a - p_b, (y_a.size, -1))).sum(axis=1)
    else:
        p_a = p_b = None
        p_dist = 0.0

    mu_aa = coeffs.mu(p_a, y_a)
    mu_bb = coeffs.mu(p_b, y_b)
    mu_ab = coeffs.mu(p_a, y_b)  # same factor state as mu_aa
    for arr in (mu_aa, mu_bb, mu_ab):
        if not np.all(np.isfinite(arr)):
            raise ValidationError("emissions_rate returned non-finite values")

    lip_mu = float(np.max(np.abs(mu_aa - mu_bb) / (p_dist + np.abs(y_a - y_b))))
    ratio = (y_a - y_b) * (mu_ab - mu_aa) / (y_a - y_b) ** 2
    mono_min, mono_max = float(ratio.min()), float(ratio.max())

    lip_b = lip_s = 0.0
    if d > 0:
        ba, bb = coeffs.drift(p_a), coeffs.drift(p_b)
        sa, sb = coeffs.vol(p_a), coeffs.vol(p_b)
        for arr in (ba, bb, sa, sb):
            if not np.all(np.isfinite(np.asarray(arr, float))):
                raise ValidationError("drift or vol returned non-finite values")
        safe = np.where(p_dist > 1e-12, p_dist, np.inf)
        lip_b = float(np.max(np.abs(np.asarray(ba) - np.asarray(bb)) / safe))
        lip_s = float(np.max(np.abs(np.asarray(sa) - np.asarray(sb)) / safe))

    violations = []
    L, l1, l2 = coeffs.lipschitz_L, coeffs.mono_l1, coeffs.mono_l2
    if lip_mu > L * (1 + rtol):
        violations.append(f"mu Lipschitz {lip_mu:.6g} exceeds declared L={L}")
    if mono_min < l1 * (1 - rtol):
        violations.append(f"monotonicity ratio {mono_min:.6g} below declared l1={l1}")
    if mono_max > l2 * (1 + rtol):
        violations.append(f"monotonicity ratio {mono_max:.6g} above declared l2={l2}")
    if lip_b > L * (1 + rtol):
        violations.append(f"drift Lipschitz {lip_b:.6g} exceeds declared L={L}")
    if lip_s > L * (1 + rtol):
        violations.append(f"vol Lipschitz {lip_s:.6g} exceeds declared L={L}")

    return CoefficientReport(
        passed=not violations,
        lip_mu=lip_mu, mono_min=mono_min, mono_max=mono_max,
        lip_drift=lip_b, lip_vol=lip_s,
        n_samples=int(y_a.size), violations=tuple(violations),
    )


# ----------------------------------------------------------------------
# caps
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class CapFunction:
    """Cumulative allowance cap for one compliance date.

    ``level(eparam)`` maps the emissions recorded at the previous
    compliance date to the cap applying at this one.  ``constant_value``
    is set when the level does not depend on ``eparam`` at all, which
    unlocks the fast solver path (no ``eparam`` axis).
    """

    kind: str
    level_fn: Callable
    constant_value: Optional[float] = None
    label: str = ""

    @property
    def is_constant(self) -> bool:
        return self.constant_value is not None

    def level(self, eparam=None):
        if self.is_constant:
            if eparam is None:
                return self.constant_value
            return np.full_like(np.asarray(eparam, dtype=float), self.constant_value)
        if eparam is None:
            raise ValidationError(f"cap '{self.kind}' needs the recorded emissions argument")
        return np.asarray(self.level_fn(np.asarray(eparam, dtype=float)), dtype=float)

    def gamma(self, eparam):
        """Net supply: cap level minus the recorded emissions."""
        eparam = np.asarray(eparam, dtype=float)
        return self.level(eparam) - eparam

    @staticmethod
    def constant(value: float, kind: str = "constant", label: str = "") -> "CapFunction":
        value = float(value)
        return CapFunction(kind=kind, level_fn=lambda e: np.full_like(e, value),
                           constant_value=value, label=label)


@dataclass(frozen=True)
class CapReport:
    gamma_monotone: bool
    max_uptick: float
    left_edge_gamma: float
    right_edge_gamma: float
    admissible: bool
    notes: tuple = ()


def validate_cap(cap: CapFunction, eparam_low: float, eparam_high: float,
                 n: int = 2049, tol: float = 1e-12) -> CapReport:
    """Sampled admissibility check of a cap rule.

    Net supply must be non-increasing in the recorded emissions and must
    eventually drop (sampled proxy for divergence to minus infinity at
    the right).  Violations are reported, never raised: rules like a
    market stability reserve intentionally break monotonicity at the
    band edges and stay usable.
    """
    grid = np.linspace(eparam_low, eparam_high, n)
    g = cap.gamma(grid)
    if not np.all(np.isfinite(g)):
        raise ValidationError(f"cap '{cap.kind}' produced non-finite net supply")
    upticks = np.diff(g)
    max_uptick = float(upticks.max()) if upticks.size else 0.0
    monotone = max_uptick <= tol
    notes = []
    if not monotone:
        notes.append(f"net supply increases by up to {max_uptick:.6g} on the grid")
    decreasing_overall = g[-1] < g[0] - tol
    if not decreasing_overall:
        notes.append("net supply does not decrease across the validation grid")
    return CapReport(
        gamma_monotone=monotone,
        max_uptick=max_uptick,
        left_edge_gamma=float(g[0]),
        right_edge_gamma=float(g[-1]),
        admissible=monotone and decreasing_overall,
        notes=tuple(notes),
    )


def make_cap_allocation(allocations: Sequence[float],
                        mode: str = "banking-borrowing-withdrawal") -> tuple:
    """Per-period caps from a schedule of fresh allowance allocations.

    With banking, borrowing (one period ahead) and withdrawal the cap at
    date ``k`` is the sum of the first ``min(k+1, q)`` allocations; drop
    borrowing and it is the sum of the first ``k``.  Either way the cap
    level is a constant, independent of recorded emissions.
    """
    if mode not in ("banking-borrowing-withdrawal", "banking-withdrawal"):
        raise ValidationError(f"unknown allocation mode '{mode}'")
    alloc = [float(c) for c in allocations]
    if not alloc or any(c <= 0 for c in alloc):
        raise ValidationError("allocations must be a non-empty sequence of positive numbers")
    q = len(alloc)
    caps = []
    for k in range(1, q + 1):
        upto = min(k + 1, q) if mode == "banking-borrowing-withdrawal" else k
        caps.append(CapFunction.constant(sum(alloc[:upto]), kind="affine-allocation",
                                         label=f"{mode}[{k}/{q}]"))
    return tuple(caps)


def make_cap_msr(c1: float, c2: float, kappa_low: float, kappa_high: float,
                 top_up: float, retain_fraction: float) -> tuple:
    """Two-period cap with a stability-reserve adjustment at the second date.

    The provisional net supply at the second date is ``c1 + c2`` minus
    the emissions recorded at the first.  Below ``kappa_low`` the
    reserve releases ``top_up`` extra allowances; inside the band the
    provisional figure stands; above ``kappa_high`` only the fraction
    ``retain_fraction`` survives.  The first date keeps the plain cap
    ``c1``.
    """
    if min(c1, c2) <= 0:
        raise ValidationError("allocations c1, c2 must be positive")
    if not (0 <= kappa_low <= kappa_high):
        raise ValidationError("need 0 <= kappa_low <= kappa_high")
    if top_up < 0:
        raise ValidationError("top_up must be >= 0")
    if not (0 < retain_fraction <= 1):
        raise ValidationError("retain_fraction must lie in (0, 1]")

    def level(eparam):
        provisional = (c1 + c2) - eparam
        adjusted = np.where(
            provisional < kappa_low, provisional + top_up,
            np.where(provisional > kappa_high, retain_fraction * provisional, provisional),
        )
        return adjusted + eparam

    first = CapFunction.constant(c1, kind="affine-allocation", label="msr[1/2]")
    second = CapFunction(kind="msr", level_fn=level, constant_value=None, label="msr[2/2]")
    return first, second


# ----------------------------------------------------------------------
# terminal surfaces
# ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TerminalSurface:
    """Terminal payout surface ``phi(p, e, eparam) in [0, 1]``.

    ``parametrized`` marks genuine dependence on the recorded emissions
    ``eparam`` (the parametrised class); plain surfaces ignore that
    argument.  ``lipschitz_p`` is the declared Lipschitz constant in the
    factor variable, ``None`` when no bound is claimed (grid-backed
    linking surfaces).
    """

    fn: Callable
    lipschitz_p: Optional[float] = 0.0
    representation: str = "closed-form"
    parametrized: bool = False
    label: str = ""

    def __call__(self, p, e, eparam=None):
        return np.asarray(self.fn(p, e, eparam), dtype=float)


def indicator_terminal(cap: CapFunction) -> TerminalSurface:
    """Default terminal surface: one on or above the final cap, zero below."""

    def fn(p, e, eparam=None):
        e = np.asarray(e, dtype=float)
        if cap.is_constant:
            lvl = cap.constant_value
        else:
            lvl = cap.level(eparam)
        return (e >= lvl).astype(float)

    return TerminalSurface(fn=fn, lipschitz_p=0.0, parametrized=not cap.is_constant,
                           label=f"indicator({cap.kind})")


def smoothed_indicator(cap: CapFunction, width: float) -> TerminalSurface:
    """Cubic ramp of the given width replacing the sharp indicator."""
    if width <= 0:
        raise ValidationError("smoothing width must be positive")

    def fn(p, e, eparam=None):
        e = np.asarray(e, dtype=float)
        lvl = cap.constant_value if cap.is_constant else cap.level(eparam)
        x = np.clip((e - lvl) / width + 0.5, 0.0, 1.0)
        return x * x * (3.0 - 2.0 * x)

    return TerminalSurface(fn=fn, lipschitz_p=0.0, parametrized=not cap.is_constant,
                           label=f"smoothstep({cap.kind},w={width:g})")


def constant_surface(value: float) -> TerminalSurface:
    """Constant payout, mainly for discount-identity checks.

    Not an admissible terminal class member (its far-field limits are
    wrong) but the solver accepts it; validation will flag it.
    """
    if not (0.0 <= value <= 1.0):
        raise ValidationError("constant surface value must lie in [0, 1]")
    v = float(value)

    def fn(p, e, eparam=None):
        return np.full_like(np.asarray(e, dtype=float), v)

    return TerminalSurface(fn=fn, lipschitz_p=0.0, label=f"const({v:g})")


@dataclass(frozen=True)
class TerminalReport:
    range_ok: bool
    monotone_ok: bool
    left_limit: float
    right_limit: float
    limits_ok: bool
    lipschitz_p_measured: float
    diagonal_monotone_ok: bool
    passed: bool
    notes: tuple = ()


def validate_terminal(surface: TerminalSurface, e_low: float, e_high: float,
                      p_low=None, p_high=None, eparam_low=None, eparam_high=None,
                      n: int = 513, tol: float = 1e-9) -> TerminalReport:
    """Sampled class membership check for a terminal surface.

    Checks range [0, 1], monotonicity in ``e``, the far-field limits at
    the grid edges, a measured factor-Lipschitz quotient, and (for
    parametrised surfaces) monotonicity of the diagonal family
    ``(p, x) -> phi(p, e + x, x)``.  Produces a report; never refuses
    construction.
    """
    e = np.linspace(e_low, e_high, n)
    notes = []
    if p_low is None:
        p_samples = [None]
    else:
        p_samples = list(np.linspace(p_low, p_high, 5))
    ep_samples = [None]
    if surface.parametrized:
        lo = e_low if eparam_low is None else eparam_low
        hi = e_high if eparam_high is None else eparam_high
        ep_samples = list(np.linspace(lo, hi, 7))

    vmin, vmax = np.inf, -np.inf
    worst_down = 0.0
    left, right = np.inf, -np.inf
    for ps in p_samples:
        for eps_ in ep_samples:
            vals = surface(ps, e, eps_)
            if not np.all(np.isfinite(vals)):
                raise ValidationError("terminal surface returned non-finite values")
            vmin, vmax = min(vmin, float(vals.min())), max(vmax, float(vals.max()))
            d = np.diff(vals)
            if d.size:
                worst_down = max(worst_down, float((-d).max()))
            left = min(left, float(vals[0]))
            right = max(right, float(vals[-1]))

    range_ok = vmin >= -tol and vmax <= 1.0 + tol
    monotone_ok = worst_down <= tol
    limits_ok = left <= tol and right >= 1.0 - tol
    if not range_ok:
        notes.append(f"values leave [0,1]: min={vmin:.3g}, max={vmax:.3g}")
    if not monotone_ok:
        notes.append(f"decreases along e by up to {worst_down:.3g}")
    if not limits_ok:
        notes.append(f"edge limits ({left:.3g}, {right:.3g}) instead of (0, 1)")

    lip_measured = 0.0
    if p_low is not None and len(p_samples) > 1:
        for pa, pb in zip(p_samples[:-1], p_samples[1:]):
            if pb == pa:
                continue
            diff = np.abs(surface(pa, e, ep_samples[0]) - surface(pb, e, ep_samples[0]))
            lip_measured = max(lip_measured, float(diff.max()) / abs(pb - pa))
        if surface.lipschitz_p is not None and lip_measured > surface.lipschitz_p + tol:
            notes.append(
                f"measured factor Lipschitz {lip_measured:.3g} exceeds declared "
                f"{surface.lipschitz_p:.3g}"
            )

    diag_ok = True
    if surface.parametrized and len(ep_samples) > 1:
        xs = np.linspace(ep_samples[0], ep_samples[-1], n)
        for offset in np.linspace(e_low - e_high, e_high - e_low, 5):
            for ps in p_samples:
                diag = surface(ps, xs + offset, xs)
                dd = np.diff(diag)
                if dd.size and float((-dd).max()) > tol:
                    diag_ok = False
        if not diag_ok:
            notes.append("diagonal family is not monotone in the recorded emissions")

    passed = range_ok and monotone_ok and limits_ok and diag_ok
    return TerminalReport(range_ok=range_ok, monotone_ok=monotone_ok,
                          left_limit=left, right_limit=right, limits_ok=limits_ok,
                          lipschitz_p_measured=lip_measured,
                          diagonal_monotone_ok=diag_ok, passed=passed,
                          notes=tuple(notes))


def link_terminal(next_grid, cap: CapFunction) -> TerminalSurface:
    """Terminal surface of a period from the solved field of the next one.

    Below the cap the payout is the next field at its own start time
    evaluated on the diagonal (recorded emissions equal to current
    emissions); on or above the cap the penalty is certain and the
    payout is 1.

    ``next_grid`` is duck-typed: it must expose ``at_start(p, e,
    eparam=...)`` plus ``e_nodes`` / ``eparam_nodes`` attributes (a
    solved one-period grid does).  Lookups are clamped to the stored
    axes within a two-cell slack band, which covers the ghost-cell
    quadrature points of a projection on the same grid (the domain
    margins keep the field flat there); anything farther out raises
    :class:`CoverageError`.
    """
    e_ax = np.asarray(next_grid.e_nodes, dtype=float)
    e_lo, e_hi = float(e_ax[0]), float(e_ax[-1])
    slack = 2.0 * float(e_ax[1] - e_ax[0])
    has_eparam = getattr(next_grid, "eparam_nodes", None) is not None
    if has_eparam:
        ep_lo = float(next_grid.eparam_nodes[0])
        ep_hi = float(next_grid.eparam_nodes[-1])

    def fn(p, e, eparam=None):
        e = np.asarray(e, dtype=float)
        lvl = np.asarray(cap.constant_value if cap.is_constant else cap.level(eparam),
                         dtype=float)
        if p is None or np.ndim(p) == 0:
            shape = np.broadcast(e, lvl).shape
        else:
            shape = np.broadcast(e, lvl, np.asarray(p)).shape
        below = np.broadcast_to(e < lvl, shape)
        out = np.ones(shape, dtype=float)
        if np.any(below):
            eb = np.broadcast_to(e, shape)[below]
            if eb.min() < e_lo - slack or eb.max() > e_hi + slack:
                raise CoverageError(
                    f"next field's emissions axis [{e_lo:g}, {e_hi:g}] does not "
                    f"cover the diagonal range [{eb.min():g}, {eb.max():g}] "
                    "even with ghost slack"
                )
            eb = np.clip(eb, e_lo, e_hi)
            if p is not None and np.ndim(p) > 0:
                pb = np.broadcast_to(p, shape)[below]
            else:
                pb = p
            diag_ep = np.clip(eb, ep_lo, ep_hi) if has_eparam else None
            out[below] = next_grid.at_start(pb, eb, eparam=diag_ep)
        return out

    return TerminalSurface(fn=fn, lipschitz_p=None, representation="grid-sampled",
                           parametrized=not cap.is_constant,
                           label=f"linked({cap.kind})")


# ----------------------------------------------------------------------
# market specification
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class MarketSpec:
    """Full description of one cap-and-trade market.

    Finite markets carry explicit period ends ``T_1 < ... < T_q`` and one
    cap per end; the rolling (infinite-horizon) market carries a period
    length and a constant per-period allocation instead.  The penalty is
    normalised to 1; any other value is a unit error, not a feature.
    """

    coefficients: CoefficientSet
    horizon: str = "finite"
    period_ends: tuple = ()
    caps: tuple = ()
    period_length: Optional[float] = None
    cap_per_period: Optional[float] = None
    penalty: float = 1.0
    terminal_kind: str = "indicator"
    terminal_width: float = 0.0
    label: str = ""

    def __post_init__(self):
        if self.penalty != 1.0:
            raise ValidationError("the penalty is normalised to 1; rescale the price unit instead")
        if self.horizon == "finite":
            ends = tuple(float(t) for t in self.period_ends)
            if not ends:
                raise ValidationError("finite market needs at least one period end")
            if any(e <= s for s, e in zip((0.0,) + ends, ends)):
                raise ValidationError("period ends must be strictly increasing and positive")
            if len(self.caps) != len(ends):
                raise ValidationError("need exactly one cap per period end")
            object.__setattr__(self, "period_ends", ends)
        elif self.horizon == "infinite":
            if not self.period_length or self.period_length <= 0:
                raise ValidationError("infinite market needs a positive period length")
            if self.cap_per_period is None or self.cap_per_period <= 0:
                raise ValidationError("infinite market needs a positive per-period cap")
        else:
            raise ValidationError(f"unknown horizon '{self.horizon}'")
        if self.terminal_kind not in ("indicator", "smoothed-indicator"):
            raise ValidationError(f"unknown terminal kind '{self.terminal_kind}'")
        if self.terminal_kind == "smoothed-indicator" and self.terminal_width <= 0:
            raise ValidationError("smoothed-indicator terminal needs a positive width")

    @property
    def n_periods(self) -> int:
        if self.horizon != "finite":
            raise ValidationError("n_periods is only defined for finite markets")
        return len(self.period_ends)

    def period_bounds(self, k: int):
        """Start and end time of period ``k`` (1-based)."""
        ends = self.period_ends
        if not 1 <= k <= len(ends):
            raise ValidationError(f"period index {k} out of range 1..{len(ends)}")
        start = 0.0 if k == 1 else ends[k - 2]
        return start, ends[k - 1]

    def final_terminal(self) -> TerminalSurface:
        """Terminal surface at the last compliance date."""
        cap = self.caps[-1]
        if self.terminal_kind == "indicator":
            return indicator_terminal(cap)
        return smoothed_indicator(cap, self.terminal_width)
