"""Drift fields, scaled cookie environments, and recurrence classification.

A drift field phi(x, ell) is a bounded function of position x and local time
ell (homogeneous fields ignore x).  At lattice scale n it induces per-visit
excitations eps(i, x) = phi(x/(2n), i/(2n)) / (2n), and the walk steps up on
its i-th visit to site x with probability (1 + eps(i, x)) / 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ScaleTooSmallError, UnsupportedCriterionError

__all__ = [
    "DriftField",
    "CookieEnvironment",
    "RecurrenceReport",
    "constant_field",
    "indicator_field",
    "piecewise_linear_field",
    "product_field",
    "negate_field",
    "antiderivative",
    "make_scaled_environment",
    "step_probability",
    "classify_recurrence",
]


@dataclass(frozen=True)
class DriftField:
    """A bounded drift field phi(x, ell), Lipschitz in ell.

    ``fn`` must accept numpy arrays and broadcast.  ``bound`` is sup|phi|,
    ``lipschitz_ell`` a Lipschitz constant in the second argument.
    ``support_radius`` (optional) promises phi(x, .) = 0 for |x| >= R.
    ``ell_support`` (optional) promises phi(., ell) = 0 for ell > that value;
    ``constant_ell_from`` promises phi(., ell) is constant in ell beyond it
    (used by samplers to collapse tails of Bernoulli trial sequences).
    ``antiderivative_fn`` (optional) is a closed form of
    h(x, lam) = integral_0^lam phi(x, u) du.
    """

    fn: Callable[..., np.ndarray]
    bound: float
    lipschitz_ell: float
    homogeneous: bool
    support_radius: Optional[float] = None
    ell_support: Optional[float] = None
    constant_ell_from: Optional[float] = None
    nonnegative: bool = False
    antiderivative_fn: Optional[Callable[..., np.ndarray]] = None
    label: str = "custom"

    def evaluate(self, x: float, ell: float) -> float:
        if self.homogeneous:
            return float(self.fn(ell))
        return float(self.fn(x, ell))

    def evaluate_many(self, x, ell) -> np.ndarray:
        ell = np.asarray(ell, dtype=float)
        if self.homogeneous:
            return np.asarray(self.fn(ell), dtype=float)
        x = np.asarray(x, dtype=float)
        return np.asarray(self.fn(x, ell), dtype=float)

    def h_many(self, x, lam) -> np.ndarray:
        """Vectorized antiderivative; falls back to quadrature per element."""
        lam = np.asarray(lam, dtype=float)
        if self.antiderivative_fn is not None:
            if self.homogeneous:
                return np.asarray(self.antiderivative_fn(lam), dtype=float)
            return np.asarray(self.antiderivative_fn(np.asarray(x, dtype=float), lam), dtype=float)
        flat = np.broadcast_arrays(np.asarray(x, dtype=float), lam)
        out = np.empty(flat[0].shape, dtype=float)
        for idx in np.ndindex(out.shape):
            out[idx] = antiderivative(self, float(flat[0][idx]), float(flat[1][idx]))
        return out


def constant_field(c: float) -> DriftField:
    """phi(ell) = c for all ell."""
    return DriftField(
        fn=lambda ell: np.full_like(np.asarray(ell, dtype=float), c),
        bound=abs(c),
        lipschitz_ell=0.0,
        homogeneous=True,
        ell_support=None if c != 0.0 else 0.0,
        constant_ell_from=0.0,
        nonnegative=c >= 0.0,
        antiderivative_fn=lambda lam: c * np.asarray(lam, dtype=float),
        label=f"constant({c:g})",
    )


def indicator_field(c: float = 1.0, width: float = 1.0) -> DriftField:
    """phi(ell) = c on [0, width], 0 after (closed left interval)."""
    if width <= 0:
        raise ValueError("width must be positive")
    return DriftField(
        fn=lambda ell: np.where(np.asarray(ell, dtype=float) <= width, c, 0.0),
        bound=abs(c),
        lipschitz_ell=0.0,  # cadlag step; Lipschitz only piecewise
        homogeneous=True,
        ell_support=width,
        constant_ell_from=width,
        nonnegative=c >= 0.0,
        antiderivative_fn=lambda lam: c * np.minimum(np.asarray(lam, dtype=float), width),
        label=f"indicator({c:g} on [0,{width:g}])",
    )


def piecewise_linear_field(knots: Sequence[float], values: Sequence[float]) -> DriftField:
    """Homogeneous field interpolating (knots, values) linearly, constant tail.

    Beyond the last knot the field keeps the final value; the exact
    antiderivative of the interpolant is attached.
    """
    kn = np.asarray(knots, dtype=float)
    va = np.asarray(values, dtype=float)
    if kn.ndim != 1 or kn.shape != va.shape or kn.size < 2:
        raise ValueError("need matching 1-d knots/values with at least two points")
    if not np.all(np.diff(kn) > 0) or kn[0] != 0.0:
        raise ValueError("knots must be strictly increasing and start at 0")

    def fn(ell):
        return np.interp(np.asarray(ell, dtype=float), kn, va)

    # Exact running integral of the interpolant at every knot.
    seg = 0.5 * (va[1:] + va[:-1]) * np.diff(kn)
    cum = np.concatenate([[0.0], np.cumsum(seg)])

    def hfn(lam):
        lam = np.asarray(lam, dtype=float)
        idx = np.clip(np.searchsorted(kn, lam, side="right") - 1, 0, kn.size - 2)
        x0 = kn[idx]
        inside = np.minimum(lam, kn[-1]) - x0
        v0 = va[idx]
        slope = (va[idx + 1] - va[idx]) / (kn[idx + 1] - kn[idx])
        part = cum[idx] + v0 * inside + 0.5 * slope * inside**2
        tail = np.where(lam > kn[-1], (lam - kn[-1]) * va[-1], 0.0)
        return part + tail

    slopes = np.diff(va) / np.diff(kn)
    tail_zero = va[-1] == 0.0
    return DriftField(
        fn=fn,
        bound=float(np.max(np.abs(va))),
        lipschitz_ell=float(np.max(np.abs(slopes))),
        homogeneous=True,
        ell_support=float(kn[-1]) if tail_zero and va[-1] == 0.0 else None,
        constant_ell_from=float(kn[-1]),
        nonnegative=bool(np.all(va >= 0)),
        antiderivative_fn=hfn,
        label="piecewise-linear",
    )


def product_field(g_knots, g_values, k_knots, k_values) -> DriftField:
    """Non-homogeneous field phi(x, ell) = g(x) * k(ell), both tabulated.

    g is linearly interpolated with value 0 outside its knot range; k follows
    the piecewise-linear convention of :func:`piecewise_linear_field`.
    """
    gk = np.asarray(g_knots, dtype=float)
    gv = np.asarray(g_values, dtype=float)
    if gk.ndim != 1 or gk.shape != gv.shape or gk.size < 2 or not np.all(np.diff(gk) > 0):
        raise ValueError("need strictly increasing 1-d g_knots with matching values")
    base = piecewise_linear_field(k_knots, k_values)

    def g_of(x):
        return np.interp(np.asarray(x, dtype=float), gk, gv, left=0.0, right=0.0)

    def fn(x, ell):
        return g_of(x) * base.fn(ell)

    def hfn(x, lam):
        return g_of(x) * base.antiderivative_fn(lam)

    return DriftField(
        fn=fn,
        bound=float(np.max(np.abs(gv)) * base.bound),
        lipschitz_ell=float(np.max(np.abs(gv)) * base.lipschitz_ell),
        homogeneous=False,
        support_radius=float(max(abs(gk[0]), abs(gk[-1]))),
        ell_support=base.ell_support,
        constant_ell_from=base.constant_ell_from,
        nonnegative=bool(np.all(gv >= 0)) and base.nonnegative,
        antiderivative_fn=hfn,
        label="product",
    )


def negate_field(field: DriftField) -> DriftField:
    """The field -phi (used by the left-going chain construction)."""
    neg_h = None
    if field.antiderivative_fn is not None:
        if field.homogeneous:
            neg_h = lambda lam: -field.antiderivative_fn(lam)  # noqa: E731
        else:
            neg_h = lambda x, lam: -field.antiderivative_fn(x, lam)  # noqa: E731
    if field.homogeneous:
        fn = lambda ell: -np.asarray(field.fn(ell), dtype=float)  # noqa: E731
    else:
        fn = lambda x, ell: -np.asarray(field.fn(x, ell), dtype=float)  # noqa: E731
    return DriftField(
        fn=fn,
        bound=field.bound,
        lipschitz_ell=field.lipschitz_ell,
        homogeneous=field.homogeneous,
        support_radius=field.support_radius,
        ell_support=field.ell_support,
        constant_ell_from=field.constant_ell_from,
        nonnegative=field.bound == 0.0,
        antiderivative_fn=neg_h,
        label=f"negated[{field.label}]",
    )


def _adaptive_simpson(f, a: float, b: float, tol: float, depth: int = 48) -> float:
    fa, fm, fb = f(a), f(0.5 * (a + b)), f(b)
    whole = (b - a) * (fa + 4.0 * fm + fb) / 6.0

    def recurse(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = (m - a) * (fa + 4.0 * flm + fm) / 6.0
        right = (b - m) * (fm + 4.0 * frm + fb) / 6.0
        if depth <= 0 or abs(left + right - whole) <= 15.0 * tol:
            return left + right + (left + right - whole) / 15.0
        return recurse(a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + recurse(
            m, b, fm, frm, fb, right, tol / 2.0, depth - 1
        )

    if a == b:
        return 0.0
    return recurse(a, b, fa, fm, fb, whole, tol, depth)


def antiderivative(field: DriftField, x: float, lam: float, tol: float = 1e-10) -> float:
    """h(x, lam) = integral of phi(x, .) over [0, lam].

    Uses the field's closed form when declared, otherwise adaptive Simpson
    with absolute tolerance ``tol``.
    """
    if lam < 0:
        raise ValueError(f"local-time argument must be nonnegative, got {lam}")
    if field.antiderivative_fn is not None:
        if field.homogeneous:
            return float(field.antiderivative_fn(lam))
        return float(field.antiderivative_fn(x, lam))
    if lam == 0.0:
        return 0.0
    g = (lambda u: field.evaluate(x, u))
    return _adaptive_simpson(g, 0.0, lam, tol)


@dataclass(frozen=True)
class CookieEnvironment:
    """Scaled per-site, per-visit excitations derived from a drift field."""

    n: int
    field: DriftField

    def epsilon(self, visit: int, site: int = 0) -> float:
        if visit < 1:
            raise ValueError(f"visit index must be >= 1, got {visit}")
        two_n = 2.0 * self.n
        return self.field.evaluate(site / two_n, visit / two_n) / two_n

    def epsilon_many(self, visits, sites=0) -> np.ndarray:
        two_n = 2.0 * self.n
        v = np.asarray(visits, dtype=float) / two_n
        if self.field.homogeneous:
            return self.field.evaluate_many(0.0, v) / two_n
        x = np.asarray(sites, dtype=float) / two_n
        return self.field.evaluate_many(x, v) / two_n

    def up_probability_many(self, visits, sites=0) -> np.ndarray:
        return 0.5 * (1.0 + self.epsilon_many(visits, sites))

    def negated(self) -> "CookieEnvironment":
        return CookieEnvironment(self.n, negate_field(self.field))

    def constant_trial_index(self) -> Optional[int]:
        """First visit index i from which eps(i, x) is constant in i, if known."""
        c = self.field.constant_ell_from
        if c is None:
            return None
        # i / (2n) > c  <=>  i >= floor(2n c) + 1
        return int(math.floor(2 * self.n * c)) + 1


def make_scaled_environment(field: DriftField, n: int) -> CookieEnvironment:
    """Environment at scale n with eps(i, x) = phi(x/(2n), i/(2n)) / (2n)."""
    if n < 1:
        raise ValueError(f"scale must be a positive integer, got {n}")
    if field.bound >= 2 * n:
        raise ScaleTooSmallError(field.bound, n, int(math.floor(field.bound / 2.0)) + 1)
    return CookieEnvironment(n=n, field=field)


def step_probability(env: CookieEnvironment, site: int, visit: int) -> float:
    """Probability of a +1 step on the visit-th visit to site."""
    if visit < 1:
        raise ValueError(f"visit index must be >= 1, got {visit}")
    return 0.5 * (1.0 + env.epsilon(visit, site))


@dataclass(frozen=True)
class RecurrenceReport:
    classification: str  # recurrent | transient | undetermined
    c1_plus: float
    c1_minus: float
    total_drift: Optional[float]
    method: str  # analytic-shortcut | quadrature-heuristic


_EXPONENT_BAND = (-1.05, -0.95)


def _total_drift(field: DriftField, tol: float = 1e-9) -> Optional[float]:
    """integral_0^infty phi(ell) dell for homogeneous fields; None if divergent-ambiguous.

    Returns math.inf / -math.inf when the running integral of a
    constant-tailed field clearly diverges.
    """
    if field.ell_support is not None:
        return antiderivative(field, 0.0, field.ell_support)
    if field.constant_ell_from is not None:
        edge = field.constant_ell_from
        tail_value = field.evaluate(0.0, edge + 1.0)
        head = antiderivative(field, 0.0, edge) if edge > 0 else 0.0
        if abs(tail_value) <= tol:
            return head
        return math.inf if tail_value > 0 else -math.inf
    # No structural tail information: probe an expanding horizon.
    prev = antiderivative(field, 0.0, 1e3)
    for z in (1e4, 1e5, 1e6):
        cur = antiderivative(field, 0.0, z)
        if abs(cur - prev) <= tol * max(1.0, abs(cur)):
            return cur
        prev = cur
    return None


def _c1_quadrature(field: DriftField, x_cap: float = 1e6):
    """Estimate C_1^+/- = int_0^inf exp(-/+ int_0^x h(z)/z dz) dx on a geometric grid.

    Divergence is decided from the numeric tail exponent of the integrand,
    which approaches -/+ total drift for large x; exponents inside the safety
    band around -1 yield 'undetermined'.
    """
    grid = np.geomspace(1e-3, x_cap, 400)
    grid = np.concatenate([[0.0], grid])

    def ratio(z):
        if z <= 0.0:
            return field.evaluate(0.0, 0.0)  # removable singularity: h(z)/z -> phi(0)
        return antiderivative(field, 0.0, z) / z

    s = np.zeros(grid.size)
    for k in range(1, grid.size):
        s[k] = s[k - 1] + _adaptive_simpson(ratio, grid[k - 1], grid[k], 1e-10)

    results = {}
    for sign, name in ((-1.0, "plus"), (1.0, "minus")):
        log_i = sign * s  # log integrand of C_1^+ (sign -1) or C_1^- (+1)
        # Tail exponent: slope of log I vs log x over the last two decades.
        tail = grid >= x_cap / 100.0
        slope = np.polyfit(np.log(grid[tail]), log_i[tail], 1)[0]
        if slope < _EXPONENT_BAND[0]:
            # integrand decays faster than 1/x: finite integral
            integrand = np.exp(log_i)
            value = float(np.trapezoid(integrand, grid))
            # closed-form tail extension assuming x^slope decay
            value += float(integrand[-1] * grid[-1] / (-slope - 1.0))
            results[name] = value
        elif slope > _EXPONENT_BAND[1]:
            results[name] = math.inf
        else:
            results[name] = math.nan  # inside the safety band
    return results["plus"], results["minus"]


def classify_recurrence(field: DriftField, horizon: float = 1e3) -> RecurrenceReport:
    """Classify the walk/diffusion pair driven by ``field`` as recurrent or not.

    Scope follows the stated criteria: homogeneous fields that are nonnegative
    or compactly supported use the total-drift shortcut (recurrent iff the
    integral of phi lies in [-1, 1]); other homogeneous fields fall back to a
    quadrature heuristic on the C_1 integrals; nonnegative non-homogeneous
    fields are screened by the running-mean criterion up to ``horizon``.
    Anything else is refused rather than guessed.
    """
    if field.homogeneous:
        compact = field.ell_support is not None
        if field.nonnegative or compact:
            delta = _total_drift(field)
            if delta is None:
                return RecurrenceReport("undetermined", math.nan, math.nan, None, "analytic-shortcut")
            if -1.0 <= delta <= 1.0:
                return RecurrenceReport("recurrent", math.inf, math.inf, delta, "analytic-shortcut")
            # Only the side matching the drift sign has a finite integral.
            cp, cm = _c1_quadrature(field)
            c_plus = cp if delta > 1.0 else math.inf
            c_minus = cm if delta < -1.0 else math.inf
            return RecurrenceReport("transient", c_plus, c_minus, delta, "analytic-shortcut")
        c_plus, c_minus = _c1_quadrature(field)
        delta = _total_drift(field)
        if math.isnan(c_plus) or math.isnan(c_minus):
            return RecurrenceReport("undetermined", c_plus, c_minus, delta, "quadrature-heuristic")
        if math.isinf(c_plus) and math.isinf(c_minus):
            return RecurrenceReport("recurrent", c_plus, c_minus, delta, "quadrature-heuristic")
        return RecurrenceReport("transient", c_plus, c_minus, delta, "quadrature-heuristic")

    if not field.nonnegative:
        raise UnsupportedCriterionError(
            "no recurrence criterion is available for signed non-homogeneous fields"
        )
    # Running mean of delta^x = int phi(x, .) over x in [0, horizon].
    if field.ell_support is None:
        raise UnsupportedCriterionError(
            "non-homogeneous criterion needs a declared local-time support"
        )
    xs = np.linspace(0.0, horizon, 512)[1:]
    deltas = np.array([antiderivative(field, float(x), field.ell_support) for x in xs])
    running = np.cumsum(deltas) * (xs[1] - xs[0]) / xs
    tail_min = float(np.min(running[xs > horizon / 2.0]))
    if tail_min < 1.0 - 1e-6:
        return RecurrenceReport("recurrent", math.inf, math.inf, None, "quadrature-heuristic")
    return RecurrenceReport("undetermined", math.nan, math.nan, None, "quadrature-heuristic")
