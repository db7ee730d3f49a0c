import numpy as np
import pytest

from cookielab.env import constant_field, indicator_field, make_scaled_environment
from cookielab.operators import (
    KernelContext,
    LatticeFunction,
    apply_Q,
    apply_Q0_power,
    apply_Q0_power_iterated,
    apply_R_tilde,
    coefficient_a,
    coefficient_a_series,
    coefficient_b,
    drift_expansion_check,
    iterate_Q,
    r_tilde_both_forms,
)


# ---------------------------------------------------------------------------
# independent oracles
# ---------------------------------------------------------------------------

def brute_Q(eps, f, r, lags=320):
    """Direct kernel sum with per-lag products, no shared prefix machinery."""
    total = 0.0
    for l in range(1, lags + 1):
        w = 2.0 ** (-l)
        for i in range(r + 1, r + l):
            w *= 1.0 + eps_at(eps, i)
        w *= 1.0 - eps_at(eps, r + l)
        total += w * f(r + l)
    return total


def eps_at(eps, i):
    return eps[i - 1] if i - 1 < len(eps) else 0.0


def brute_R_tilde(eps, f, r, lags=320):
    total = 0.0
    for l in range(1, lags + 1):
        tilde = -eps_at(eps, r + l) + sum(eps_at(eps, r + i) for i in range(1, l))
        total += f(r + l) * 2.0 ** (-l) * tilde
    return total


def series_sum_j_pow(power, start, terms=200):
    return sum(j**power * 2.0 ** (-j) for j in range(start, start + terms))


# ---------------------------------------------------------------------------
# apply_Q
# ---------------------------------------------------------------------------

def test_Q_preserves_constants():
    one = LatticeFunction.constant(1.0)
    rng = np.random.default_rng(3)
    for _ in range(100):
        eps = rng.uniform(-0.5, 0.5, size=rng.integers(1, 40))
        ctx = KernelContext.from_array(eps)
        r = int(rng.integers(0, 10))
        assert apply_Q(ctx, one, r) == pytest.approx(1.0, abs=1e-12)


def test_Q_geometric_mean_at_zero():
    ctx = KernelContext.from_array([])
    u = LatticeFunction.identity_u()
    assert apply_Q(ctx, u, 0) == pytest.approx(2.0, abs=1e-12)


def test_Q_geometric_second_moment_at_zero():
    # sum l^2 2^-l = 6
    ctx = KernelContext.from_array([])
    usq = LatticeFunction.u_squared()
    assert apply_Q(ctx, usq, 0) == pytest.approx(6.0, abs=1e-12)


def test_Q_matches_brute_force_on_random_contexts():
    rng = np.random.default_rng(11)
    for _ in range(25):
        eps = rng.uniform(-0.5, 0.5, size=rng.integers(1, 30))
        ctx = KernelContext.from_array(eps)
        u = LatticeFunction.identity_u(window=512)
        r = int(rng.integers(0, 8))
        want = brute_Q(list(eps), lambda s: float(s), r)
        assert apply_Q(ctx, u, r) == pytest.approx(want, abs=1e-10)


def test_Q_linearity():
    rng = np.random.default_rng(5)
    eps = rng.uniform(-0.4, 0.4, 20)
    ctx = KernelContext.from_array(eps)
    f = LatticeFunction.identity_u(256)
    g = LatticeFunction.from_values(rng.uniform(-1, 1, 257))
    comb = f.combine(1.7, g, -0.6)
    for r in (0, 3, 11):
        want = 1.7 * apply_Q(ctx, f, r) - 0.6 * apply_Q(ctx, g, r)
        assert apply_Q(ctx, comb, r) == pytest.approx(want, abs=1e-10)


def test_Q_monotonicity():
    rng = np.random.default_rng(9)
    eps = rng.uniform(-0.5, 0.5, 25)
    ctx = KernelContext.from_array(eps)
    base = rng.uniform(0, 1, 257)
    f = LatticeFunction.from_values(base, tail_slope=0.0)
    g = LatticeFunction.from_values(base + rng.uniform(0, 1, 257), tail_slope=0.0)
    for r in (0, 2, 7):
        assert apply_Q(ctx, f, r) <= apply_Q(ctx, g, r) + 1e-10


# ---------------------------------------------------------------------------
# powers of the unexcited kernel
# ---------------------------------------------------------------------------

def test_Q0_power_identity_power():
    f = LatticeFunction.from_values(np.sin(np.arange(64.0)))
    assert apply_Q0_power(f, 0, 5) == f.evaluate(5)


def test_Q0_power_mean_formula():
    u = LatticeFunction.identity_u()
    assert apply_Q0_power(u, 7, 0) == pytest.approx(14.0)
    for m in (1, 13, 200):
        assert apply_Q0_power(u, m, 0) == pytest.approx(2.0 * m)


def test_Q0_power_variance_identity_example():
    usq = LatticeFunction.u_squared()
    # power i-1 = 3 evaluated at r = 0: 4*9 + 2*3 = 42
    assert apply_Q0_power(usq, 3, 0) == pytest.approx(42.0)


def test_Q0_closed_forms_match_kernel_iteration():
    u = LatticeFunction.identity_u(2048)
    usq = LatticeFunction.u_squared(2048)
    for m, r in ((1, 0), (4, 3), (12, 17), (25, 50)):
        assert apply_Q0_power_iterated(u, m, r) == pytest.approx(
            apply_Q0_power(u, m, r), abs=1e-10
        )
        assert apply_Q0_power_iterated(usq, m, r) == pytest.approx(
            apply_Q0_power(usq, m, r), abs=2e-9
        )


# ---------------------------------------------------------------------------
# linearized remainder operator
# ---------------------------------------------------------------------------

def test_R_tilde_kills_constants():
    rng = np.random.default_rng(2)
    eps = rng.uniform(-0.5, 0.5, 30)
    ctx = KernelContext.from_array(eps)
    one = LatticeFunction.constant(1.0)
    for r in (0, 1, 6):
        assert apply_R_tilde(ctx, one, r) == pytest.approx(0.0, abs=1e-11)


def test_R_tilde_constant_excitation_on_u():
    # constant excitation c: value is c * sum_l 2^(1-l) = 2c
    c = 0.21
    ctx = KernelContext.from_array(np.full(400, c))
    u = LatticeFunction.identity_u(1024)
    assert apply_R_tilde(ctx, u, 0) == pytest.approx(2.0 * c, abs=1e-9)


def test_R_tilde_two_forms_agree_on_random_inputs():
    rng = np.random.default_rng(17)
    for _ in range(20):
        eps = rng.uniform(-0.5, 0.5, size=rng.integers(5, 60))
        ctx = KernelContext.from_array(eps)
        vals = rng.uniform(-2, 2, 400) + 0.3 * np.arange(400)
        h = LatticeFunction.from_values(vals, tail_slope=0.3)
        r = int(rng.integers(0, 6))
        d, g = r_tilde_both_forms(ctx, h, r)
        assert d == pytest.approx(g, abs=1e-10)


def test_R_tilde_definition_matches_brute_force():
    rng = np.random.default_rng(23)
    eps = rng.uniform(-0.5, 0.5, 40)
    ctx = KernelContext.from_array(eps)
    u = LatticeFunction.identity_u(1024)
    for r in (0, 2, 5):
        want = brute_R_tilde(list(eps), float, r)
        assert apply_R_tilde(ctx, u, r) == pytest.approx(want, abs=1e-9)


# ---------------------------------------------------------------------------
# coefficients
# ---------------------------------------------------------------------------

def test_coefficient_a_closed_form_values():
    assert coefficient_a(1) == pytest.approx(1.0)
    assert coefficient_a(2) == pytest.approx(0.5)
    assert coefficient_a(3) == pytest.approx(0.25)


def test_coefficient_a_series_vs_closed_form():
    for l in range(1, 31):
        assert coefficient_a_series(l) == pytest.approx(coefficient_a(l), abs=1e-12)


def test_coefficient_a_series_matches_direct_sum():
    for l in (1, 2, 7):
        direct = -l * 2.0 ** (-l) + series_sum_j_pow(1, l + 1)
        assert coefficient_a_series(l) == pytest.approx(direct, abs=1e-12)


def test_coefficient_b_first_value():
    # direct series: -1/2 + sum_{i>=2} i^2 2^-i = -0.5 + 5.5 = 5
    direct = -1 * 2.0 ** (-1) + series_sum_j_pow(2, 2)
    assert direct == pytest.approx(5.0, abs=1e-12)
    assert coefficient_b(1) == pytest.approx(5.0, abs=1e-12)


def test_coefficient_b_matches_direct_sums():
    for l in (2, 3, 10):
        direct = -l * l * 2.0 ** (-l) + series_sum_j_pow(2, l + 1)
        assert coefficient_b(l) == pytest.approx(direct, abs=1e-12)


# ---------------------------------------------------------------------------
# drift expansion
# ---------------------------------------------------------------------------

def test_drift_expansion_zero_field_exact():
    res = drift_expansion_check(constant_field(0.0), 50, 50)
    assert res.lhs == pytest.approx(0.0, abs=1e-9)
    assert res.rhs == 0.0
    assert res.gap == pytest.approx(0.0, abs=1e-9)


def test_drift_expansion_constant_field_closed_form():
    # constant excitation e = 1/(2n): Q^m u(0) = 2m/(1-e) exactly
    n, m = 40, 40
    res = drift_expansion_check(constant_field(1.0), n, m)
    e = 1.0 / (2 * n)
    want_lhs = 2 * m * e / (1 - e)
    assert res.lhs == pytest.approx(want_lhs, abs=1e-8)
    assert res.rhs == pytest.approx(1.0)


def test_drift_expansion_gap_small_at_n100():
    res = drift_expansion_check(constant_field(1.0), 100, 100)
    assert res.gap <= 0.5


def test_drift_expansion_indicator_field_near_rate_half():
    gaps = []
    for n in (25, 100):
        res = drift_expansion_check(indicator_field(1.0, 1.0), n, n)
        gaps.append(res.gap)
    slope = (np.log(gaps[1]) - np.log(gaps[0])) / (np.log(100) - np.log(25))
    assert -1.2 < slope < -0.1  # decays, roughly like a power of n


def test_iterate_Q_matches_single_application():
    rng = np.random.default_rng(31)
    eps = rng.uniform(-0.3, 0.3, 50)
    ctx = KernelContext.from_array(eps)
    u = LatticeFunction.identity_u(600)
    once = iterate_Q(ctx, u, 1, 400)
    for r in (0, 5, 20):
        assert once.evaluate(r) == pytest.approx(apply_Q(ctx, u, r), abs=1e-10)


def test_kernel_context_rejects_large_excitations():
    with pytest.raises(ValueError):
        KernelContext.from_array([0.6])


def test_environment_context_wiring():
    env = make_scaled_environment(indicator_field(1.0, 1.0), 10)
    ctx = KernelContext.from_environment(env)
    eps = ctx.eps_upto(40)
    assert eps[0] == pytest.approx(0.05)   # visit 1: phi(0.05)/20
    assert eps[19] == pytest.approx(0.05)  # visit 20: ell = 1.0 inside support
    assert eps[20] == 0.0                  # visit 21: ell = 1.05 outside
