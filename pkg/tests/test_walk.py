import itertools
import math

import numpy as np
import pytest

from cookielab.env import constant_field, indicator_field, make_scaled_environment
from cookielab.errors import CensoredRunError
from cookielab.walk import (
    DowncrossStop,
    FixedHorizon,
    UpcrossStop,
    downcrossing_counts,
    local_time_profile,
    occupation_identity_check,
    run_walk_batch,
    sample_at_geometric_time,
    scaled_process_sample,
    simulate_walk,
    two_level_coalescence_walk,
)


# ---------------------------------------------------------------------------
# brute-force path oracle: enumerate all +-1 paths, locate the stopping jump
# and the downcrossing counts straight from the definitions
# ---------------------------------------------------------------------------

def oracle_stop_and_counts(path, a, v):
    """(tau, S) from the raw definitions; tau is the index of the jump that
    performs the (v+1)-th a -> a-1 move, None if the path never gets there."""
    crossings = 0
    tau = None
    for j in range(len(path) - 1):
        if path[j] == a and path[j + 1] == a - 1:
            crossings += 1
            if crossings == v + 1:
                tau = j
                break
    if tau is None:
        return None, None
    s = {}
    for j in range(tau):  # jump indices <= tau - 1
        if path[j + 1] == path[j] - 1:
            s[path[j]] = s.get(path[j], 0) + 1
    return tau, s


def all_paths(length):
    for moves in itertools.product((1, -1), repeat=length):
        yield [0, *itertools.accumulate(moves)]


def test_oracle_occupation_identity_on_all_short_paths():
    # The identity tau = a + 2 sum S(k) must hold for every stopped path of
    # length <= 6, for several (a, v) pairs, straight from the definitions.
    for a, v in ((0, 0), (0, 1), (-1, 0), (1, 0), (-2, 0)):
        seen = 0
        for path in all_paths(6):
            tau, s = oracle_stop_and_counts(path, a, v)
            if tau is None:
                continue
            seen += 1
            assert tau == a + 2 * sum(s.values())
            assert s.get(a, 0) == v
        assert seen > 0


def test_oracle_immediate_downcross():
    # a = 0, v = 0, first move -1: the stopping jump is jump 0 and S is empty
    tau, s = oracle_stop_and_counts([0, -1], 0, 0)
    assert tau == 0
    assert s == {}


def test_enumerated_path_0_1_0_1_0_continuations():
    # continuations of the prefix 0,1,0,1,0 that stop for a=0, v=1 satisfy the
    # identity and have S(1) = 2 (both 1 -> 0 jumps precede the stopping jump)
    prefix = [0, 1, 0, 1, 0]
    hits = 0
    for ext in itertools.product((1, -1), repeat=4):
        path = list(prefix)
        for move in ext:
            path.append(path[-1] + move)
        tau, s = oracle_stop_and_counts(path, 0, 1)
        if tau is None:
            continue
        hits += 1
        assert s[1] == 2
        assert tau == 2 * sum(s.values())
    assert hits > 0


# ---------------------------------------------------------------------------
# single-run engine against the oracle
# ---------------------------------------------------------------------------

def test_simulated_runs_match_oracle_counts():
    env = make_scaled_environment(constant_field(0.0), 5)
    for seed in range(40):
        run = simulate_walk(env, DowncrossStop(0, 2), cap=2_000_000, seed=seed)
        assert not run.censored
        tau_o, s_o = oracle_stop_and_counts(list(run.positions), 0, 2)
        assert tau_o == run.tau
        s = downcrossing_counts(run, 0, 2)
        assert {k: c for k, c in s.items() if c} == s_o
        assert s[0] == 2


def test_occupation_identity_all_runs():
    env = make_scaled_environment(constant_field(0.0), 3)
    for seed in range(60):
        run = simulate_walk(env, DowncrossStop(-2, 1), cap=10**6, seed=seed)
        chk = occupation_identity_check(run, -2 / 6.0, 1 / 3.0, 3)
        assert chk.passed, (chk.tau, chk.reconstructed)


def test_nearest_neighbor_and_visit_counts():
    env = make_scaled_environment(indicator_field(0.8, 1.0), 4)
    run = simulate_walk(env, FixedHorizon(500), seed=11)
    steps = np.diff(run.positions)
    assert set(np.unique(steps)).issubset({-1, 1})
    sites, counts = np.unique(run.positions, return_counts=True)
    for k, c in zip(sites, counts):
        assert run.visit_counts[int(k)] == int(c)


def test_censoring_reported_not_dropped():
    env = make_scaled_environment(constant_field(0.0), 2)
    run = simulate_walk(env, DowncrossStop(0, 10**6), cap=50, seed=1)
    assert run.censored
    with pytest.raises(CensoredRunError):
        downcrossing_counts(run, 0, 10**6)


def test_fair_walk_mean_near_zero():
    env = make_scaled_environment(constant_field(0.0), 10)
    res = run_walk_batch(env, 10_000, FixedHorizon(400), np.random.default_rng(5),
                         track_down_counts=False)
    t = 400
    z = res.final_positions.mean() / (math.sqrt(t) / math.sqrt(10_000))
    assert abs(z) < 3.0


def test_fair_walk_up_fraction():
    env = make_scaled_environment(constant_field(0.0), 10)
    run = simulate_walk(env, FixedHorizon(100_000), seed=3)
    ups = np.mean(np.diff(run.positions) == 1)
    sigma = 0.5 / math.sqrt(100_000)
    assert abs(ups - 0.5) < 3 * sigma


def test_first_visit_bias_only():
    # excitation on the first visit only: the first step is up with
    # probability (1 + eps)/2; later visits to the same site are fair
    n = 2
    env = make_scaled_environment(indicator_field(1.0, 1.0 / (2 * n)), n)
    i = np.arange(1, 10)
    eps = env.epsilon_many(i)
    assert eps[0] == pytest.approx(1.0 / (2 * n))
    assert np.all(eps[1:] == 0.0)
    ups = 0
    reps = 4000
    for seed in range(reps):
        run = simulate_walk(env, FixedHorizon(1), seed=seed)
        ups += run.positions[1] == 1
    p = 0.5 * (1 + 1.0 / (2 * n))
    assert abs(ups / reps - p) < 3 * math.sqrt(p * (1 - p) / reps)


def test_positive_drift_sign():
    env = make_scaled_environment(constant_field(1.0), 50)
    res = run_walk_batch(env, 2000, FixedHorizon(20_000), np.random.default_rng(8),
                         track_down_counts=False)
    assert res.final_positions.mean() > 0
    assert not res.censored.any()


def test_profile_anchor_and_edges():
    n = 10
    env = make_scaled_environment(indicator_field(0.5, 1.0), n)
    a, v = -0.4, 0.7
    run = simulate_walk(env, DowncrossStop(int(math.floor(2 * n * a)),
                                           int(math.floor(n * v))),
                        cap=2_000_000, seed=21)
    assert not run.censored
    prof = local_time_profile(run, a, v, n)
    assert prof.value(a) == pytest.approx(math.floor(n * v) / n)
    # zero outside the edges, positive strictly inside the right part
    assert prof.w_plus is not None and prof.w_minus is not None
    for x in np.linspace(prof.w_plus, prof.w_plus + 1.0, 7):
        assert prof.value(x) == 0.0
    ks = np.arange(1, int(2 * n * prof.w_plus))
    for k in ks:
        assert prof.count_at_site(int(k)) > 0
    for x in np.linspace(prof.w_minus - 1.0, prof.w_minus, 5):
        assert prof.value(x) == 0.0


def test_profile_counts_are_multiples_of_inverse_n():
    n = 7
    env = make_scaled_environment(indicator_field(0.5, 1.0), n)
    run = simulate_walk(env, DowncrossStop(0, 3), cap=4_000_000, seed=2)
    prof = local_time_profile(run, 0.0, 3 / n, n)
    vals = prof.values()
    assert np.allclose(vals * n, np.round(vals * n))


def test_scaled_process_at_time_zero():
    env = make_scaled_environment(constant_field(0.0), 10)
    assert scaled_process_sample(env, 0.0, seed=4) == 0.0


def test_scaled_process_donsker_normal():
    env = make_scaled_environment(constant_field(0.0), 25)
    rng = np.random.default_rng(12)
    res = run_walk_batch(env, 4000, FixedHorizon(4 * 25**2), rng, track_down_counts=False)
    x = res.final_positions / 50.0
    from scipy.special import ndtr

    xs = np.sort(x)
    emp = np.arange(1, xs.size + 1) / xs.size
    dist = np.max(np.maximum(np.abs(emp - ndtr(xs)), np.abs(emp - 1 / xs.size - ndtr(xs))))
    assert dist < 0.05


def test_geometric_time_sample_degenerate():
    env = make_scaled_environment(constant_field(0.0), 5)
    # enormous rate: success parameter ~ 1, theta concentrates at 0
    vals = [sample_at_geometric_time(env, 1e9, seed=s) for s in range(20)]
    assert np.allclose(vals, 0.0)


def test_geometric_time_positive_drift_sign():
    env = make_scaled_environment(constant_field(1.0), 20)
    rng = np.random.default_rng(3)
    p = -math.expm1(-1.0 / (4 * 20**2))
    horizons = rng.geometric(p, size=3000) - 1
    res = run_walk_batch(env, 3000, FixedHorizon(1), rng, horizons=horizons,
                         track_down_counts=False)
    frac_pos = np.mean(res.final_positions > 0)
    frac_neg = np.mean(res.final_positions < 0)
    assert frac_pos > frac_neg


# ---------------------------------------------------------------------------
# batch engine vs single-run engine
# ---------------------------------------------------------------------------

def test_batch_of_one_reproduces_single_run_stream():
    env = make_scaled_environment(indicator_field(0.5, 1.0), 6)
    checked = 0
    for seed in (0, 7, 13, 21):
        single = simulate_walk(env, DowncrossStop(0, 3), cap=200_000,
                               seed=np.random.default_rng(seed))
        batch = run_walk_batch(env, 1, DowncrossStop(0, 3), np.random.default_rng(seed),
                               cap=200_000)
        assert bool(batch.censored[0]) == single.censored
        if single.censored:
            continue
        checked += 1
        assert batch.tau[0] == single.tau
        s = downcrossing_counts(single, 0, 3)
        for k, c in s.items():
            assert batch.counts_at_site(k)[0] == c
    assert checked >= 2


def test_batch_occupation_identity_vectorized():
    env = make_scaled_environment(indicator_field(0.5, 1.0), 8)
    a_site, lvl = -4, 6
    res = run_walk_batch(env, 300, DowncrossStop(a_site, lvl), np.random.default_rng(17),
                         cap=50_000)
    done = ~res.censored
    assert done.mean() > 0.5
    assert np.all(res.tau[done] == a_site + 2 * res.count_sum()[done])


def test_batch_anchor_counts():
    env = make_scaled_environment(constant_field(0.0), 8)
    res = run_walk_batch(env, 200, DowncrossStop(-3, 5), np.random.default_rng(23),
                         cap=60_000)
    done = ~res.censored
    assert done.mean() > 0.6
    assert np.all(res.counts_at_site(-3)[done] == 5)


def test_batch_horizons_zero_and_varied():
    env = make_scaled_environment(constant_field(0.0), 5)
    horizons = np.array([0, 1, 2, 50, 0, 7])
    res = run_walk_batch(env, 6, FixedHorizon(1), np.random.default_rng(1),
                         horizons=horizons, track_down_counts=False)
    assert res.final_positions[0] == 0 and res.final_positions[4] == 0
    assert np.all(res.steps == horizons)
    assert np.all(np.abs(res.final_positions) <= horizons)
    assert np.all((res.final_positions % 2) == (horizons % 2))


def test_monotone_coupling_in_the_environment():
    # common random numbers; ordered fields: at equal (site, visit) states the
    # up indicator of the bigger field dominates
    lo = make_scaled_environment(constant_field(0.2), 10)
    hi = make_scaled_environment(constant_field(1.8), 10)
    for seed in range(10):
        r_lo = simulate_walk(lo, FixedHorizon(300), seed=seed)
        r_hi = simulate_walk(hi, FixedHorizon(300), seed=seed)
        c_lo: dict = {}
        c_hi: dict = {}
        for j in range(300):
            s_lo, s_hi = int(r_lo.positions[j]), int(r_hi.positions[j])
            c_lo[s_lo] = c_lo.get(s_lo, 0) + 1
            c_hi[s_hi] = c_hi.get(s_hi, 0) + 1
            if s_lo == s_hi and c_lo[s_lo] == c_hi[s_hi]:
                up_lo = r_lo.positions[j + 1] - s_lo == 1
                up_hi = r_hi.positions[j + 1] - s_hi == 1
                assert up_hi or not up_lo  # up_lo implies up_hi


def test_two_level_walk_against_branching_closed_form():
    # nested stopping times on one walk; the no-excitation difference profile
    # is a critical geometric branching process, extinct-by-k in closed form
    from cookielab.chains import GwParams, gw_extinction_prob

    n = 4
    env = make_scaled_environment(constant_field(0.0), n)
    rng = np.random.default_rng(99)
    coal, cens = two_level_coalescence_walk(env, 0.5, 1.0, 0.5, 2000, rng,
                                            cap=120_000)
    frac_cens = cens.mean()
    assert frac_cens < 0.05
    got = coal[~cens].mean()
    k_probe = int(2 * n * 0.5)
    d0 = int(n * 1.0) - int(n * 0.5)
    want = gw_extinction_prob(GwParams(0.5), k_probe, d0)
    sigma = math.sqrt(want * (1 - want) / (~cens).sum())
    assert abs(got - want) < 4 * sigma + frac_cens
