"""Exact simulation of the excited random walk and its local-time profiles.

Two engines share one law: a single-run engine that keeps the full trajectory
(used for definitional checks and small studies) and a replicate-vectorized
batch engine for Monte Carlo experiments.  Both step the walk by +1 with
probability (1 + eps(i, x)) / 2 on the i-th visit to site x.

Stopping-time convention.  For the down rule at site a with level v, the
stopping index tau is the index of the jump that performs the (v+1)-th
a -> a-1 move, and the downcrossing counts S(k) tally k -> k-1 jumps with
index <= tau - 1 (the final jump excluded).  Under this convention the
occupation identity  tau = a + 2 * sum_k S(k)  holds exactly on every
uncensored run; the brute-force path enumeration in the test suite pins it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .env import CookieEnvironment
from .errors import CensoredRunError

__all__ = [
    "FixedHorizon",
    "DowncrossStop",
    "UpcrossStop",
    "WalkRun",
    "LocalTimeProfile",
    "StoppingTimeSample",
    "simulate_walk",
    "downcrossing_counts",
    "local_time_profile",
    "occupation_identity_check",
    "scaled_process_sample",
    "sample_at_geometric_time",
    "run_walk_batch",
    "BatchWalkResult",
    "two_level_coalescence_walk",
]

DEFAULT_CAP = 10**8


@dataclass(frozen=True)
class FixedHorizon:
    steps: int


@dataclass(frozen=True)
class DowncrossStop:
    """Stop at the (level+1)-th site -> site-1 jump."""

    site: int
    level: int


@dataclass(frozen=True)
class UpcrossStop:
    """Stop at the (level+1)-th site -> site+1 jump."""

    site: int
    level: int


StopRule = Union[FixedHorizon, DowncrossStop, UpcrossStop]


@dataclass
class WalkRun:
    positions: np.ndarray  # X(0..T)
    visit_counts: dict
    rule: StopRule
    tau: Optional[int]  # jump index meeting the rule; None if not applicable
    censored: bool
    cap: int
    env_n: int
    seed: Optional[int] = None

    @property
    def steps(self) -> int:
        return self.positions.size - 1


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def simulate_walk(env: CookieEnvironment, stop: StopRule, cap: int = DEFAULT_CAP,
                  seed=0) -> WalkRun:
    """Run one walk until the stopping rule or the step cap, whichever first.

    Censoring (cap reached under a crossing rule) is reported on the run,
    never silently dropped.
    """
    if cap <= 0:
        raise ValueError("cap must be positive")
    rng = _as_rng(seed)
    pos = 0
    counts: dict = {0: 1}
    positions = [0]
    crossings = 0
    tau: Optional[int] = None

    if isinstance(stop, FixedHorizon):
        if stop.steps < 0:
            raise ValueError("horizon must be nonnegative")
        horizon = min(stop.steps, cap)
    else:
        horizon = cap

    for j in range(horizon):
        i = counts[pos]
        p = 0.5 * (1.0 + env.epsilon(i, pos))
        up = rng.random() < p
        new = pos + 1 if up else pos - 1
        positions.append(new)
        counts[new] = counts.get(new, 0) + 1
        if isinstance(stop, DowncrossStop) and not up and pos == stop.site:
            crossings += 1
            if crossings == stop.level + 1:
                tau = j
                pos = new
                break
        if isinstance(stop, UpcrossStop) and up and pos == stop.site:
            crossings += 1
            if crossings == stop.level + 1:
                tau = j
                pos = new
                break
        pos = new

    censored = isinstance(stop, (DowncrossStop, UpcrossStop)) and tau is None
    if isinstance(stop, FixedHorizon) and stop.steps > cap:
        censored = True
    return WalkRun(
        positions=np.asarray(positions, dtype=np.int64),
        visit_counts=counts,
        rule=stop,
        tau=tau,
        censored=censored,
        cap=cap,
        env_n=env.n,
        seed=None if isinstance(seed, np.random.Generator) else seed,
    )


def downcrossing_counts(run: WalkRun, a: int, v: int) -> dict:
    """S(k): number of k -> k-1 jumps with index <= tau-1; S(a) = v."""
    if not isinstance(run.rule, DowncrossStop) or run.rule.site != a or run.rule.level != v:
        raise ValueError("run was not stopped by the matching downcross rule")
    if run.censored or run.tau is None:
        raise CensoredRunError(
            f"run censored at cap {run.cap}; rerun with a larger cap to obtain counts"
        )
    x = run.positions
    down = x[1 : run.tau + 1] - x[: run.tau] == -1  # jump indices 0..tau-1
    sites, cnt = np.unique(x[: run.tau][down], return_counts=True)
    s = {int(k): int(c) for k, c in zip(sites, cnt)}
    s.setdefault(a, 0)
    return s


@dataclass
class LocalTimeProfile:
    """Downcrossing profile on the x = k/(2n) grid, values in units of 1/n."""

    n: int
    anchor: float
    level: float
    k_lo: int
    counts: np.ndarray  # S(k) for k = k_lo .. k_lo + len - 1
    w_minus: Optional[float]
    w_plus: Optional[float]

    @property
    def anchor_site(self) -> int:
        return int(math.floor(2 * self.n * self.anchor))

    @property
    def anchor_count(self) -> int:
        return int(math.floor(self.n * self.level))

    def count_at_site(self, k: int) -> int:
        idx = k - self.k_lo
        if 0 <= idx < self.counts.size:
            return int(self.counts[idx])
        return 0

    def value(self, x: float) -> float:
        """Lambda(x) = S(floor(2 n x)) / n."""
        return self.count_at_site(int(math.floor(2 * self.n * x))) / self.n

    def grid_x(self) -> np.ndarray:
        return (self.k_lo + np.arange(self.counts.size)) / (2.0 * self.n)

    def values(self) -> np.ndarray:
        return self.counts / float(self.n)


def _edges_from_counts(counts: np.ndarray, k_lo: int, anchor_site: int, n: int):
    """Profile edges: first zero at or right of the anchor, last zero at or left of 0."""
    ks = k_lo + np.arange(counts.size)
    w_plus = None
    right = (ks >= anchor_site) & (counts == 0)
    if right.any():
        w_plus = float(ks[right][0]) / (2.0 * n)
    w_minus = None
    left = (ks <= 0) & (counts == 0)
    if left.any():
        w_minus = float(ks[left][-1]) / (2.0 * n)
    return w_minus, w_plus


def profile_from_count_map(s: dict, a: float, v: float, n: int) -> LocalTimeProfile:
    anchor_site = int(math.floor(2 * n * a))
    ks = list(s.keys())
    k_lo = min(min(ks), anchor_site, 0) - 1
    k_hi = max(max(ks), anchor_site, 0) + 1
    counts = np.zeros(k_hi - k_lo + 1, dtype=np.int64)
    for k, c in s.items():
        counts[k - k_lo] = c
    w_minus, w_plus = _edges_from_counts(counts, k_lo, anchor_site, n)
    return LocalTimeProfile(n=n, anchor=a, level=v, k_lo=k_lo, counts=counts,
                            w_minus=w_minus, w_plus=w_plus)


def local_time_profile(run: WalkRun, a: float, v: float, n: int) -> LocalTimeProfile:
    """Scaled profile of an uncensored run stopped by the matching down rule."""
    anchor_site = int(math.floor(2 * n * a))
    target = int(math.floor(n * v))
    s = downcrossing_counts(run, anchor_site, target)
    return profile_from_count_map(s, a, v, n)


@dataclass(frozen=True)
class StoppingTimeSample:
    raw: int
    scale_n: int
    censored: bool
    cap: int

    @property
    def scaled(self) -> float:
        return self.raw / (4.0 * self.scale_n**2)


@dataclass(frozen=True)
class OccupationIdentity:
    passed: bool
    tau: int
    reconstructed: int  # anchor site + 2 * sum of downcrossing counts


def occupation_identity_check(run: WalkRun, a: float, v: float, n: int) -> OccupationIdentity:
    """Exact integer check of tau = floor(2na) + 2 sum_k S(k)."""
    anchor_site = int(math.floor(2 * n * a))
    target = int(math.floor(n * v))
    s = downcrossing_counts(run, anchor_site, target)
    rhs = anchor_site + 2 * sum(s.values())
    return OccupationIdentity(passed=(run.tau == rhs), tau=int(run.tau), reconstructed=int(rhs))


def scaled_process_sample(env: CookieEnvironment, t: float, seed=0) -> float:
    """X(floor(4 n^2 t)) / (2n) from a fresh run."""
    if t < 0:
        raise ValueError("time must be nonnegative")
    steps = int(math.floor(4 * env.n**2 * t))
    if steps == 0:
        return 0.0
    run = simulate_walk(env, FixedHorizon(steps), cap=steps, seed=seed)
    return float(run.positions[-1]) / (2.0 * env.n)


def sample_at_geometric_time(env: CookieEnvironment, u: float, seed=0) -> float:
    """X(theta) / (2n) with theta geometric on {0,1,...}, parameter 1 - e^{-u/(4n^2)}."""
    if u <= 0:
        raise ValueError("rate must be positive")
    rng = _as_rng(seed)
    p = -math.expm1(-u / (4.0 * env.n**2))
    theta = int(rng.geometric(p)) - 1
    if theta == 0:
        return 0.0
    run = simulate_walk(env, FixedHorizon(theta), cap=theta, seed=rng)
    return float(run.positions[-1]) / (2.0 * env.n)


# ---------------------------------------------------------------------------
# batch engine
# ---------------------------------------------------------------------------


@dataclass
class BatchWalkResult:
    final_positions: np.ndarray  # X at retirement
    steps: np.ndarray            # number of steps each replicate made
    tau: np.ndarray              # jump index meeting the rule; -1 if n/a
    censored: np.ndarray         # bool
    down_counts: Optional[np.ndarray]  # (R, width) S(k) incl. rule adjustment
    k_lo: int                    # site of column 0 in down_counts

    def count_sum(self) -> np.ndarray:
        if self.down_counts is None:
            raise ValueError("down counts were not tracked")
        return self.down_counts.sum(axis=1)

    def counts_at_site(self, k: int) -> np.ndarray:
        if self.down_counts is None:
            raise ValueError("down counts were not tracked")
        idx = k - self.k_lo
        if not (0 <= idx < self.down_counts.shape[1]):
            return np.zeros(self.down_counts.shape[0], dtype=np.int64)
        return self.down_counts[:, idx].astype(np.int64)


def _grow(arrays, lo_pad, hi_pad):
    return [np.pad(a, ((0, 0), (lo_pad, hi_pad))) for a in arrays]


def run_walk_batch(env: CookieEnvironment, reps: int, rule: StopRule,
                   rng: np.random.Generator, cap: int = DEFAULT_CAP,
                   horizons: Optional[np.ndarray] = None,
                   track_down_counts: bool = True) -> BatchWalkResult:
    """Vectorized independent walks; equal in law to repeated simulate_walk.

    ``horizons`` (per-replicate step budgets) override a FixedHorizon rule;
    they are used for random-time sampling.  Replicates retire individually
    and arrays are compacted as the active set shrinks.
    """
    if reps <= 0:
        raise ValueError("need at least one replicate")
    if horizons is not None:
        horizons = np.asarray(horizons, dtype=np.int64)
        if horizons.shape != (reps,):
            raise ValueError("horizons must have one entry per replicate")
        rule = FixedHorizon(int(horizons.max(initial=0)))

    crossing = isinstance(rule, (DowncrossStop, UpcrossStop))
    if isinstance(rule, FixedHorizon):
        max_steps = min(rule.steps, cap)
    else:
        max_steps = cap

    half = 64
    width = 2 * half + 1
    pos = np.zeros(reps, dtype=np.int64)
    counts = np.zeros((reps, width), dtype=np.int32)
    counts[:, half] = 1  # arrival at the origin at time 0
    down = np.zeros((reps, width), dtype=np.int32) if track_down_counts else None
    k_lo = -half

    cross_count = np.zeros(reps, dtype=np.int64)
    ids = np.arange(reps)

    out_pos = np.zeros(reps, dtype=np.int64)
    out_steps = np.zeros(reps, dtype=np.int64)
    out_tau = np.full(reps, -1, dtype=np.int64)
    out_cens = np.zeros(reps, dtype=bool)
    final_down = np.zeros((reps, width), dtype=np.int32) if track_down_counts else None

    live_hor = None
    if horizons is not None:
        live_hor = horizons.copy()
        zero = live_hor == 0
        if zero.any():  # zero-step replicates retire at the origin immediately
            keep = ~zero
            ids, pos, counts, cross_count = ids[keep], pos[keep], counts[keep], cross_count[keep]
            live_hor = live_hor[keep]
            if track_down_counts:
                down = down[keep]

    j = 0
    homogeneous = env.field.homogeneous
    while ids.size and j < max_steps:
        rows = np.arange(ids.size)
        idx = (pos - k_lo).astype(np.intp)
        visits = counts[rows, idx]
        if homogeneous:
            eps = env.epsilon_many(visits)
        else:
            eps = env.epsilon_many(visits, pos)
        u = rng.random(ids.size)
        up = u < 0.5 * (1.0 + eps)
        if track_down_counts:
            dn = np.flatnonzero(~up)
            down[dn, idx[dn]] += 1

        done = np.zeros(ids.size, dtype=bool)
        if crossing:
            if isinstance(rule, DowncrossStop):
                hit = (~up) & (pos == rule.site)
            else:
                hit = up & (pos == rule.site)
            cross_count[hit] += 1
            done = hit & (cross_count == rule.level + 1)
            if track_down_counts and isinstance(rule, DowncrossStop) and done.any():
                # the stopping jump itself is excluded from S
                sel = np.flatnonzero(done)
                down[sel, idx[sel]] -= 1

        pos = pos + np.where(up, 1, -1)
        counts[rows, (pos - k_lo).astype(np.intp)] += 1
        j += 1

        if live_hor is not None:
            done = done | (live_hor == j)

        if done.any():
            sel = np.flatnonzero(done)
            out_pos[ids[sel]] = pos[sel]
            out_steps[ids[sel]] = j
            if crossing:
                out_tau[ids[sel]] = j - 1
            if track_down_counts:
                final_down[ids[sel]] = down[sel]
            keep = ~done
            ids, pos, counts, cross_count = ids[keep], pos[keep], counts[keep], cross_count[keep]
            if track_down_counts:
                down = down[keep]
            if live_hor is not None:
                live_hor = live_hor[keep]
            if not ids.size:
                break

        lo, hi = int(pos.min()), int(pos.max())
        if lo - k_lo < 1 or hi - k_lo >= counts.shape[1] - 1:
            pad = counts.shape[1]
            if track_down_counts:
                counts, down, final_down = _grow([counts, down, final_down], pad, pad)
            else:
                (counts,) = _grow([counts], pad, pad)
            k_lo -= pad

    if ids.size:  # replicates still running at the step limit
        out_pos[ids] = pos
        out_steps[ids] = j
        if crossing:
            out_cens[ids] = True
        elif live_hor is not None:
            out_cens[ids] = live_hor > j
        elif isinstance(rule, FixedHorizon) and rule.steps > cap:
            out_cens[ids] = True
        if track_down_counts:
            final_down[ids] = down

    return BatchWalkResult(
        final_positions=out_pos,
        steps=out_steps,
        tau=out_tau,
        censored=out_cens,
        down_counts=final_down,
        k_lo=k_lo,
    )


def two_level_coalescence_walk(env: CookieEnvironment, v: float, v_prime: float,
                               x_probe: float, reps: int, rng: np.random.Generator,
                               cap: int = DEFAULT_CAP):
    """Nested two-level experiment on a single walk per replicate.

    Runs each walk to the stopping time of level v_prime at the origin and
    records whether the probe site floor(2 n x_probe) was visited between the
    level-v and level-v_prime stopping times.  No visit means the two local
    time profiles agree at the probe ("coalesced").  Returns (coalesced,
    censored) boolean arrays.
    """
    n = env.n
    v1 = int(math.floor(n * v))
    v2 = int(math.floor(n * v_prime))
    if v2 < v1:
        raise ValueError("v_prime must be at least v")
    k_probe = int(math.floor(2 * n * x_probe))

    pos = np.zeros(reps, dtype=np.int64)
    counts_half = 64
    width = 2 * counts_half + 1
    counts = np.zeros((reps, width), dtype=np.int32)
    counts[:, counts_half] = 1
    k_lo = -counts_half

    cross = np.zeros(reps, dtype=np.int64)
    in_window = np.zeros(reps, dtype=bool)
    visited = np.zeros(reps, dtype=bool)
    ids = np.arange(reps)
    out_coal = np.zeros(reps, dtype=bool)
    out_cens = np.zeros(reps, dtype=bool)
    homogeneous = env.field.homogeneous

    j = 0
    while ids.size and j < cap:
        idx = (pos - k_lo).astype(np.intp)
        visits = counts[np.arange(ids.size), idx]
        eps = env.epsilon_many(visits) if homogeneous else env.epsilon_many(visits, pos)
        up = rng.random(ids.size) < 0.5 * (1.0 + eps)
        hit = (~up) & (pos == 0)
        cross[hit] += 1
        start = hit & (cross == v1 + 1)
        in_window |= start
        finish = hit & (cross == v2 + 1)

        pos = pos + np.where(up, 1, -1)
        counts[np.arange(ids.size), (pos - k_lo).astype(np.intp)] += 1
        j += 1
        visited |= in_window & (pos == k_probe)

        done = finish | visited
        if done.any():
            sel = np.flatnonzero(done)
            out_coal[ids[sel]] = ~visited[sel]
            keep = ~done
            ids, pos, counts = ids[keep], pos[keep], counts[keep]
            cross, in_window, visited = cross[keep], in_window[keep], visited[keep]
            if not ids.size:
                break

        lo, hi = int(pos.min()), int(pos.max())
        if lo - k_lo < 1 or hi - k_lo >= counts.shape[1] - 1:
            pad = counts.shape[1]
            (counts,) = _grow([counts], pad, pad)
            k_lo -= pad

    if ids.size:
        out_cens[ids] = True
    return out_coal, out_cens
