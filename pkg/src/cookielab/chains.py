"""Per-level visit chains, chain-built profiles, and branching extinction.

At a fixed site, visits resolve down-moves through independent trials: the
j-th visit is a down-move with probability (1 - eps_j)/2.  The count W(m) of
trials needed to collect m down-moves drives two chains: V (central region,
step m -> W(m) - m + 1) and V~ (outer regions, step m -> W(m) - m, absorbing
at 0).  Assembling V and V~ across sites reproduces the law of the walk's
downcrossing profile without simulating the walk itself.

The unexcited V~ chain is exactly a critical branching process with
geometric offspring; its subcritical dominators admit a closed-form
extinction probability checked here against direct simulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .env import CookieEnvironment
from .errors import RunawayChainError
from .walk import LocalTimeProfile, _edges_from_counts

__all__ = [
    "ChainColumn",
    "GwParams",
    "sample_W",
    "sample_W_many",
    "sample_V_step",
    "sample_Vtilde_step",
    "profile_via_chains",
    "chain_profile_values_batch",
    "chain_tau_batch",
    "increment_moments_mc",
    "IncrementMoments",
    "gw_extinction_prob",
    "simulate_gw_extinction",
]

TRIAL_GUARD = 10**9
_BLOCK_ELEMENTS = 1 << 23  # uniform draws per block, caps memory


@dataclass(frozen=True)
class ChainColumn:
    """The per-visit excitation sequence at one site of an environment."""

    env: CookieEnvironment
    site: int = 0

    def eps(self, lo: int, hi: int) -> np.ndarray:
        """eps_j for trials j = lo..hi-1 (1-indexed)."""
        j = np.arange(lo, hi)
        return self.env.epsilon_many(j, np.full(j.shape, self.site))

    def down_probs(self, lo: int, hi: int) -> np.ndarray:
        return 0.5 * (1.0 - self.eps(lo, hi))

    @property
    def constant_index(self) -> Optional[int]:
        """Trial index from which the down probability stops changing."""
        return self.env.constant_trial_index()

    def constant_down_prob(self) -> float:
        idx = self.constant_index
        if idx is None:
            raise ValueError("column has no declared constant tail")
        return float(0.5 * (1.0 - self.env.epsilon(max(idx, 1), self.site)))

    def negated(self) -> "ChainColumn":
        return ChainColumn(self.env.negated(), self.site)


def sample_W_many(col: ChainColumn, targets, rng: np.random.Generator,
                  guard: int = TRIAL_GUARD, use_tail_shortcut: bool = True) -> np.ndarray:
    """Trial counts of the m-th down-move, one per entry of ``targets``.

    Trials are materialized as blocks of uniforms compared against the
    per-visit down probabilities.  Once the column's down probability is
    constant, the remaining trial count for m outstanding down-moves is
    m plus a negative binomial draw, which is the same law at O(1) cost.
    """
    need = np.array(targets, dtype=np.int64, copy=True)
    if np.any(need < 0):
        raise ValueError("down-move targets must be nonnegative")
    out = np.zeros(need.shape, dtype=np.int64)
    active = np.flatnonzero(need > 0)
    t = 0
    const_at = col.constant_index if use_tail_shortcut else None
    while active.size:
        if const_at is not None and t + 1 >= const_at:
            q = col.constant_down_prob()
            m = need[active]
            out[active] = t + m + rng.negative_binomial(m, q)
            break
        limit = const_at - 1 - t if const_at is not None else np.iinfo(np.int64).max
        want = int(2.3 * float(need[active].max()) + 64)
        block = max(min(want, limit, max(_BLOCK_ELEMENTS // active.size, 64)), 1)
        q = col.down_probs(t + 1, t + block + 1)
        downs = rng.random((active.size, block)) < q
        hits = np.cumsum(downs, axis=1)
        total = hits[:, -1]
        reached = total >= need[active]
        if reached.any():
            sel = active[reached]
            first = np.argmax(hits[reached] >= need[sel, None], axis=1)
            out[sel] = t + first + 1
        need[active[~reached]] -= total[~reached]
        active = active[~reached]
        t += block
        if t > guard:
            raise RunawayChainError(
                f"no {int(need.max())} down-moves within {guard} trials"
            )
    return out


def sample_W(col: ChainColumn, m: int, seed=0) -> int:
    """Trial index of the m-th down-move (0 when m = 0)."""
    if m < 0:
        raise ValueError("m must be nonnegative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return int(sample_W_many(col, [m], rng)[0])


def sample_V_step(col: ChainColumn, m: int, seed=0) -> int:
    """One central-region transition: W(m) - m + 1."""
    return sample_W(col, m, seed) - m + 1


def sample_Vtilde_step(col: ChainColumn, m: int, seed=0) -> int:
    """One outer-region transition: W(m) - m (0 is absorbing)."""
    return sample_W(col, m, seed) - m


# ---------------------------------------------------------------------------
# profiles assembled from the chains
# ---------------------------------------------------------------------------


def _central_chain_batch(env, a_site: int, v0: int, start, rng,
                         record_sites=None) -> np.ndarray:
    """V chain across sites a_site+1 .. 0; returns values at site 0.

    ``start`` is the vector of anchor counts; ``record_sites`` optionally
    collects values at given sites into the returned dict.
    """
    vals = np.array(start, dtype=np.int64, copy=True)
    recorded = {}
    for k in range(a_site + 1, 1):
        col = ChainColumn(env, k)
        w = sample_W_many(col, vals, rng)
        vals = w - vals + 1
        if record_sites is not None and k in record_sites:
            recorded[k] = vals.copy()
    return (vals, recorded) if record_sites is not None else (vals, {})


def _outer_chain_batch(env, start_vals, first_site: int, direction: int,
                       n_sites: int, rng, record_sites=None,
                       running_sum=None, sum_budget=None):
    """V~ chain over ``n_sites`` sites from ``first_site`` going ``direction``.

    Absorbing at 0.  ``running_sum``/``sum_budget`` support early stopping
    once an accumulated count budget is exhausted (used by stopping-time
    sampling); replicates whose budget overflows are flagged.
    """
    reps = start_vals.size
    vals = np.array(start_vals, dtype=np.int64, copy=True)
    recorded = {}
    alive = np.flatnonzero(vals > 0)
    overflow = np.zeros(reps, dtype=bool)
    for step in range(1, n_sites + 1):
        if not alive.size:
            break
        site = first_site + direction * (step - 1)
        col = ChainColumn(env, site)
        w = sample_W_many(col, vals[alive], rng)
        vals[alive] = w - vals[alive]
        if record_sites is not None and site in record_sites:
            snap = np.zeros(reps, dtype=np.int64)
            snap[alive] = vals[alive]
            recorded[site] = snap
        if running_sum is not None:
            running_sum[alive] += vals[alive]
            over = running_sum[alive] > sum_budget
            if over.any():
                overflow[alive[over]] = True
                alive = alive[~over]
        alive = alive[vals[alive] > 0]
    still_alive = np.zeros(reps, dtype=bool)
    still_alive[alive] = True
    return vals, recorded, still_alive, overflow


def profile_via_chains(env: CookieEnvironment, a: float, v: float,
                       window: tuple[float, float], seed=0) -> LocalTimeProfile:
    """One profile equal in law to the walk-built one, on the given x-window.

    Central region: V chain from floor(nv) across sites floor(2na)..0.
    Right region: V~ chain from the value at 0 until absorption or the window
    edge.  Left region: an independent V~ chain of the negated environment
    started from floor(nv)+1 below the anchor.
    """
    if a > 0:
        raise ValueError("anchor must be nonpositive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = env.n
    a_site = int(math.floor(2 * n * a))
    v0 = int(math.floor(n * v))
    x_lo, x_hi = window
    k_hi = int(math.floor(2 * n * x_hi))
    k_lo = int(math.floor(2 * n * x_lo))
    if k_hi < 0 or k_lo > a_site:
        raise ValueError("window must contain the anchor and the origin")

    counts = {a_site: v0}
    vals = np.array([v0], dtype=np.int64)
    cur = vals
    for k in range(a_site + 1, 1):
        w = sample_W_many(ChainColumn(env, k), cur, rng)
        cur = w - cur + 1
        counts[k] = int(cur[0])
    at_zero = int(cur[0]) if a_site < 0 else v0

    right = np.array([at_zero], dtype=np.int64)
    for k in range(1, k_hi + 1):
        if right[0] == 0:
            counts[k] = 0
            continue
        w = sample_W_many(ChainColumn(env, k), right, rng)
        right = w - right
        counts[k] = int(right[0])

    neg = env.negated()
    left = np.array([v0 + 1], dtype=np.int64)
    for step in range(1, a_site - k_lo + 1):
        k = a_site - step
        if left[0] == 0:
            counts[k] = 0
            continue
        w = sample_W_many(ChainColumn(neg, k), left, rng)
        left = w - left
        counts[k] = int(left[0])

    lo = min(counts)
    hi = max(counts)
    arr = np.zeros(hi - lo + 1, dtype=np.int64)
    for k, c in counts.items():
        arr[k - lo] = c
    w_minus, w_plus = _edges_from_counts(arr, lo, a_site, n)
    return LocalTimeProfile(n=n, anchor=a, level=v, k_lo=lo, counts=arr,
                            w_minus=w_minus, w_plus=w_plus)


def chain_profile_values_batch(env: CookieEnvironment, a: float, v: float,
                               x_eval: float, reps: int,
                               rng: np.random.Generator) -> np.ndarray:
    """Scaled profile values Lambda(x_eval) for many independent profiles.

    Only the chain segments needed to reach x_eval are simulated; absorbed
    replicates contribute zeros.
    """
    n = env.n
    a_site = int(math.floor(2 * n * a))
    v0 = int(math.floor(n * v))
    k_eval = int(math.floor(2 * n * x_eval))
    start = np.full(reps, v0, dtype=np.int64)

    if k_eval <= 0 and k_eval >= a_site:
        vals = start
        for k in range(a_site + 1, k_eval + 1):
            w = sample_W_many(ChainColumn(env, k), vals, rng)
            vals = w - vals + 1
        return vals / n
    if k_eval < a_site:
        neg = env.negated()
        vals = np.full(reps, v0 + 1, dtype=np.int64)
        alive = np.flatnonzero(vals > 0)
        for step in range(1, a_site - k_eval + 1):
            if not alive.size:
                break
            col = ChainColumn(neg, a_site - step)
            w = sample_W_many(col, vals[alive], rng)
            vals[alive] = w - vals[alive]
            alive = alive[vals[alive] > 0]
        return np.maximum(vals, 0) / n

    vals, _ = _central_chain_batch(env, a_site, v0, start, rng)
    vals, _, _, _ = _outer_chain_batch(env, vals, 1, +1, k_eval, rng)
    return np.maximum(vals, 0) / n


def chain_tau_batch(env: CookieEnvironment, a: float, v: float, reps: int,
                    rng: np.random.Generator, cap_scaled: float):
    """Scaled stopping times tau/(4 n^2) via the occupation identity.

    tau = floor(2na) + 2 * sum_k S(k); each chain segment runs until
    absorption or until the accumulated sum already pushes tau past
    ``cap_scaled`` (such replicates are flagged censored: tau > cap is known,
    its value is not).  Returns (tau_scaled, censored).
    """
    n = env.n
    a_site = int(math.floor(2 * n * a))
    v0 = int(math.floor(n * v))
    budget_counts = (cap_scaled * 4.0 * n * n - a_site) / 2.0

    total = np.zeros(reps, dtype=np.int64)
    start = np.full(reps, v0, dtype=np.int64)
    total += start  # S at the anchor
    vals = start
    for k in range(a_site + 1, 1):
        w = sample_W_many(ChainColumn(env, k), vals, rng)
        vals = w - vals + 1
        total += vals

    max_sites = int(2.0 * budget_counts) + 2  # each live site adds >= 1
    _, _, alive_r, over_r = _outer_chain_batch(
        env, vals, 1, +1, max_sites, rng, running_sum=total, sum_budget=budget_counts
    )

    vals_l = np.full(reps, v0 + 1, dtype=np.int64)
    vals_l[over_r] = 0  # budget already exhausted; skip the left side
    _, _, alive_l, over_l = _outer_chain_batch(
        env.negated(), vals_l, a_site - 1, -1, max_sites, rng,
        running_sum=total, sum_budget=budget_counts,
    )
    censored = over_r | over_l | alive_r | alive_l
    tau_scaled = (a_site + 2.0 * total) / (4.0 * n * n)
    return tau_scaled, censored


@dataclass(frozen=True)
class IncrementMoments:
    mean_shift: float
    mean_ci99: float
    variance: float
    variance_ci99: float
    reps: int


def increment_moments_mc(col: ChainColumn, m: int, reps: int, seed=0) -> IncrementMoments:
    """Monte Carlo E[W(m)] - 2m and Var[W(m)] with 99% normal CIs."""
    if reps < 1000:
        raise ValueError("need at least 1000 replicates for stable intervals")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    w = sample_W_many(col, np.full(reps, m, dtype=np.int64), rng).astype(float)
    z = 2.5758293035489004  # 99% two-sided normal quantile
    mean = w.mean()
    var = w.var(ddof=1)
    mean_ci = z * math.sqrt(var / reps)
    centered = w - mean
    m4 = np.mean(centered**4)
    var_of_var = max(m4 - (reps - 3) / (reps - 1) * var**2, 0.0) / reps
    return IncrementMoments(
        mean_shift=float(mean - 2.0 * m),
        mean_ci99=float(mean_ci),
        variance=float(var),
        variance_ci99=float(z * math.sqrt(var_of_var)),
        reps=reps,
    )


# ---------------------------------------------------------------------------
# branching extinction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GwParams:
    """Geometric-offspring branching parameters.

    Offspring law P(G = j) = p (1-p)^j on {0, 1, ...}; mean (1-p)/p, so
    p > 1/2 is subcritical and p = 1/2 critical.
    """

    p: float

    def __post_init__(self):
        if not (0.0 < self.p < 1.0):
            raise ValueError(f"offspring parameter must lie in (0,1), got {self.p}")

    @property
    def m(self) -> float:
        return self.p / (1.0 - self.p)

    @property
    def s(self) -> float:
        return (1.0 - self.m * (1.0 - self.p)) / self.p


CRITICAL_EPS = 1e-9


def gw_extinction_prob(params: GwParams, k: int, initial: int) -> float:
    """P(population extinct within k generations from ``initial`` individuals).

    Closed form from iterating the fractional-linear generating function:
    f_k(0) = 1 - (1 - s) / (m^k - s)  with m = p/(1-p), s = 1/m, raised to
    the number of starting individuals.  The critical case degenerates to
    f_k(0) = k/(k+1).
    """
    if k < 1 or initial < 1:
        raise ValueError("need k >= 1 and initial >= 1")
    m = params.m
    if abs(m - 1.0) < CRITICAL_EPS:
        f = k / (k + 1.0)
    else:
        s = params.s
        log_mk = k * math.log(m)
        if log_mk > 600.0:
            f = 1.0 - (1.0 - s) * math.exp(-log_mk)
        else:
            f = 1.0 - (1.0 - s) / (m**k - s)
    return f**initial


def simulate_gw_extinction(params: GwParams, k: int, initial: int, reps: int,
                           rng: np.random.Generator) -> float:
    """Direct branching simulation: fraction of runs extinct within k generations."""
    pop = np.full(reps, initial, dtype=np.int64)
    for _ in range(k):
        alive = pop > 0
        if not alive.any():
            break
        pop[alive] = rng.negative_binomial(pop[alive], params.p)
    return float(np.mean(pop == 0))
