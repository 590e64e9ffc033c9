"""Model poisoning attacks run by injected fake clients.

The main attack keeps one random sign vector ``s`` for the whole run and
sends ``k * s`` from every fake client, where the magnitude ``k`` is a unit
vector (estimated from how the global model last moved) times a scale
tied to the last global step. A binomial sign test over windows of ``e``
rounds shrinks the scale when the global model stops following ``s``.

Baselines (random, MPAF, LIE, Fang, Opt. Fang, Min-Max, Min-Sum) are here
for comparison; the ones that need genuine updates read them from the
:class:`AttackerView`.
"""

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import gammaln, logsumexp

from .core import ContractError, l2_norm, sign_match_fraction

ATTACKS = ("none", "poisonedfl", "poisonedfl-adapt-sign", "poisonedfl-adapt-noise",
           "random", "mpaf", "lie", "fang", "optfang", "minmax", "minsum")


class AttackError(ValueError):
    pass


@dataclass
class AttackerView:
    round: int
    w_curr: np.ndarray                 # w^{t-1}, the model just broadcast
    w_prev: np.ndarray | None          # w^{t-2}; None in the first round
    fake_ids: list = field(default_factory=list)
    genuine_updates: list | None = None
    aggregate_fn: Callable | None = None   # only for rule-aware baselines
    rng_for: Callable | None = None        # fake id -> Generator for this round


@dataclass
class AttackState:
    s: np.ndarray
    c: float = 8.0
    e: int = 50
    beta: float = 0.7
    c_floor: float = 0.5
    p_threshold: float = 0.01
    k_prev: np.ndarray | None = None
    t_started: int | None = None
    checkpoints: dict = field(default_factory=dict)
    unit_mode: str = "adaptive"     # or "same"
    scale_mode: str = "adaptive"    # or "max"
    max_scale: float = 1e5
    tests: list = field(default_factory=list)   # (round, X, tail, success)

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64)
        if self.c < self.c_floor:
            raise ContractError("c must not start below c_floor")
        if not 0 < self.beta < 1:
            raise ContractError("beta must lie in (0, 1)")
        if self.k_prev is None:
            self.k_prev = np.zeros_like(self.s)


# ---------------------------------------------------------------------------
# binomial sign test
# ---------------------------------------------------------------------------

def log_upper_tail(d: int, X: int) -> float:
    """log Pr(x >= X) for x ~ Bin(d, 1/2), summed exactly in log space."""
    if X <= 0:
        return 0.0
    if X > d:
        return -math.inf
    i = np.arange(X, d + 1, dtype=np.float64)
    log_terms = gammaln(d + 1.0) - gammaln(i + 1.0) - gammaln(d - i + 1.0)
    return float(logsumexp(log_terms) - d * math.log(2.0))


def upper_tail(d: int, X: int) -> float:
    return math.exp(log_upper_tail(d, X))


def count_matches(total_delta, s) -> int:
    return int(round(sign_match_fraction(total_delta, s) * len(s)))


def poisonedfl_hypothesis_test(total_delta, s, p_threshold: float = 0.01) -> bool:
    """True when the window's movement follows ``s`` more than chance allows."""
    d = len(s)
    X = count_matches(total_delta, s)
    return log_upper_tail(d, X) <= math.log(p_threshold)


def poisonedfl_update_c(state: AttackState, success: bool) -> AttackState:
    if not success:
        state.c = max(state.c_floor, state.beta * state.c)
    return state


# ---------------------------------------------------------------------------
# magnitude vector
# ---------------------------------------------------------------------------

def _uniform_unit(d: int) -> np.ndarray:
    return np.full(d, 1.0 / math.sqrt(d))


def poisonedfl_unit_vector(view: AttackerView, state: AttackState) -> np.ndarray:
    d = len(state.s)
    if state.unit_mode == "same" or view.w_prev is None:
        return _uniform_unit(d)
    g = np.asarray(view.w_curr) - np.asarray(view.w_prev)
    ks = state.k_prev * state.s
    ng, nks = l2_norm(g), l2_norm(ks)
    if ng == 0.0 or nks == 0.0:
        return _uniform_unit(d)
    resid = g - (ng / nks) * ks
    nr = l2_norm(resid)
    if nr == 0.0:
        return _uniform_unit(d)
    return np.abs(resid) / nr


def poisonedfl_scale(view: AttackerView, state: AttackState) -> float:
    if state.scale_mode == "max":
        return state.max_scale
    if view.w_prev is None:
        return 0.0
    return state.c * l2_norm(np.asarray(view.w_curr) - np.asarray(view.w_prev))


def _window_test(view: AttackerView, state: AttackState) -> None:
    t = view.round
    # w^{t-1} arrives as w_curr in round t; keep the window starts and w^0
    if t - 1 == 0 or (t - 1 - state.t_started) % state.e == 0:
        state.checkpoints[t - 1] = np.array(view.w_curr, dtype=np.float64)
    elapsed = t - state.t_started
    if elapsed > 0 and elapsed % state.e == 0 and (t - state.e) in state.checkpoints:
        delta = np.asarray(view.w_curr) - state.checkpoints[t - state.e]
        X = count_matches(delta, state.s)
        tail = log_upper_tail(len(state.s), X)
        success = tail <= math.log(state.p_threshold)
        state.tests.append((t, X, math.exp(tail), success))
        poisonedfl_update_c(state, success)
        for key in [k for k in state.checkpoints if 0 < k < t - state.e]:
            del state.checkpoints[key]


def poisonedfl_magnitude(view: AttackerView, state: AttackState) -> np.ndarray:
    """Advance the state by one round and return this round's ``k``."""
    if state.t_started is None:
        state.t_started = view.round
    _window_test(view, state)
    if view.w_prev is None and state.scale_mode != "max":
        # warm-up: nothing to scale against yet
        k = np.zeros_like(state.s)
    else:
        k = poisonedfl_scale(view, state) * poisonedfl_unit_vector(view, state)
    state.k_prev = k
    return k


def poisonedfl_craft(view: AttackerView, state: AttackState):
    """Identical ``k * s`` for every participating fake; returns (updates, state)."""
    k = poisonedfl_magnitude(view, state)
    g = k * state.s
    return {fid: g.copy() for fid in view.fake_ids}, state


def adapt_sign(k: np.ndarray, s: np.ndarray, alpha: float, eps: float,
               rng: np.random.Generator) -> np.ndarray:
    """Flip each direction with probability ``alpha``; flipped dims carry ``eps``."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError("alpha must lie in [0, 1]")
    g = k * s
    flip = rng.random(len(s)) < alpha
    g[flip] = -s[flip] * eps
    return g


def adapt_noise(k: np.ndarray, gamma: float, rng: np.random.Generator):
    """Noisy magnitudes clamped at zero; returns (magnitudes, clamped fraction)."""
    if gamma < 0:
        raise ContractError("gamma must be non-negative")
    eps = rng.standard_normal(len(k))
    nk, ne = l2_norm(k), l2_norm(eps)
    noisy = k + (gamma * nk / ne) * eps if ne > 0 else k.copy()
    clamped = noisy < 0
    noisy[clamped] = 0.0
    return noisy, float(np.mean(clamped))


def poisonedfl_adapt_sign(view: AttackerView, state: AttackState, alpha: float,
                          eps: float = 1e-6):
    k = poisonedfl_magnitude(view, state)
    return {fid: adapt_sign(k, state.s, alpha, eps, view.rng_for(fid))
            for fid in view.fake_ids}


def poisonedfl_adapt_noise(view: AttackerView, state: AttackState, gamma: float):
    k = poisonedfl_magnitude(view, state)
    out, rates = {}, []
    for fid in view.fake_ids:
        kk, rate = adapt_noise(k, gamma, view.rng_for(fid))
        out[fid] = kk * state.s
        rates.append(rate)
    return out, (float(np.mean(rates)) if rates else 0.0)


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

def attack_random(view: AttackerView, lambda_scale: float = 1e6):
    d = len(view.w_curr)
    return {fid: lambda_scale * view.rng_for(fid).standard_normal(d) for fid in view.fake_ids}


def attack_mpaf(view: AttackerView, w_target, lambda_scale: float = 1e6):
    g = lambda_scale * (np.asarray(w_target) - np.asarray(view.w_curr))
    return {fid: g.copy() for fid in view.fake_ids}


def _genuine(view: AttackerView) -> np.ndarray:
    if not view.genuine_updates:
        raise AttackError("this attack needs the genuine updates of the round")
    return np.stack([np.asarray(g, dtype=np.float64) for g in view.genuine_updates])


def attack_lie(view: AttackerView, z: float = 0.74):
    G = _genuine(view)
    g = G.mean(axis=0) + z * G.std(axis=0)
    return {fid: g.copy() for fid in view.fake_ids}


def fang_trim_values(G: np.ndarray, rng: np.random.Generator, b: float = 2.0) -> np.ndarray:
    """One malicious vector just past the genuine range, against the mean's sign."""
    mu = G.mean(axis=0)
    lo, hi = G.min(axis=0), G.max(axis=0)
    u = rng.random(G.shape[1])
    # mean >= 0: go below the minimum; mean < 0: go above the maximum
    below = np.where(lo > 0, lo / b + u * (lo - lo / b), lo * b + u * (lo - lo * b))
    above = np.where(hi > 0, hi + u * (hi * b - hi), hi + u * (hi / b - hi))
    return np.where(mu >= 0, below, above)


def fang_krum_lambda(G: np.ndarray, n_fake: int, tol: float = 1e-5) -> float:
    from . import _kernels
    from .aggregation import krum_select
    direction = np.where(G.mean(axis=0) < 0, -1.0, 1.0)
    lam = max(l2_norm(g) for g in G) / math.sqrt(G.shape[1])
    floor = lam * tol
    while lam > floor:
        mal = -lam * direction
        X = np.vstack([G, np.repeat(mal[None, :], n_fake, axis=0)])
        if krum_select(_kernels.pairwise_sq_dists(X), 1)[0] >= len(G):
            return lam
        lam /= 2.0
    return 0.0


def attack_fang(view: AttackerView, rule_hint: str = "trmean"):
    G = _genuine(view)
    if rule_hint == "multikrum":
        lam = fang_krum_lambda(G, max(len(view.fake_ids), 1))
        g = -lam * np.where(G.mean(axis=0) < 0, -1.0, 1.0)
        return {fid: g.copy() for fid in view.fake_ids}
    return {fid: fang_trim_values(G, view.rng_for(fid)) for fid in view.fake_ids}


def _inverse_unit(mu: np.ndarray) -> np.ndarray:
    n = l2_norm(mu)
    return -mu / n if n > 0 else np.zeros_like(mu)


def largest_feasible_gamma(feasible: Callable[[float], bool], scale: float,
                           halvings: int = 50) -> float:
    """Largest gamma >= 0 with ``feasible(gamma)``, for interval-shaped feasible sets."""
    if scale <= 0 or not feasible(0.0):
        return 0.0
    hi = scale
    for _ in range(200):
        if not feasible(hi):
            break
        hi *= 2.0
    else:
        return 0.0
    lo = 0.0
    for _ in range(halvings):
        mid = 0.5 * (lo + hi)
        if feasible(mid):
            lo = mid
        else:
            hi = mid
    return lo


def minmax_gamma(G: np.ndarray) -> float:
    from . import _kernels
    mu, p = G.mean(axis=0), _inverse_unit(G.mean(axis=0))
    bound = math.sqrt(float(_kernels.pairwise_sq_dists(G).max()))

    def ok(gamma):
        mal = mu + gamma * p
        return max(l2_norm(mal - g) for g in G) <= bound

    return largest_feasible_gamma(ok, max(bound, 1e-12))


def minsum_gamma(G: np.ndarray) -> float:
    from . import _kernels
    mu, p = G.mean(axis=0), _inverse_unit(G.mean(axis=0))
    bound = float(_kernels.pairwise_sq_dists(G).sum(axis=1).max())

    def ok(gamma):
        mal = mu + gamma * p
        return float(np.sum((G - mal) ** 2)) <= bound

    return largest_feasible_gamma(ok, max(math.sqrt(bound), 1e-12))


def attack_minmax(view: AttackerView):
    G = _genuine(view)
    g = G.mean(axis=0) + minmax_gamma(G) * _inverse_unit(G.mean(axis=0))
    return {fid: g.copy() for fid in view.fake_ids}


def attack_minsum(view: AttackerView):
    G = _genuine(view)
    g = G.mean(axis=0) + minsum_gamma(G) * _inverse_unit(G.mean(axis=0))
    return {fid: g.copy() for fid in view.fake_ids}


def optfang_gamma(G: np.ndarray, n_fake: int, aggregate_fn: Callable,
                  iters: int = 50) -> float:
    """Step-halving search for the gamma that drags the aggregate furthest from the mean."""
    mu, p = G.mean(axis=0), _inverse_unit(G.mean(axis=0))
    spread = max(l2_norm(g - mu) for g in G)
    if spread == 0.0 and l2_norm(mu) == 0.0:
        return 0.0
    gamma = 10.0 * max(spread, l2_norm(mu))
    step = gamma / 2.0
    best_gamma, best_dev = 0.0, l2_norm(aggregate_fn(list(G) + [mu] * n_fake) - mu)
    for _ in range(iters):
        mal = mu + gamma * p
        dev = l2_norm(aggregate_fn(list(G) + [mal] * n_fake) - mu)
        if dev > best_dev:
            best_gamma, best_dev = gamma, dev
            gamma += step
        else:
            gamma -= step
        step /= 2.0
        gamma = max(gamma, 0.0)
    return best_gamma


def attack_optfang(view: AttackerView):
    G = _genuine(view)
    if view.aggregate_fn is None:
        raise AttackError("Opt. Fang needs the server's aggregation rule")
    gamma = optfang_gamma(G, max(len(view.fake_ids), 1), view.aggregate_fn)
    g = G.mean(axis=0) + gamma * _inverse_unit(G.mean(axis=0))
    return {fid: g.copy() for fid in view.fake_ids}


# ---------------------------------------------------------------------------
# one object per experiment
# ---------------------------------------------------------------------------

@dataclass
class AttackKnobs:
    c0: float = 8.0
    e: int = 50
    beta: float = 0.7
    c_floor: float = 0.5
    p: float = 0.01
    alpha: float = 0.0
    eps: float = 1e-6
    gamma: float = 0.0
    lambda_scale: float = 1e6
    unit_mode: str = "adaptive"
    scale_mode: str = "adaptive"


class Attacker:
    """Dispatches an attack key and owns whatever state it carries."""

    def __init__(self, name: str, knobs: AttackKnobs, s: np.ndarray,
                 w_target: np.ndarray | None = None, rule_hint: str = "trmean"):
        if name not in ATTACKS:
            raise AttackError(f"unknown attack {name!r}")
        self.name = name
        self.knobs = knobs
        self.rule_hint = rule_hint
        self.w_target = w_target
        self.clamp_rates: list[float] = []
        self.state = AttackState(s=s, c=knobs.c0, e=knobs.e, beta=knobs.beta,
                                 c_floor=knobs.c_floor, p_threshold=knobs.p,
                                 unit_mode=knobs.unit_mode, scale_mode=knobs.scale_mode)

    @property
    def needs_genuine(self) -> bool:
        return self.name in ("lie", "fang", "optfang", "minmax", "minsum")

    @property
    def stateful(self) -> bool:
        return self.name.startswith("poisonedfl")

    def craft(self, view: AttackerView) -> dict:
        n, kn = self.name, self.knobs
        if n == "none":
            return {}
        if n == "poisonedfl":
            return poisonedfl_craft(view, self.state)[0]
        if n == "poisonedfl-adapt-sign":
            return poisonedfl_adapt_sign(view, self.state, kn.alpha, kn.eps)
        if n == "poisonedfl-adapt-noise":
            out, rate = poisonedfl_adapt_noise(view, self.state, kn.gamma)
            if view.fake_ids:
                self.clamp_rates.append(rate)
            return out
        if not view.fake_ids:
            return {}
        if n == "random":
            return attack_random(view, kn.lambda_scale)
        if n == "mpaf":
            return attack_mpaf(view, self.w_target, kn.lambda_scale)
        if n == "lie":
            return attack_lie(view)
        if n == "fang":
            return attack_fang(view, self.rule_hint)
        if n == "optfang":
            return attack_optfang(view)
        if n == "minmax":
            return attack_minmax(view)
        return attack_minsum(view)
