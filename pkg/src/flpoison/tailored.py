"""Countermeasures aimed at sign-consistent poisoning.

GMM-Sign scores each client by how often its update signs flip between
consecutive participations; GMM-Magnitude by how close its update sits to
its nearest peers. A two-component 1-D Gaussian mixture splits the scores
and the low cluster is flagged. The normalization defense rescales the
final total update to a fixed norm.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .core import ContractError, as_vector, l2_norm


@dataclass
class Gmm1D:
    means: tuple
    stds: tuple
    weights: tuple
    loglik: list = field(default_factory=list)
    degenerate: bool = False

    def responsibilities(self, x) -> np.ndarray:
        """(n, 2) posterior component probabilities."""
        x = np.asarray(x, dtype=np.float64)
        logp = np.stack([_log_normal(x, m, s) + math.log(w)
                         for m, s, w in zip(self.means, self.stds, self.weights)], axis=1)
        logp -= logp.max(axis=1, keepdims=True)
        p = np.exp(logp)
        return p / p.sum(axis=1, keepdims=True)


@dataclass
class DetectionVerdict:
    detected_ids: set
    clusters_separable: bool
    gmm: Gmm1D | None = None


def _log_normal(x, mu, sigma):
    return -0.5 * ((x - mu) / sigma) ** 2 - math.log(sigma) - 0.5 * math.log(2 * math.pi)


def _mixture_loglik(x, means, stds, weights):
    comp = np.stack([_log_normal(x, m, s) + math.log(w)
                     for m, s, w in zip(means, stds, weights)], axis=1)
    top = comp.max(axis=1, keepdims=True)
    return float(np.sum(top[:, 0] + np.log(np.exp(comp - top).sum(axis=1)))), comp


def gmm_fit_1d(samples, rng: np.random.Generator, tol: float = 1e-8,
               max_iter: int = 500, n_init: int = 10) -> Gmm1D:
    """Two-component EM with k-means++ seeding; best of ``n_init`` restarts."""
    x = as_vector(samples)
    if x.shape[0] < 4:
        raise ContractError("need at least 4 samples to fit a two-component mixture")
    spread = float(x.max() - x.min())
    if spread == 0.0:
        v = float(x[0])
        return Gmm1D((v, v), (1.0, 1.0), (0.5, 0.5), [], degenerate=True)
    fits = [_em_once(x, rng, 1e-9 * spread, tol, max_iter) for _ in range(max(n_init, 1))]
    return max(fits, key=lambda g: g.loglik[-1])


def _em_once(x, rng, floor, tol, max_iter) -> Gmm1D:
    c0 = x[rng.integers(len(x))]
    d2 = (x - c0) ** 2
    c1 = x[rng.choice(len(x), p=d2 / d2.sum())]
    near1 = np.abs(x - c1) < np.abs(x - c0)
    means, stds, weights = [], [], []
    for members in (x[~near1], x[near1]):
        means.append(float(members.mean()))
        stds.append(max(float(members.std()), floor))
        weights.append(len(members) / len(x))

    history = []
    ll, comp = _mixture_loglik(x, means, stds, weights)
    history.append(ll)
    for _ in range(max_iter):
        comp = comp - comp.max(axis=1, keepdims=True)
        r = np.exp(comp)
        r /= r.sum(axis=1, keepdims=True)
        nk = r.sum(axis=0)
        for j in (0, 1):
            if nk[j] <= 0:
                continue
            mu = float(r[:, j] @ x / nk[j])
            var = float(r[:, j] @ (x - mu) ** 2 / nk[j])
            means[j] = mu
            stds[j] = max(math.sqrt(var), floor)
        weights = [float(min(max(n / len(x), 1e-12), 1 - 1e-12)) for n in nk]
        ll, comp = _mixture_loglik(x, means, stds, weights)
        history.append(ll)
        if abs(history[-1] - history[-2]) < tol:
            break
    total = weights[0] + weights[1]
    return Gmm1D(tuple(means), tuple(stds), (weights[0] / total, weights[1] / total), history)


def sign_flip_feature(history, N: int) -> int | None:
    """Flipped dimensions summed over the last ``N`` consecutive-update pairs.

    ``history`` is the client's updates in participation order; ``None``
    when it has fewer than two.
    """
    if len(history) < 2:
        return None
    pairs = list(zip(history[:-1], history[1:]))[-N:]
    return sum(_kernels.count_flips(a, b) for a, b in pairs)


def magnitude_round_scores(ids, X, m: int) -> dict:
    """Per client: mean squared distance to its ``m - 1`` nearest peers this round."""
    if m < 2:
        raise ContractError("m must be at least 2")
    if len(ids) < m:
        return {}
    D = _kernels.pairwise_sq_dists(np.asarray(X, dtype=np.float64))
    out = {}
    for r, cid in enumerate(ids):
        others = np.sort(np.delete(D[r], r))
        out[cid] = float(others[:m - 1].sum() / (m - 1))
    return out


def magnitude_feature(round_scores, cid, N: int) -> float:
    """Sum of a client's per-round scores over the last ``N`` rounds it was scored in."""
    vals = [rs[cid] for rs in round_scores[-N:] if cid in rs]
    return float(sum(vals))


def detect(features: dict, which_cluster: str = "lower", rng=None) -> DetectionVerdict:
    """Fit a 1-D GMM to client features and flag one cluster if the two separate."""
    if len(features) < 4:
        raise ContractError("need features for at least 4 clients")
    if rng is None:
        rng = np.random.default_rng(0)
    cids = sorted(features)
    x = np.array([features[c] for c in cids], dtype=np.float64)
    gmm = gmm_fit_1d(x, rng)
    if gmm.degenerate:
        return DetectionVerdict(set(), False, gmm)
    gap = abs(gmm.means[0] - gmm.means[1])
    if gap < max(gmm.stds):
        return DetectionVerdict(set(), False, gmm)
    target = int(np.argmin(gmm.means)) if which_cluster == "lower" else int(np.argmax(gmm.means))
    resp = gmm.responsibilities(x)[:, target]
    return DetectionVerdict({c for c, r in zip(cids, resp) if r >= 0.5}, True, gmm)


def detection_accuracy(verdict: DetectionVerdict, fake_ids) -> float:
    fake_ids = set(fake_ids)
    if not fake_ids:
        return 1.0
    return len(verdict.detected_ids & fake_ids) / len(fake_ids)


def normalize_total_update(w_final, w_init, b: float) -> np.ndarray:
    if not b > 0:
        raise ContractError("b must be positive")
    w_final, w_init = as_vector(w_final), as_vector(w_init)
    total = w_final - w_init
    n = l2_norm(total)
    if n == 0.0:
        return w_init.copy()
    return w_init + (b / n) * total
