"""Server-side aggregation rules.

Every per-round rule has the signature ``rule(updates, ctx, **knobs)`` and
returns an :class:`AggregationOutcome`. FLCert and FLDetector change the
training loop itself; their building blocks live here and the loop lives
in :mod:`flpoison.simulator`.
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from . import _kernels
from .core import ContractError, check_finite, l2_norm


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class ModelUpdate:
    client_id: int
    round: int
    vector: np.ndarray


@dataclass
class ServerContext:
    round: int
    w_prev: np.ndarray
    m_assumed: int = 0
    root_dataset: Any = None
    rng: np.random.Generator | None = None
    # FLTrust trains its root update with these
    model_spec: Any = None
    train_cfg: Any = None
    norm_threshold: float | None = None


@dataclass
class AggregationOutcome:
    aggregate: np.ndarray
    accepted_ids: set = field(default_factory=set)
    weights: dict | None = None


def _stack(updates: Sequence[ModelUpdate]):
    if len(updates) == 0:
        raise AggregationError("no updates to aggregate")
    ids = [u.client_id for u in updates]
    X = np.stack([np.asarray(u.vector, dtype=np.float64) for u in updates])
    return ids, X


def _done(agg, accepted, weights=None):
    check_finite(agg, "aggregate")
    return AggregationOutcome(agg, set(accepted), weights)


def fedavg(updates, ctx=None):
    ids, X = _stack(updates)
    return _done(_kernels.mean_rows(X), ids)


def coordinate_median(updates, ctx=None):
    ids, X = _stack(updates)
    return _done(_kernels.median_columns(X), ids)


def trimmed_mean(updates, ctx):
    ids, X = _stack(updates)
    m = int(ctx.m_assumed)
    if m < 0 or len(ids) <= 2 * m:
        raise AggregationError(f"trimmed mean needs more than {2 * m} updates, got {len(ids)}")
    return _done(_kernels.trimmed_mean_columns(X, m), ids)


def krum_select(D: np.ndarray, n_select: int) -> list[int]:
    """Indices picked by iterative Multi-Krum on a squared-distance matrix.

    Each step scores every pooled update by the sum of its ``len(pool) - 2``
    smallest distances to other pooled updates, takes the lowest score
    (lowest index on ties) and drops it from the pool.
    """
    pool = list(range(D.shape[0]))
    chosen = []
    while len(chosen) < n_select and pool:
        nb = max(len(pool) - 2, 0)
        best, best_score = None, np.inf
        for i in pool:
            others = np.sort([D[i, j] for j in pool if j != i])
            score = float(np.sum(others[:nb]))
            if score < best_score:
                best, best_score = i, score
        chosen.append(best)
        pool.remove(best)
    return chosen


def multi_krum(updates, ctx):
    ids, X = _stack(updates)
    k = len(ids)
    if k <= 2:
        raise AggregationError(f"Multi-Krum needs more than 2 updates, got {k}")
    n_select = max(k - int(ctx.m_assumed), 1)
    sel = krum_select(_kernels.pairwise_sq_dists(X), n_select)
    return _done(_kernels.mean_rows(X[sel]), [ids[i] for i in sel])


def clip_to_norm(g: np.ndarray, threshold: float) -> np.ndarray:
    n = l2_norm(g)
    if n > threshold:
        return g * (threshold / n)
    return g


def norm_bound(updates, ctx, threshold_norm: float | None = None):
    ids, X = _stack(updates)
    if threshold_norm is None:
        threshold_norm = ctx.norm_threshold
    if threshold_norm is None or not threshold_norm > 0:
        raise ContractError("norm bound needs a positive threshold")
    clipped = np.stack([clip_to_norm(x, threshold_norm) for x in X])
    return _done(_kernels.mean_rows(clipped), ids)


def fltrust(updates, ctx, root_update=None):
    ids, X = _stack(updates)
    if root_update is None:
        if ctx.root_dataset is None:
            raise AggregationError("FLTrust needs a root dataset")
        from .learner import local_train
        root_update = local_train(ctx.w_prev, ctx.root_dataset, ctx.train_cfg, ctx.rng,
                                  spec=ctx.model_spec)
    g0 = np.asarray(root_update, dtype=np.float64)
    n0 = l2_norm(g0)
    scores = np.zeros(len(ids))
    scaled = np.zeros_like(X)
    for r, x in enumerate(X):
        nx = l2_norm(x)
        if nx == 0.0 or n0 == 0.0:
            continue
        scores[r] = max(0.0, float(np.dot(x / nx, g0 / n0)))
        scaled[r] = x * (n0 / nx)
    total = scores.sum()
    if total == 0.0:
        return _done(np.zeros(X.shape[1]), [], {i: 0.0 for i in ids})
    weights = scores / total
    agg = weights @ scaled
    return _done(agg, [i for i, s in zip(ids, scores) if s > 0],
                 {i: float(wt) for i, wt in zip(ids, weights)})


def _cosine_distances(M):
    norms = np.array([l2_norm(r) for r in M])
    safe = np.where(norms > 0, norms, 1.0)
    U = M / safe[:, None]
    return np.clip(1.0 - U @ U.T, 0.0, 2.0)


def majority_cluster(D: np.ndarray) -> list[int]:
    """Single-linkage merging on ``D`` until one cluster holds a strict majority.

    Returns that cluster's member indices, sorted.
    """
    k = D.shape[0]
    need = -(-(k + 1) // 2)
    parent = list(range(k))
    size = [1] * k

    def root(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    if need <= 1:
        return list(range(k))
    iu, ju = np.triu_indices(k, 1)
    order = np.lexsort((ju, iu, D[iu, ju]))
    for e in order:
        a, b = root(iu[e]), root(ju[e])
        if a == b:
            continue
        if size[a] < size[b] or (size[a] == size[b] and b < a):
            a, b = b, a
        parent[b] = a
        size[a] += size[b]
        if size[a] >= need:
            return [i for i in range(k) if root(i) == a]
    return list(range(k))


def flame(updates, ctx):
    ids, X = _stack(updates)
    k = len(ids)
    if k < 3:
        raise AggregationError(f"FLAME needs at least 3 updates, got {k}")
    models = X + np.asarray(ctx.w_prev, dtype=np.float64)[None, :]
    keep = majority_cluster(_cosine_distances(models))
    norms = [l2_norm(X[i]) for i in keep]
    bound = float(np.median(norms))
    if bound == 0.0:
        agg = np.zeros(X.shape[1])
    else:
        agg = _kernels.mean_rows(np.stack([clip_to_norm(X[i], bound) for i in keep]))
    return _done(agg, [ids[i] for i in keep])


RULES: dict[str, Callable] = {
    "fedavg": fedavg,
    "multikrum": multi_krum,
    "median": coordinate_median,
    "trmean": trimmed_mean,
    "normbound": norm_bound,
    "fltrust": fltrust,
    "flame": flame,
}

# keys that wrap the whole training loop instead of a single round
LOOP_DEFENSES = ("flcert", "fldetector", "gmm-sign", "gmm-magnitude", "normalize-total")
DEFENSES = tuple(RULES) + LOOP_DEFENSES


def get_rule(name: str) -> Callable:
    try:
        return RULES[name]
    except KeyError:
        raise AggregationError(f"unknown aggregation rule {name!r}") from None


# ---------------------------------------------------------------------------
# FLCert
# ---------------------------------------------------------------------------

def flcert_groups(client_ids, G: int, rng: np.random.Generator) -> list[list[int]]:
    """Split clients into ``G`` disjoint, near-equal random groups."""
    client_ids = list(client_ids)
    if G < 1 or G > len(client_ids):
        raise AggregationError(f"cannot split {len(client_ids)} clients into {G} groups")
    perm = rng.permutation(len(client_ids))
    return [sorted(client_ids[i] for i in chunk) for chunk in np.array_split(perm, G)]


def plurality_vote(votes: np.ndarray, n_classes: int) -> np.ndarray:
    """``votes`` is (G, n); ties go to the lowest class id."""
    votes = np.asarray(votes, dtype=np.int64)
    counts = np.zeros((votes.shape[1], n_classes), dtype=np.int64)
    for row in votes:
        counts[np.arange(votes.shape[1]), row] += 1
    return np.argmax(counts, axis=1)


def flcert_predict(models, spec, X) -> np.ndarray:
    from .learner import predict
    votes = np.stack([predict(spec, w, X) for w in models])
    return plurality_vote(votes, spec.n_classes)


# ---------------------------------------------------------------------------
# FLDetector (simplified: a client's previous update is its predicted update)
# ---------------------------------------------------------------------------

def two_means_1d(x: np.ndarray, iters: int = 100):
    """Deterministic 1-D 2-means started at the extremes.

    Returns (labels, means, stds) with cluster 1 the higher-mean cluster.
    """
    x = np.asarray(x, dtype=np.float64)
    c = np.array([x.min(), x.max()])
    lab = None
    for _ in range(iters):
        new = (np.abs(x - c[1]) < np.abs(x - c[0])).astype(np.int64)
        if lab is not None and np.array_equal(new, lab):
            break
        lab = new
        for j in (0, 1):
            if np.any(lab == j):
                c[j] = x[lab == j].mean()
    stds = np.array([x[lab == j].std() if np.any(lab == j) else 0.0 for j in (0, 1)])
    return lab, c, stds


class FLDetector:
    """Tracks per-client suspicion across rounds of full participation."""

    def __init__(self, window: int = 10):
        self.window = window
        self.last: dict[int, np.ndarray] = {}
        self.history: dict[int, list[float]] = {}

    def observe(self, updates: Sequence[ModelUpdate]) -> None:
        dists = {}
        for u in updates:
            prev = self.last.get(u.client_id)
            if prev is not None:
                dists[u.client_id] = l2_norm(np.asarray(u.vector) - prev)
        total = sum(dists.values())
        for cid, dist in dists.items():
            self.history.setdefault(cid, []).append(dist / total if total > 0 else 0.0)
        for u in updates:
            self.last[u.client_id] = np.array(u.vector, dtype=np.float64)

    def scores(self) -> dict[int, float]:
        return {cid: float(np.mean(h[-self.window:])) for cid, h in self.history.items() if h}

    def detect(self) -> set:
        sc = self.scores()
        if len(sc) < 2:
            return set()
        cids = sorted(sc)
        x = np.array([sc[c] for c in cids])
        lab, means, stds = two_means_1d(x)
        if not abs(means[1] - means[0]) > max(stds):
            return set()
        return {c for c, l in zip(cids, lab) if l == 1}
