"""Hot inner loops, each in a numba flavour and a plain numpy flavour.

The numba versions are used when numba imports and ``FLPOISON_DISABLE_NUMBA``
is unset (or "0"). Both flavours implement the same arithmetic; the
column statistics (median, trimmed mean) are bit-identical between them
because both sort and then accumulate rows in ascending order.
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def _numba_requested() -> bool:
    flag = os.environ.get("FLPOISON_DISABLE_NUMBA", "").strip().lower()
    return flag in ("", "0", "false", "no")


USE_NUMBA = numba is not None and _numba_requested()


# ---------------------------------------------------------------------------
# numpy flavour
# ---------------------------------------------------------------------------

def median_columns_np(X):
    k = X.shape[0]
    S = np.sort(X, axis=0)
    mid = k // 2
    if k % 2 == 1:
        return S[mid].copy()
    return (S[mid - 1] + S[mid]) / 2.0


def trimmed_mean_columns_np(X, m):
    k = X.shape[0]
    S = np.sort(X, axis=0)
    kept = S[m:k - m]
    acc = kept[0].copy()
    for r in range(1, kept.shape[0]):
        acc += kept[r]
    return acc / (k - 2 * m)


def mean_rows_np(X):
    acc = X[0].copy()
    for r in range(1, X.shape[0]):
        acc += X[r]
    return acc / X.shape[0]


def pairwise_sq_dists_np(X):
    # difference form rather than the Gram trick: exact zeros for identical rows
    diff = X[:, None, :] - X[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def count_flips_np(a, b):
    return int(np.count_nonzero((a * b) < 0.0))


def _forward_np(w, sizes, X):
    acts = [X]
    off = 0
    n_layers = len(sizes) - 1
    for layer in range(n_layers):
        fin, fout = sizes[layer], sizes[layer + 1]
        W = w[off:off + fin * fout].reshape(fin, fout)
        off += fin * fout
        b = w[off:off + fout]
        off += fout
        z = acts[-1] @ W + b
        if layer < n_layers - 1:
            acts.append(np.maximum(z, 0.0))
        else:
            z = z - z.max(axis=1, keepdims=True)
            e = np.exp(z)
            acts.append(e / e.sum(axis=1, keepdims=True))
    return acts


def _backward_np(w, sizes, acts, y):
    """Gradient of the mean cross-entropy, flat, same layout as ``w``."""
    B = y.shape[0]
    grad = np.empty_like(w)
    delta = acts[-1].copy()
    delta[np.arange(B), y] -= 1.0
    delta /= B
    offsets = []
    off = 0
    for layer in range(len(sizes) - 1):
        offsets.append(off)
        off += sizes[layer] * sizes[layer + 1] + sizes[layer + 1]
    for layer in range(len(sizes) - 2, -1, -1):
        fin, fout = sizes[layer], sizes[layer + 1]
        o = offsets[layer]
        W = w[o:o + fin * fout].reshape(fin, fout)
        grad[o:o + fin * fout] = (acts[layer].T @ delta).ravel()
        grad[o + fin * fout:o + fin * fout + fout] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ W.T) * (acts[layer] > 0.0)
    return grad


def sgd_epochs_np(w, sizes, X, y, orders, lr, batch):
    sizes = list(sizes)
    n = X.shape[0]
    for order in orders:
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            acts = _forward_np(w, sizes, X[idx])
            w -= lr * _backward_np(w, sizes, acts, y[idx])
    return w


def predict_np(w, sizes, X):
    return np.argmax(_forward_np(w, list(sizes), X)[-1], axis=1)


# ---------------------------------------------------------------------------
# numba flavour
# ---------------------------------------------------------------------------

if numba is not None:
    njit = numba.njit(cache=True, nogil=True)

    @njit
    def _sort_columns(X):
        """Each column of a copy of X sorted ascending.

        For the usual handful of participants an odd-even transposition
        network of row-wise min/max is branch-free and vectorises; larger k
        falls back to numpy's sort on the columns.
        """
        k, d = X.shape
        if k > 24:
            return np.sort(X.T.copy()).T.copy()
        S = X.copy()
        for p in range(k):
            for a in range(p % 2, k - 1, 2):
                ra = S[a]
                rb = S[a + 1]
                for j in range(d):
                    u = ra[j]
                    v = rb[j]
                    ra[j] = min(u, v)
                    rb[j] = max(u, v)
        return S

    @njit
    def median_columns_nb(X):
        k = X.shape[0]
        S = _sort_columns(X)
        mid = k // 2
        if k % 2 == 1:
            return S[mid].copy()
        return (S[mid - 1] + S[mid]) / 2.0

    @njit
    def trimmed_mean_columns_nb(X, m):
        k = X.shape[0]
        S = _sort_columns(X)
        acc = S[m].copy()
        for r in range(m + 1, k - m):
            acc += S[r]
        return acc / (k - 2 * m)

    @njit
    def mean_rows_nb(X):
        k, d = X.shape
        out = X[0].copy()
        for i in range(1, k):
            for j in range(d):
                out[j] += X[i, j]
        return out / k

    @njit
    def pairwise_sq_dists_nb(X):
        k, d = X.shape
        D = np.zeros((k, k))
        for a in range(k):
            for b in range(a + 1, k):
                s = 0.0
                for j in range(d):
                    t = X[a, j] - X[b, j]
                    s += t * t
                D[a, b] = s
                D[b, a] = s
        return D

    @njit
    def count_flips_nb(a, b):
        c = 0
        for j in range(a.shape[0]):
            if a[j] * b[j] < 0.0:
                c += 1
        return c

    @njit
    def _sgd_step_nb(w, sizes, Xb, yb, lr):
        # same arithmetic as the numpy flavour; np.dot goes to BLAS
        L = sizes.shape[0] - 1
        B = Xb.shape[0]
        offs = np.empty(L, dtype=np.int64)
        o = 0
        for layer in range(L):
            offs[layer] = o
            o += sizes[layer] * sizes[layer + 1] + sizes[layer + 1]
        acts = [Xb]
        for layer in range(L):
            fin, fout = sizes[layer], sizes[layer + 1]
            o = offs[layer]
            W = w[o:o + fin * fout].reshape((fin, fout))
            z = np.dot(acts[layer], W) + w[o + fin * fout:o + fin * fout + fout]
            if layer < L - 1:
                acts.append(np.maximum(z, 0.0))
            else:
                for r in range(B):
                    z[r] = np.exp(z[r] - z[r].max())
                    z[r] /= z[r].sum()
                acts.append(z)
        delta = acts[L].copy()
        for r in range(B):
            delta[r, yb[r]] -= 1.0
        delta /= B
        grad = np.empty_like(w)
        for layer in range(L - 1, -1, -1):
            fin, fout = sizes[layer], sizes[layer + 1]
            o = offs[layer]
            W = w[o:o + fin * fout].reshape((fin, fout))
            grad[o:o + fin * fout] = np.dot(acts[layer].T.copy(), delta).ravel()
            grad[o + fin * fout:o + fin * fout + fout] = delta.sum(axis=0)
            if layer > 0:
                delta = np.dot(delta, W.T.copy()) * (acts[layer] > 0.0)
        w -= lr * grad

    @njit
    def sgd_epochs_nb(w, sizes, X, y, orders, lr, batch):
        n = X.shape[0]
        for e in range(orders.shape[0]):
            for start in range(0, n, batch):
                idx = orders[e, start:min(start + batch, n)]
                _sgd_step_nb(w, sizes, X[idx], y[idx], lr)
        return w


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

def median_columns(X):
    X = np.ascontiguousarray(X, dtype=np.float64)
    return median_columns_nb(X) if USE_NUMBA else median_columns_np(X)


def trimmed_mean_columns(X, m):
    X = np.ascontiguousarray(X, dtype=np.float64)
    if USE_NUMBA:
        return trimmed_mean_columns_nb(X, int(m))
    return trimmed_mean_columns_np(X, int(m))


def mean_rows(X):
    X = np.ascontiguousarray(X, dtype=np.float64)
    return mean_rows_nb(X) if USE_NUMBA else mean_rows_np(X)


def pairwise_sq_dists(X):
    X = np.ascontiguousarray(X, dtype=np.float64)
    return pairwise_sq_dists_nb(X) if USE_NUMBA else pairwise_sq_dists_np(X)


def count_flips(a, b):
    """Dimensions whose sign reverses; a zero on either side is no flip."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    return count_flips_nb(a, b) if USE_NUMBA else count_flips_np(a, b)


def sgd_epochs(w, sizes, X, y, orders, lr, batch):
    """Mini-batch SGD on mean softmax cross-entropy, updating ``w`` in place."""
    if USE_NUMBA:
        return sgd_epochs_nb(w, np.asarray(sizes, dtype=np.int64),
                             np.ascontiguousarray(X, dtype=np.float64),
                             np.ascontiguousarray(y, dtype=np.int64),
                             np.ascontiguousarray(orders, dtype=np.int64),
                             float(lr), int(batch))
    return sgd_epochs_np(w, sizes, X, y, orders, lr, batch)
