"""Dense ReLU network with a softmax head, trained by plain mini-batch SGD.

Parameters live in one flat vector: for each layer the weight matrix
(fan_in x fan_out, row-major) followed by its bias.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .core import ContractError, ShapeError, as_vector, l2_norm


@dataclass(frozen=True)
class ModelSpec:
    layer_sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ContractError(f"bad layer sizes {self.layer_sizes}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def n_params(self) -> int:
        s = self.layer_sizes
        return sum(s[i] * s[i + 1] + s[i + 1] for i in range(len(s) - 1))

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    local_epochs: int = 1
    batch_size: int = 10

    def __post_init__(self):
        if self.learning_rate < 0 or self.local_epochs < 1 or self.batch_size < 1:
            raise ContractError("learning_rate >= 0, local_epochs >= 1, batch_size >= 1")


def flatten(layers) -> np.ndarray:
    """``[(W0, b0), (W1, b1), ...]`` -> flat vector."""
    return np.concatenate([np.concatenate([np.ravel(W), np.ravel(b)]) for W, b in layers])


def unflatten(spec: ModelSpec, v) -> list[tuple[np.ndarray, np.ndarray]]:
    v = as_vector(v)
    if v.shape[0] != spec.n_params:
        raise ShapeError(f"vector has {v.shape[0]} entries, model needs {spec.n_params}")
    out, off = [], 0
    s = spec.layer_sizes
    for i in range(len(s) - 1):
        W = v[off:off + s[i] * s[i + 1]].reshape(s[i], s[i + 1]).copy()
        off += s[i] * s[i + 1]
        b = v[off:off + s[i + 1]].copy()
        off += s[i + 1]
        out.append((W, b))
    return out


def init_params(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    layers = []
    s = spec.layer_sizes
    for i in range(len(s) - 1):
        lim = np.sqrt(6.0 / (s[i] + s[i + 1]))
        layers.append((rng.uniform(-lim, lim, size=(s[i], s[i + 1])), np.zeros(s[i + 1])))
    return flatten(layers)


def loss_and_grad(spec: ModelSpec, w, X, y) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its flat gradient."""
    w = as_vector(w)
    y = np.asarray(y, dtype=np.int64)
    acts = _kernels._forward_np(w, list(spec.layer_sizes), np.asarray(X, dtype=np.float64))
    logits_prob = acts[-1]
    p = np.clip(logits_prob[np.arange(len(y)), y], 1e-300, None)
    loss = float(-np.mean(np.log(p)))
    return loss, _kernels._backward_np(w, list(spec.layer_sizes), acts, y)


def loss(spec: ModelSpec, w, X, y, dtype=np.float64) -> float:
    # log-sum-exp on raw logits; probabilities underflow for confident wrong answers
    w = np.asarray(w, dtype=dtype)
    if w.ndim != 1:
        raise ShapeError("parameter vector must be 1-D")
    sizes = list(spec.layer_sizes)
    h = np.asarray(X, dtype=dtype)
    off = 0
    for layer in range(len(sizes) - 1):
        fin, fout = sizes[layer], sizes[layer + 1]
        W = w[off:off + fin * fout].reshape(fin, fout)
        off += fin * fout
        z = h @ W + w[off:off + fout]
        off += fout
        h = np.maximum(z, 0.0) if layer < len(sizes) - 2 else z
    m = h.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(h - m).sum(axis=1))
    val = np.mean(lse - h[np.arange(len(y)), np.asarray(y)])
    return float(val) if dtype is np.float64 else val


def local_train(w_global, data, cfg: TrainConfig, rng: np.random.Generator,
                spec: ModelSpec | None = None) -> np.ndarray:
    """Run ``cfg.local_epochs`` epochs of SGD from ``w_global``; return the update."""
    X, y = data.features, data.labels
    n = len(y)
    if n == 0:
        raise ContractError("cannot train on an empty dataset")
    if spec is None:
        spec = ModelSpec((X.shape[1], int(getattr(data, "source", data).n_classes)))
    w0 = as_vector(w_global)
    orders = np.stack([rng.permutation(n) for _ in range(cfg.local_epochs)])
    w = w0.copy()
    _kernels.sgd_epochs(w, spec.layer_sizes, X, y, orders, cfg.learning_rate, cfg.batch_size)
    return w - w0


def predict(spec: ModelSpec, w, X) -> np.ndarray:
    return _kernels.predict_np(as_vector(w), spec.layer_sizes, np.asarray(X, dtype=np.float64))


def evaluate(spec: ModelSpec, w, test) -> float:
    """Fraction of misclassified test examples."""
    if len(test) == 0:
        raise ContractError("empty test set")
    return float(np.mean(predict(spec, w, test.features) != test.labels))


def gradient_check(spec: ModelSpec, w, X, y, h: float = 1e-5) -> float:
    """Largest relative gap between backprop and central differences.

    The differences are taken in extended precision where the platform has
    it: in float64 their rounding noise (eps * loss / h, about 1e-11) swamps
    gradients that are themselves near zero.
    """
    w = as_vector(w)
    _, g = loss_and_grad(spec, w, X, y)
    wx = w.astype(np.longdouble)
    worst = 0.0
    for i in range(w.shape[0]):
        old = wx[i]
        wx[i] = old + h
        up = loss(spec, wx, X, y, dtype=np.longdouble)
        wx[i] = old - h
        down = loss(spec, wx, X, y, dtype=np.longdouble)
        wx[i] = old
        fd = (up - down) / (2 * h)
        worst = max(worst, abs(g[i] - fd) / (abs(g[i]) + abs(fd) + 1e-8))
    return float(worst)


def random_direction(s, rng: np.random.Generator) -> np.ndarray:
    """Unit vector with signs ``s`` and random (half-normal) magnitudes."""
    s = as_vector(s)
    mags = np.abs(rng.standard_normal(s.shape[0]))
    return mags / l2_norm(mags) * s


def perturb_along_random_direction(w, s, noise_norm: float, rng: np.random.Generator):
    if noise_norm < 0:
        raise ContractError("noise_norm must be non-negative")
    w = as_vector(w)
    if noise_norm == 0:
        return w.copy()
    return w + noise_norm * random_direction(s, rng)
