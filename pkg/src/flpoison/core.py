"""Flat parameter-vector arithmetic.

Vectors are 1-D float64 numpy arrays. Sign vectors hold exactly +1.0/-1.0.
"""

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible lengths."""


class ContractError(ValueError):
    """An input violates an operation's precondition."""


class NonFiniteError(ArithmeticError):
    """A NaN or infinity appeared in a parameter vector."""


def as_vector(a) -> np.ndarray:
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"expected a 1-D vector, got shape {v.shape}")
    return v


def check_finite(a: np.ndarray, what: str = "vector") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{what} contains NaN or infinite entries")
    return a


def _same_length(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")


def add(a, b) -> np.ndarray:
    a, b = as_vector(a), as_vector(b)
    _same_length(a, b)
    return a + b


def scale(a, c: float) -> np.ndarray:
    return as_vector(a) * float(c)


def hadamard_sign(k, s) -> np.ndarray:
    """Magnitudes ``k`` (non-negative) carried in the directions ``s``."""
    k, s = as_vector(k), as_vector(s)
    _same_length(k, s)
    if np.any(k < 0):
        raise ContractError("magnitude vector has negative entries")
    return k * s


def l2_norm(a) -> float:
    a = as_vector(a)
    if a.size == 0:
        return 0.0
    # rescale by the largest entry so huge poisoned models do not overflow
    big = float(np.max(np.abs(a)))
    if big == 0.0 or not np.isfinite(big):
        return big
    r = a / big
    return big * float(np.sqrt(np.dot(r, r)))


def sign_of(a) -> np.ndarray:
    """Elementwise sign with sign(0) = +1."""
    a = as_vector(a)
    return np.where(a < 0, -1.0, 1.0)


def sign_match_fraction(a, s) -> float:
    a, s = as_vector(a), as_vector(s)
    _same_length(a, s)
    if a.size == 0:
        return 1.0
    return float(np.count_nonzero(sign_of(a) == s)) / a.size


def random_signs(rng: np.random.Generator, d: int) -> np.ndarray:
    return np.where(rng.random(d) < 0.5, -1.0, 1.0)


def cosine(a, b) -> float:
    na, nb = l2_norm(a), l2_norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(as_vector(a) / na, as_vector(b) / nb))
