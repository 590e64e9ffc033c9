import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flpoison.core import (
    ContractError, ShapeError, add, hadamard_sign, l2_norm, scale, sign_match_fraction, sign_of,
)

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
vectors = arrays(np.float64, st.integers(1, 40), elements=finite)


def test_add():
    np.testing.assert_array_equal(add([1, 2], [0, 0]), [1, 2])
    np.testing.assert_array_equal(add([1, -1], [-1, 1]), [0, 0])
    np.testing.assert_array_equal(add([0.5, 0.25], [0.5, 0.75]), [1.0, 1.0])
    with pytest.raises(ShapeError):
        add([1, 2], [1, 2, 3])


def test_hadamard_sign():
    np.testing.assert_array_equal(hadamard_sign([2, 3], [1, -1]), [2, -3])
    np.testing.assert_array_equal(hadamard_sign([0, 0], [-1, 1]), [0, 0])
    np.testing.assert_array_equal(hadamard_sign([1, 1, 1], [-1, -1, 1]), [-1, -1, 1])
    with pytest.raises(ContractError):
        hadamard_sign([-1, 1], [1, 1])
    with pytest.raises(ShapeError):
        hadamard_sign([1, 1], [1])


def test_l2_norm():
    assert l2_norm([3, 4]) == 5.0
    assert l2_norm(np.zeros(7)) == 0.0
    assert l2_norm([1, 1, 1, 1]) == 2.0


def test_l2_norm_does_not_overflow():
    assert l2_norm([1e200, 1e200]) == pytest.approx(np.sqrt(2) * 1e200, rel=1e-14)


def test_sign_of_tie_rule():
    np.testing.assert_array_equal(sign_of([0.1, -0.2]), [1, -1])
    np.testing.assert_array_equal(sign_of([0, 0]), [1, 1])
    np.testing.assert_array_equal(sign_of([-5, 0, 3]), [-1, 1, 1])


def test_sign_match_fraction():
    assert sign_match_fraction([1, -1], [1, -1]) == 1.0
    assert sign_match_fraction([1, 1], [-1, -1]) == 0.0
    assert sign_match_fraction([1, -1, 2, -2], [1, 1, -1, -1]) == 0.5


@given(vectors, st.floats(-1e3, 1e3, allow_nan=False))
def test_norm_is_homogeneous(a, c):
    expected = abs(c) * l2_norm(a)
    assert l2_norm(scale(a, c)) == pytest.approx(expected, rel=1e-12, abs=1e-300)


@given(arrays(np.float64, 16, elements=st.floats(0, 1e6)),
       arrays(np.float64, 16, elements=st.sampled_from([-1.0, 1.0])))
def test_hadamard_sign_keeps_direction(k, s):
    out = sign_of(hadamard_sign(k, s))
    pos = k > 0
    np.testing.assert_array_equal(out[pos], s[pos])


@settings(max_examples=50)
@given(vectors)
def test_vector_matches_its_own_signs(a):
    assert sign_match_fraction(a, sign_of(a)) == 1.0
