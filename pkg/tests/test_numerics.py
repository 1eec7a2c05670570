import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pcam.numerics import (ContractViolation, finite_diff_grad, load_matrix,
                           matmul, rng_from_seed, save_matrix, softmax, substream)

# frozen from a 50-digit direct-exponentiation reference
SOFTMAX_123 = np.array([0.0900305731703804579980221,
                        0.2447284710547976524729596,
                        0.6652409557748218895290183])


def test_softmax_symmetry():
    assert np.allclose(softmax(np.array([0.0, 0.0])), [0.5, 0.5], atol=0)


def test_softmax_single_element():
    for x in (-1e300, -3.7, 0.0, 42.0, 1e300):
        assert softmax(np.array([x])) == pytest.approx([1.0], abs=0)


def test_softmax_reference_values():
    got = softmax(np.array([1.0, 2.0, 3.0]))
    assert np.max(np.abs(got - SOFTMAX_123)) < 1e-12


def test_softmax_rejects_empty_and_nonfinite():
    with pytest.raises(ContractViolation):
        softmax(np.array([]))
    with pytest.raises(ContractViolation):
        softmax(np.array([1.0, np.nan]))


def test_softmax_shift_invariance():
    x = rng_from_seed(3).normal(size=12)
    assert np.allclose(softmax(x), softmax(x + 1e6), atol=1e-12)


@given(arrays(np.float64, st.integers(1, 30),
              elements=st.floats(-100, 100, allow_nan=False)))
@settings(max_examples=200, deadline=None)
def test_softmax_sums_to_one(x):
    out = softmax(x)
    assert abs(out.sum() - 1.0) < 1e-12
    assert np.all(out > 0) and np.all(out <= 1.0)


def test_matmul_identity_and_zero():
    m = rng_from_seed(1).normal(size=(3, 4))
    assert np.array_equal(matmul(np.eye(3), m), m)
    assert np.array_equal(matmul(np.zeros((2, 3)), m), np.zeros((2, 4)))


def test_matmul_matches_triple_loop_oracle():
    rng = rng_from_seed(2)
    a, b = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    oracle = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            for k in range(2):
                oracle[i, j] += a[i, k] * b[k, j]
    assert np.max(np.abs(matmul(a, b) - oracle)) < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(ContractViolation):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_matmul_associativity(seed):
    rng = rng_from_seed(seed)
    a, b, c = (rng.normal(size=(3, 3)) for _ in range(3))
    left = matmul(matmul(a, b), c)
    right = matmul(a, matmul(b, c))
    assert np.linalg.norm(left - right) <= 1e-9 * max(np.linalg.norm(left), 1.0)


def test_finite_diff_sum_field():
    x = rng_from_seed(4).normal(size=(2, 3))
    grad = finite_diff_grad(lambda m: float(m.sum()), x, h=1e-5)
    assert np.allclose(grad, 1.0, atol=1e-9)


def test_finite_diff_constant_field():
    x = rng_from_seed(5).normal(size=(2, 2))
    assert np.allclose(finite_diff_grad(lambda m: 3.25, x, h=1e-5), 0.0, atol=0)


def test_finite_diff_quadratic():
    x = np.array([[1.0, 2.0]])
    grad = finite_diff_grad(lambda m: float((m ** 2).sum()), x, h=1e-5)
    assert np.max(np.abs(grad - np.array([[2.0, 4.0]]))) < 1e-6


def test_finite_diff_rejects_bad_h_and_nonfinite():
    with pytest.raises(ContractViolation):
        finite_diff_grad(lambda m: 0.0, np.ones((1, 1)), h=0.0)
    with pytest.raises(ContractViolation):
        finite_diff_grad(lambda m: float("nan"), np.ones((1, 1)), h=1e-5)


def test_rng_reproducibility():
    a = rng_from_seed(123).uniform(size=10_000)
    b = rng_from_seed(123).uniform(size=10_000)
    assert np.array_equal(a, b)
    c = rng_from_seed(124).uniform(size=10_000)
    assert not np.array_equal(a, c)


def test_substreams_are_independent_of_order():
    draws1 = [substream(9, i).uniform() for i in range(5)]
    draws2 = [substream(9, i).uniform() for i in reversed(range(5))]
    assert draws1 == list(reversed(draws2))
    assert len(set(draws1)) == 5


def test_matrix_text_round_trip(tmp_path):
    m = rng_from_seed(6).normal(size=(4, 7)) * 1e3
    path = tmp_path / "m.txt"
    save_matrix(path, m)
    header = path.read_text().splitlines()[0]
    assert header == "4 7"
    back = load_matrix(path)
    assert np.array_equal(back, m)  # 17 significant digits round-trip exactly


def test_matrix_text_rejects_nonfinite(tmp_path):
    with pytest.raises(ContractViolation):
        save_matrix(tmp_path / "bad.txt", np.array([[np.inf]]))
