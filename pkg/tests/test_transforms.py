import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import dense_hadamard
from privcomm.errors import DimensionError, KashinConvergenceError, OutOfRangeError
from privcomm.transforms import (
    KashinFrame,
    SignVector,
    fwht,
    hadamard_sign,
    kashin_decode,
    kashin_encode,
    randomized_round,
    round_to_signs,
)

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


def test_fwht_base_case():
    assert fwht([1.0]).tolist() == [1.0]


def test_fwht_two_point():
    np.testing.assert_allclose(fwht([1.0, 0.0]), [1 / math.sqrt(2), 1 / math.sqrt(2)], rtol=0, atol=1e-15)


def test_fwht_matches_dense_product_b64():
    v = np.random.default_rng(0).normal(size=64)
    np.testing.assert_allclose(fwht(v), dense_hadamard(64) @ v, rtol=0, atol=1e-12)


def test_fwht_acts_on_last_axis():
    v = np.random.default_rng(1).normal(size=(3, 5, 16))
    np.testing.assert_allclose(fwht(v), v @ dense_hadamard(16).T, atol=1e-12)


@pytest.mark.parametrize("B", [3, 6, 12, 0])
def test_fwht_rejects_non_power_of_two(B):
    with pytest.raises(DimensionError):
        fwht(np.ones(B))


def test_hadamard_sign_matches_dense():
    H = np.rint(dense_hadamard(32) * math.sqrt(32))
    rows, cols = np.meshgrid(np.arange(32), np.arange(32), indexing="ij")
    np.testing.assert_array_equal(hadamard_sign(rows, cols), H)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 14).flatmap(lambda k: arrays(float, 2**k, elements=finite)))
def test_fwht_involution_and_norm(v):
    w = fwht(v)
    scale = max(1.0, float(np.abs(v).max()))
    np.testing.assert_allclose(fwht(w), v, rtol=0, atol=1e-10 * scale)
    n_v, n_w = np.linalg.norm(v), np.linalg.norm(w)
    assert abs(n_v - n_w) <= 1e-10 * max(n_v, 1e-300) or n_v == 0


# ---------------------------------------------------------------- SignVector


def test_sign_vector_roundtrip():
    vals = np.array([0.5, -0.5, -0.5, 0.5, 0.5, 0.5, -0.5, 0.5, -0.5])
    sv = SignVector.from_values(vals, 0.5)
    assert len(sv) == 9 and sv.bits.size == 2
    np.testing.assert_array_equal(sv.values(), vals)


def test_sign_vector_rejects_wrong_magnitudes():
    with pytest.raises(OutOfRangeError):
        SignVector.from_values([0.5, 0.25], 0.5)
    with pytest.raises(OutOfRangeError):
        SignVector.from_signs([True], 0.0)


@given(st.lists(st.booleans(), min_size=1, max_size=200), st.floats(1e-6, 1e6))
def test_sign_vector_entries_have_magnitude_c(bits, c):
    sv = SignVector.from_signs(bits, c)
    assert np.all(np.abs(sv.values()) == c)
    np.testing.assert_array_equal(sv.positive, bits)


# ---------------------------------------------------------------- frames


@pytest.mark.parametrize("d", [1, 2, 8, 128])
@pytest.mark.parametrize("seed", [0, 7])
def test_frame_is_parseval(d, seed):
    frame = KashinFrame.for_dimension(d, sign_seed=seed)
    K = frame.matrix()
    assert K.shape == (d, 2 * d)
    np.testing.assert_allclose(K @ K.T, np.eye(d), rtol=0, atol=1e-10)


def test_frame_dimensions():
    frame = KashinFrame.for_dimension(100)
    assert (frame.d, frame.D) == (128, 256)
    with pytest.raises(DimensionError):
        KashinFrame(8, 8)
    with pytest.raises(DimensionError):
        KashinFrame(6, 16)


def test_frame_adjoint_is_transpose():
    frame = KashinFrame.for_dimension(16, sign_seed=3)
    rng = np.random.default_rng(0)
    r, xt = rng.normal(size=16), rng.normal(size=32)
    np.testing.assert_allclose(frame.adjoint(r), frame.matrix().T @ r, atol=1e-12)
    np.testing.assert_allclose(frame.apply(xt), frame.matrix() @ xt, atol=1e-12)


# ---------------------------------------------------------------- Kashin


def test_kashin_zero_is_fixed():
    frame = KashinFrame.for_dimension(8)
    np.testing.assert_array_equal(kashin_encode(np.zeros(8), frame), np.zeros(16))


def test_kashin_basis_vector_d8():
    C = 3.0
    frame = KashinFrame(8, 16)
    x = np.zeros(8)
    x[0] = C
    xt = kashin_encode(x, frame, bound=C)
    assert np.abs(xt).max() <= frame.level * C / 4
    # reconstruction checked with the dense matrix, not the fast operator
    assert np.linalg.norm(frame.matrix() @ xt - x) <= 1e-6 * C


def test_kashin_level_on_random_unit_vectors_d128():
    frame = KashinFrame.for_dimension(128)
    x = np.random.default_rng(5).normal(size=(1000, 128))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    xt = kashin_encode(x, frame, bound=1.0)
    assert math.sqrt(frame.D) * np.abs(xt).max() <= frame.level
    assert np.linalg.norm(kashin_decode(xt, frame) - x, axis=1).max() <= 1e-6


def test_kashin_adversarial_column_stays_within_level():
    # a restricted Hadamard column is the worst case for a frame without row signs
    frame = KashinFrame.for_dimension(128)
    x = dense_hadamard(256)[:128, 5]
    x /= np.linalg.norm(x)
    xt = kashin_encode(x, frame, bound=1.0)
    assert math.sqrt(frame.D) * np.abs(xt).max() <= frame.level
    assert np.linalg.norm(kashin_decode(xt, frame) - x) <= 1e-6


def test_kashin_pads_short_inputs():
    frame = KashinFrame.for_dimension(5)
    x = np.array([1.0, -2.0, 0.5, 0.0, 3.0])
    back = kashin_decode(kashin_encode(x, frame), frame)
    np.testing.assert_allclose(back[:5], x, atol=1e-9)
    np.testing.assert_allclose(back[5:], 0, atol=1e-9)


def test_kashin_rejects_norm_above_bound():
    frame = KashinFrame.for_dimension(8)
    with pytest.raises(OutOfRangeError):
        kashin_encode(np.ones(8), frame, bound=1.0)


def test_kashin_non_convergence_reports_residual():
    frame = KashinFrame(8, 16, level=0.5, iters=5)
    x = np.zeros(8)
    x[0] = 1.0
    with pytest.raises(KashinConvergenceError) as info:
        kashin_encode(x, frame)
    assert info.value.residual > 0 and info.value.iters == 5


def test_kashin_decode_dimension_check():
    with pytest.raises(DimensionError):
        kashin_decode(np.zeros(8), KashinFrame.for_dimension(8))


def test_kashin_decode_zero_and_linearity():
    frame = KashinFrame.for_dimension(16, sign_seed=2)
    np.testing.assert_array_equal(kashin_decode(np.zeros(32), frame), np.zeros(16))
    rng = np.random.default_rng(0)
    u, v = rng.normal(size=32), rng.normal(size=32)
    a, b = 1.7, -0.3
    np.testing.assert_allclose(
        kashin_decode(a * u + b * v, frame), a * kashin_decode(u, frame) + b * kashin_decode(v, frame), atol=1e-10
    )


@settings(max_examples=40, deadline=None)
@given(
    st.sampled_from([4, 16, 32]).flatmap(lambda d: arrays(float, d, elements=st.floats(-10, 10))),
    st.integers(0, 2**32),
)
def test_kashin_roundtrip_and_level(x, seed):
    frame = KashinFrame.for_dimension(x.size, sign_seed=seed)
    C = max(float(np.linalg.norm(x)), 1e-3)
    xt = kashin_encode(x, frame, bound=C)
    assert np.linalg.norm(kashin_decode(xt, frame) - x) <= 1e-6 * C
    assert np.abs(xt).max() <= frame.level * C / math.sqrt(frame.D) * (1 + 1e-12)


def test_kashin_positive_homogeneity():
    frame = KashinFrame.for_dimension(32)
    x = np.random.default_rng(3).normal(size=(4, 32))
    np.testing.assert_array_equal(kashin_encode(2 * x, frame), 2 * kashin_encode(x, frame))


# ---------------------------------------------------------------- rounding


def test_round_at_c_is_deterministic():
    out = randomized_round(np.full(100, 0.3), 0.3, np.random.default_rng(0))
    assert np.all(out.values() == 0.3)


def test_round_zero_is_fair():
    c, n = 1.0, 100_000
    vals = np.where(round_to_signs(np.zeros(n), c, np.random.default_rng(1)), c, -c)
    assert abs(vals.mean()) <= 3 * vals.std() / math.sqrt(n)


def test_round_third_mean():
    c, n = 2.0, 100_000
    vals = np.where(round_to_signs(np.full(n, c / 3), c, np.random.default_rng(2)), c, -c)
    assert abs(vals.mean() - c / 3) <= 3 * vals.std() / math.sqrt(n)


def test_round_rejects_out_of_range():
    with pytest.raises(OutOfRangeError):
        randomized_round(np.array([0.5, 1.2]), 1.0, np.random.default_rng(0))
    with pytest.raises(OutOfRangeError):
        round_to_signs(np.array([np.nan]), 1.0, np.random.default_rng(0))


def test_round_single_vector_only():
    with pytest.raises(DimensionError):
        randomized_round(np.zeros((2, 2)), 1.0, np.random.default_rng(0))


@settings(max_examples=25, deadline=None)
@given(arrays(float, 6, elements=st.floats(-1, 1)), st.integers(0, 2**32))
def test_round_is_unbiased_with_bounded_variance(xt, seed):
    c, n = 1.0, 20_000
    vals = np.where(round_to_signs(np.broadcast_to(xt, (n, 6)), c, np.random.default_rng(seed)), c, -c)
    mean, var = vals.mean(axis=0), vals.var(axis=0)
    se = np.sqrt(np.maximum(1 - xt**2, 1e-12) / n)
    # 4-sigma here: hypothesis runs many examples of 6 coordinates each
    assert np.all(np.abs(mean - xt) <= 4 * se + 1e-12)
    assert np.all(var <= c**2 + 1e-12)
