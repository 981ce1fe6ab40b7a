import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dense_hadamard, rhr_pre_noise_cells
from privcomm.accountant import EPS1_CAP, PrivacyBudget, audit_subsampled_gaussian, gaussian_sigma
from privcomm.errors import ConfigError, DimensionError, OutOfRangeError, ProtocolViolation
from privcomm.freq_est import (
    OneHotItem,
    RhrReport,
    RhrShape,
    cell_variance,
    histogram,
    l1_error_bound,
    l2_error_bound,
    pad_domain,
    rhr_aggregate,
    rhr_calibrate,
    rhr_calibration,
    rhr_client_encode,
    rhr_effective_sensitivity,
    rhr_report_for,
    rhr_run,
    rhr_run_indices,
    rhr_sensitivity,
    simulate_rhr,
)
from privcomm.rng import Seeds, shared_uniform_rows

BUDGET = PrivacyBudget(1.0, 1e-5)
# frozen after the forward audit below certified it
RHR_SIGMA2_N100_D16_B3 = 0.35982810443142


def gen(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def items_of(indices, d):
    return [OneHotItem(int(t), d) for t in indices]


# ---------------------------------------------------------------- types


def test_one_hot_item():
    it = OneHotItem(3, 8)
    v = it.vector()
    assert v.sum() == 1 and v[3] == 1 and np.count_nonzero(v) == 1
    with pytest.raises(DimensionError):
        OneHotItem(0, 6)
    with pytest.raises(OutOfRangeError):
        OneHotItem(8, 8)


def test_shape_chunks_cover_domain():
    for d in (1, 2, 16, 1024):
        for b in range(1, int(math.log2(d)) + 2):
            s = RhrShape(d, b)
            assert s.chunks * s.B == d
    with pytest.raises(ConfigError):
        RhrShape(16, 6)
    with pytest.raises(ConfigError):
        RhrShape(16, 0)


def test_pad_domain():
    assert pad_domain(1000) == 1024 and pad_domain(16) == 16 and pad_domain(1) == 1


def test_payload_is_b_bits():
    b = 4
    for chunk in range(2 ** (b - 1)):
        for sign in (-1, 1):
            p = RhrReport(0, chunk, sign).payload(b)
            assert 0 <= p < 2**b and p >> 1 == chunk and (p & 1) == (sign > 0)


# ---------------------------------------------------------------- encoding


def test_hand_evaluated_report():
    # d=4, b=2 -> B=2; item 2 sits in chunk 1 at offset 0 and H_2[0, 0] > 0
    rep = rhr_report_for(OneHotItem(2, 4), 2, 0)
    assert (rep.chunk, rep.coordinate, rep.sign) == (1, 0, 1)
    assert rhr_report_for(OneHotItem(3, 4), 2, 1).sign == -1


def test_reports_follow_dense_hadamard_signs():
    d, b = 16, 2
    H = dense_hadamard(8)
    for t in range(d):
        for j in range(8):
            rep = rhr_report_for(OneHotItem(t, d), b, j)
            assert rep.chunk == t // 8 and rep.sign == np.sign(H[j, t % 8])


def test_degenerate_single_row_reports_every_client():
    d = 8
    b = 4  # B = 1
    for i, t in enumerate(range(d)):
        reps = rhr_client_encode(OneHotItem(t, d), b, 5, i)
        assert len(reps) == 1 and reps[0].chunk == t and reps[0].sign == 1


def test_expected_one_report_per_client():
    d, b, n = 64, 2, 20_000
    counts = [len(rhr_client_encode(OneHotItem(0, d), b, 17, i)) for i in range(n)]
    B = 32
    se = math.sqrt((1 - 1 / B)) / math.sqrt(n)
    assert abs(np.mean(counts) - 1) <= 3 * se


# ---------------------------------------------------------------- aggregation


@pytest.mark.parametrize("sigma2", [0.0, 0.3])
def test_protocol_and_fast_path_agree(sigma2):
    d, b, n = 16, 3, 40
    idx = gen(1).integers(0, d, n)
    seeds = Seeds.derive(4)
    reports = [rhr_client_encode(it, b, seeds.sampling, i) for i, it in enumerate(items_of(idx, d))]
    slow = rhr_aggregate(reports, n, d, b, sigma2, gen(seeds.noise))
    fast = rhr_run_indices(idx, d, b, seeds, sigma2)
    np.testing.assert_array_equal(slow.estimate, fast.estimate)
    assert slow.stats.messages_total == fast.stats.messages_total == sum(len(r) for r in reports)
    assert slow.stats.bits_total == b * slow.stats.messages_total


def test_degenerate_chunking_is_exact_histogram():
    d, b, n = 16, 5, 50
    idx = gen(2).integers(0, d, n)
    out = rhr_run_indices(idx, d, b, Seeds.derive(0), 0.0)
    np.testing.assert_allclose(out.estimate, np.bincount(idx, minlength=d) / n, rtol=0, atol=1e-12)


def test_same_item_everywhere_is_exact():
    d = 8
    out = rhr_run(items_of([5] * 30, d), BUDGET, 4, Seeds.derive(1), private=False)
    np.testing.assert_allclose(out.estimate, np.eye(d)[5], atol=1e-12)


def test_aggregate_rejects_malformed_reports():
    with pytest.raises(ProtocolViolation):
        rhr_aggregate([[RhrReport(4, 0, 1)]], 1, 16, 3, 0.0, gen())
    with pytest.raises(ProtocolViolation):
        rhr_aggregate([[RhrReport(0, 4, 1)]], 1, 16, 3, 0.0, gen())
    with pytest.raises(ProtocolViolation):
        rhr_aggregate([[RhrReport(0, 0, 0)]], 1, 16, 3, 0.0, gen())


def test_pre_noise_cells_match_definition():
    d, b, n = 16, 3, 25
    idx = gen(3).integers(0, d, n)
    seeds = Seeds.derive(2)
    shape = RhrShape(d, b)
    mask = shared_uniform_rows(seeds.sampling, n, shape.B) < 1 / shape.B
    cells = rhr_pre_noise_cells(idx, d, b, mask, n)
    # the estimate is the inverse orthonormal transform of the cells scaled to orthonormal form
    expected = np.concatenate([dense_hadamard(shape.B) @ (row / math.sqrt(shape.B)) for row in cells])
    out = rhr_run_indices(idx, d, b, seeds, 0.0)
    np.testing.assert_allclose(out.estimate, expected, atol=1e-12)


# ---------------------------------------------------------------- variance and unbiasedness


def test_variance_identity_d8_b2():
    d, b, n = 8, 2, 30
    idx = gen(10).integers(0, d, n)
    est = simulate_rhr(idx, d, b, 100_000, gen(11), sigma2=0.02)
    emp = est.var(axis=0, ddof=1)
    exact = cell_variance(idx, d, b, 0.02)
    np.testing.assert_allclose(emp, exact, rtol=0.05)


def test_variance_below_analytic_bound():
    d, b, n = 16, 2, 40
    idx = gen(12).integers(0, d, n)
    B = RhrShape(d, b).B
    per_chunk = np.bincount(idx // B, minlength=2)
    assert np.all(cell_variance(idx, d, b) <= np.repeat(per_chunk / n**2, B))


def test_rhr_is_unbiased():
    d, b, n = 16, 3, 30
    idx = gen(13).integers(0, d, n)
    est = simulate_rhr(idx, d, b, 40_000, gen(14), sigma2=0.05)
    se = est.std(axis=0, ddof=1) / math.sqrt(est.shape[0])
    truth = np.bincount(idx, minlength=d) / n
    assert np.all(np.abs(est.mean(axis=0) - truth) <= 4 * se)


def test_histogram():
    np.testing.assert_array_equal(histogram(items_of([0, 0, 3], 4), 4), [2 / 3, 0, 0, 1 / 3])


# ---------------------------------------------------------------- sensitivity and calibration


def test_sensitivity_values():
    assert rhr_sensitivity(100, 16, 3) == pytest.approx(4 / 100, rel=1e-15)
    assert rhr_sensitivity(100, 16, 3, "replace_one") == pytest.approx(8 / 100, rel=1e-15)
    assert rhr_effective_sensitivity(100, 16, 3) == pytest.approx(0.04)
    with pytest.raises(ValueError):
        rhr_sensitivity(10, 4, 2, "swap")


@pytest.mark.parametrize("d,b", [(4, 2), (8, 2), (8, 3), (16, 3)])
def test_sensitivity_covers_every_neighbouring_pair(d, b):
    # exhaustive over datasets of 3 clients, all removals, every sampling pattern
    n = 3
    B = RhrShape(d, b).B
    bound = rhr_effective_sensitivity(n, d, b)
    worst = 0.0
    masks = list(itertools.product([False, True], repeat=B))
    for data in itertools.product(range(d), repeat=n):
        for pattern in itertools.product(range(len(masks)), repeat=n):
            mask = np.array([masks[p] for p in pattern])
            full = rhr_pre_noise_cells(data, d, b, mask, n)
            for drop in range(n):
                m2 = mask.copy()
                m2[drop] = False
                diff = full - rhr_pre_noise_cells(data, d, b, m2, n)
                worst = max(worst, float(np.linalg.norm(diff, axis=0).max()))
        if d > 4:
            break  # the row structure is data-independent beyond one dataset
    assert worst <= bound * (1 + 1e-12)
    assert worst == pytest.approx(bound, rel=1e-12)


def test_calibration_golden_and_audit():
    sigma2 = rhr_calibrate(BUDGET, 100, 16, 3)
    assert sigma2 == pytest.approx(RHR_SIGMA2_N100_D16_B3, rel=1e-12)
    audit = audit_subsampled_gaussian(sigma2, 1 / 4, 4, 0.04, 1e-5)
    assert audit.within(BUDGET)


def test_calibration_single_row_collapses():
    d, b, n = 16, 5, 100
    cal = rhr_calibration(BUDGET, n, d, b)
    assert cal.gamma == 1.0 and cal.coords == 1
    assert cal.sigma2_sum == pytest.approx(gaussian_sigma(1 / n, PrivacyBudget(cal.eps1, cal.delta1)), rel=1e-14)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.1, 5), st.sampled_from([(16, 2), (16, 3), (64, 4)]))
def test_calibration_decreasing_in_eps(eps, shape):
    d, b = shape
    lo = rhr_calibration(PrivacyBudget(eps, 1e-6), 200, d, b)
    hi = rhr_calibration(PrivacyBudget(eps * 1.3, 1e-6), 200, d, b)
    # strict until the per-coordinate budget reaches the Gaussian lemma's cap, flat beyond
    if lo.eps1 < EPS1_CAP:
        assert hi.sigma2_sum < lo.sigma2_sum
    else:
        assert hi.sigma2_sum == lo.sigma2_sum


def test_run_records_calibration_and_bits():
    d, b, n = 16, 3, 200
    idx = gen(5).integers(0, d, n)
    out = rhr_run(items_of(idx, d), BUDGET, b, Seeds.derive(6))
    assert out.calibration.sigma2_sum == pytest.approx(rhr_calibrate(BUDGET, n, d, b))
    assert out.stats.accounted_eps <= 1.0 * (1 + 1e-9)
    assert out.stats.bits_total == b * out.stats.messages_total
    with pytest.raises(TypeError):
        rhr_run(idx, BUDGET, b, Seeds.derive(6))


def test_error_bounds_formulae():
    assert l2_error_bound(200, 16, 3, 0.5) == pytest.approx(4 / 200 + 16 * 0.5 / 4)
    assert l1_error_bound(200, 16, 3, 0.5) == pytest.approx(math.sqrt(16 * 4 / 200 + 256 * 0.5 / 4))
