import math

import numpy as np
import pytest
from scipy import optimize, stats

from sdiqrng.estimation import (
    InsufficientDataError,
    Tally,
    WrongVariantError,
    clopper_pearson,
    conditional_tables,
    observed_efficiency,
    p_prime_average,
    probability_bounds,
    relabel_success,
    success_matrix,
    success_probability,
    tally,
    write_bounds,
    BOUNDS_HEADER,
)
from sdiqrng.protocol import EMPTY, ProtocolConfig, QRAC_SUCCESS, RoundLog, run_protocol


def make_log(x, y, z, b, blocking=0.5):
    x, y, z, b = (np.asarray(v) for v in (x, y, z, b))
    cfgless = RoundLog(
        config=None,
        x=x.astype(np.uint8),
        y=y.astype(float),
        z=z.astype(np.uint8),
        blocked=y <= blocking,
        b=b.astype(np.int8),
    )
    return cfgless


def synthetic_tally(cell_counts):
    """cell_counts[x][z] = (n0, n1, n_empty)."""
    counts = np.array(cell_counts, dtype=np.int64)
    return Tally(counts=counts, n_blocked=0)


def cp_bisection_oracle(k, n, alpha):
    """Exact binomial-tail inversion, independent of the beta-quantile route."""
    lo = 0.0
    if k > 0:
        lo = optimize.brentq(lambda p: stats.binom.sf(k - 1, n, p) - alpha / 2, 1e-12, 1 - 1e-12, xtol=1e-12)
    hi = 1.0
    if k < n:
        hi = optimize.brentq(lambda p: stats.binom.cdf(k, n, p) - alpha / 2, 1e-12, 1 - 1e-12, xtol=1e-12)
    return lo, hi


class TestTally:
    def test_all_blocked_is_an_error(self):
        log = make_log([0, 1, 2], [0.1, 0.2, 0.3], [0, 1, 0], [EMPTY] * 3)
        with pytest.raises(InsufficientDataError):
            tally(log)

    def test_conservation(self):
        rng = np.random.default_rng(0)
        n = 100
        log = make_log(
            rng.integers(0, 4, n), np.full(n, 0.9), rng.integers(0, 2, n),
            rng.integers(0, 2, n),
        )
        t = tally(log)
        assert t.counts.sum() == n
        assert t.n_unblocked == n
        assert t.n_blocked == 0

    def test_blocked_counted_separately(self):
        log = make_log([0, 0, 1], [0.1, 0.9, 0.9], [0, 0, 1], [EMPTY, 1, 0])
        t = tally(log)
        assert t.n_blocked == 1
        assert t.n_unblocked == 2

    def test_merge_associative(self):
        rng = np.random.default_rng(1)
        parts = []
        for _ in range(3):
            n = 50
            parts.append(
                tally(make_log(rng.integers(0, 4, n), np.full(n, 0.9),
                               rng.integers(0, 2, n), rng.integers(0, 2, n)))
            )
        merged = parts[0] + parts[1] + parts[2]
        assert merged.counts.sum() == 150

    def test_heavy_blocking_regime(self):
        log = run_protocol(ProtocolConfig(blocking=0.99, channel_efficiency=1.0,
                                          n_rounds=10**6, seed=4))
        t = tally(log)
        se = math.sqrt(0.99 * 0.01 * 10**6)
        assert abs(t.n_unblocked - 10**4) < 5 * se


class TestConditionalTables:
    def test_normalization_example(self):
        counts = np.zeros((4, 2, 3), dtype=np.int64)
        counts[:, :, :] = (40, 10, 950)
        t = Tally(counts=counts, n_blocked=0)
        raw, det = conditional_tables(t)
        assert raw.probs[0, 0] == pytest.approx((0.04, 0.01, 0.95))
        assert det.probs[0, 0, :2] == pytest.approx((0.8, 0.2))
        assert det.probs[0, 0, 2] == 0.0

    def test_rows_sum_to_one(self):
        log = run_protocol(ProtocolConfig(blocking=0.2, channel_efficiency=0.5,
                                          n_rounds=50000, seed=9))
        raw, det = conditional_tables(tally(log))
        assert np.allclose(raw.probs.sum(axis=2), 1.0, atol=1e-12)
        assert np.allclose(det.probs.sum(axis=2), 1.0, atol=1e-12)

    def test_detected_is_renormalized_raw(self):
        log = run_protocol(ProtocolConfig(blocking=0.2, channel_efficiency=0.5,
                                          n_rounds=50000, seed=9))
        raw, det = conditional_tables(tally(log))
        det_mass = raw.probs[:, :, :2].sum(axis=2, keepdims=True)
        assert np.allclose(raw.probs[:, :, :2] / det_mass, det.probs[:, :, :2], atol=1e-12)

    def test_full_efficiency_collapses_variants(self):
        log = run_protocol(ProtocolConfig(blocking=0.0, channel_efficiency=1.0,
                                          n_rounds=20000, seed=2))
        raw, det = conditional_tables(tally(log))
        assert np.allclose(raw.probs, det.probs, atol=1e-12)

    def test_empty_cell_names_the_cell(self):
        counts = np.ones((4, 2, 3), dtype=np.int64)
        counts[2, 1] = (0, 0, 5)  # unblocked but never detected
        t = Tally(counts=counts, n_blocked=0)
        with pytest.raises(InsufficientDataError, match=r"x=10, z=1"):
            conditional_tables(t)


class TestSuccessConvention:
    def test_relabel_examples(self):
        # x=01, z=1 targets bit 1; outcome 1 is a success (relabels to 0)
        assert relabel_success(np.array([1]), np.array([1]), np.array([1]))[0] == 0
        assert relabel_success(np.array([0]), np.array([0]), np.array([0]))[0] == 0

    def test_relabel_is_involution(self):
        rng = np.random.default_rng(3)
        b = rng.integers(0, 2, 1000)
        x = rng.integers(0, 4, 1000)
        z = rng.integers(0, 2, 1000)
        assert np.array_equal(relabel_success(relabel_success(b, x, z), x, z), b)

    def test_success_probability_reads_target_cell(self):
        counts = np.zeros((4, 2, 3), dtype=np.int64)
        counts[:, :, 0] = 10
        counts[:, :, 1] = 10
        counts[1, 1] = (20, 80, 0)  # x=01, z=1: target bit is 1
        t = Tally(counts=counts, n_blocked=0)
        _, det = conditional_tables(t)
        assert success_probability(det, 1, 1) == pytest.approx(0.8)
        assert success_probability(det, 0, 0) == pytest.approx(0.5)

    def test_raw_variant_rejected(self):
        log = run_protocol(ProtocolConfig(blocking=0.0, channel_efficiency=1.0,
                                          n_rounds=5000, seed=1))
        raw, _ = conditional_tables(tally(log))
        with pytest.raises(WrongVariantError):
            success_probability(raw, 0, 0)

    def test_honest_table_hits_qrac_value(self):
        log = run_protocol(ProtocolConfig(blocking=0.0, channel_efficiency=1.0,
                                          n_rounds=10**6, seed=12))
        _, det = conditional_tables(tally(log))
        m = success_matrix(det)
        assert np.all(np.abs(m - QRAC_SUCCESS) < 5 * math.sqrt(QRAC_SUCCESS * 0.147 / 125000))


class TestAverageAndEfficiency:
    def test_average_of_equal_entries(self):
        counts = np.zeros((4, 2, 3), dtype=np.int64)
        counts[:, :, 0] = 8536
        counts[:, :, 1] = 10000 - 8536
        t = Tally(counts=counts, n_blocked=0)
        _, det = conditional_tables(t)
        avg = p_prime_average(det)
        # half the cells target bit 1, where success sits in the b=1 slot
        assert avg == pytest.approx((0.8536 + 0.1464) / 2)

    def test_average_mixed(self):
        counts = np.zeros((4, 2, 3), dtype=np.int64)
        for x in range(4):
            for z in range(2):
                t_bit = (x >> 1) & 1 if z == 0 else x & 1
                succ = 100 if (x, z) in ((0, 0), (0, 1), (1, 0), (1, 1)) else 50
                counts[x, z, t_bit] = succ
                counts[x, z, 1 - t_bit] = 100 - succ
        t = Tally(counts=counts, n_blocked=0)
        _, det = conditional_tables(t)
        assert p_prime_average(det) == pytest.approx(0.75)

    def test_observed_efficiency_exact_ratio(self):
        counts = np.zeros((4, 2, 3), dtype=np.int64)
        counts[:, :, 0] = 50
        counts[:, :, 1] = 25
        counts[:, :, 2] = 9925 / 8 + 0  # fill below instead
        counts[:, :, 2] = 1175
        t = Tally(counts=counts, n_blocked=0)
        # 600 detected of 10000 unblocked
        assert t.n_detected == 600
        assert t.n_unblocked == 10000
        assert observed_efficiency(t) == 600 / 10000

    def test_full_detection(self):
        counts = np.zeros((4, 2, 3), dtype=np.int64)
        counts[:, :, 0] = 5
        t = Tally(counts=counts, n_blocked=3)
        assert observed_efficiency(t) == 1.0

    def test_simulated_efficiency(self):
        log = run_protocol(ProtocolConfig(blocking=0.0, channel_efficiency=0.06,
                                          n_rounds=10**6, seed=6))
        t = tally(log)
        se = math.sqrt(0.06 * 0.94 / 10**6)
        assert abs(observed_efficiency(t) - 0.06) < 5 * se

    def test_paper_regime_average(self):
        log = run_protocol(ProtocolConfig(blocking=0.99, channel_efficiency=0.06,
                                          n_rounds=10**6, seed=13))
        _, det = conditional_tables(tally(log))
        # ~600 detections spread over 8 cells: generous statistical allowance
        assert p_prime_average(det) == pytest.approx(QRAC_SUCCESS, abs=0.1)


class TestClopperPearson:
    def test_zero_successes(self):
        lo, hi = clopper_pearson(0, 50, 0.01)
        assert lo == 0.0
        assert 0 < hi < 1

    def test_all_successes(self):
        lo, hi = clopper_pearson(50, 50, 0.01)
        assert hi == 1.0
        assert 0 < lo < 1

    @pytest.mark.parametrize("k,n", [(3, 10), (85, 100), (8536, 10000), (1, 1000)])
    def test_matches_binomial_tail_oracle(self, k, n):
        alpha = 0.00125
        lo, hi = clopper_pearson(k, n, alpha)
        olo, ohi = cp_bisection_oracle(k, n, alpha)
        assert lo == pytest.approx(olo, abs=1e-9)
        assert hi == pytest.approx(ohi, abs=1e-9)

    def test_width_at_paper_scale(self):
        lo, hi = clopper_pearson(8536, 10000, 0.01 / 8)
        width = hi - lo
        assert 0.015 < width < 0.027  # ~2 * 3.2 * sqrt(p q / n)


class TestProbabilityBounds:
    def build(self, seed=0, n_rounds=200000, conf=0.99):
        log = run_protocol(ProtocolConfig(blocking=0.0, channel_efficiency=1.0,
                                          n_rounds=n_rounds, seed=seed))
        return probability_bounds(tally(log), conf)

    def test_orders_and_contains_point(self):
        b = self.build()
        assert np.all(b.lo <= b.point) and np.all(b.point <= b.hi)

    def test_insufficient_cell(self):
        counts = np.zeros((4, 2, 3), dtype=np.int64)
        counts[:, :, 0] = 5
        counts[3, 1] = (0, 0, 9)
        with pytest.raises(InsufficientDataError, match=r"x=11, z=1"):
            probability_bounds(Tally(counts=counts, n_blocked=0), 0.99)

    def test_poisson_mode_is_separate(self):
        log = run_protocol(ProtocolConfig(blocking=0.0, channel_efficiency=1.0,
                                          n_rounds=20000, seed=5))
        t = tally(log)
        cp = probability_bounds(t, 0.99)
        po = probability_bounds(t, 0.99, method="poisson")
        assert cp.method == "clopper-pearson"
        assert po.method == "poisson"
        assert not np.allclose(cp.lo, po.lo)

    def test_simultaneous_coverage(self):
        # 1000 honest datasets; all-8-cells coverage must reach the stated level
        rng = np.random.default_rng(42)
        confidence = 0.9
        n_data = 1000
        hits = 0
        n_per_cell = 250
        for _ in range(n_data):
            counts = np.zeros((4, 2, 3), dtype=np.int64)
            succ = rng.binomial(n_per_cell, QRAC_SUCCESS, size=(4, 2))
            for x in range(4):
                for z in range(2):
                    t_bit = (x >> 1) & 1 if z == 0 else x & 1
                    counts[x, z, t_bit] = succ[x, z]
                    counts[x, z, 1 - t_bit] = n_per_cell - succ[x, z]
            b = probability_bounds(Tally(counts=counts, n_blocked=0), confidence)
            hits += bool(np.all(b.lo <= QRAC_SUCCESS) and np.all(b.hi >= QRAC_SUCCESS))
        # one-sided binomial test at the 1% level
        pvalue = stats.binomtest(hits, n_data, confidence, alternative="less").pvalue
        assert pvalue > 0.01

    def test_csv_output(self, tmp_path):
        b = self.build(n_rounds=20000)
        path = tmp_path / "bounds.csv"
        write_bounds(b, path)
        lines = path.read_text().splitlines()
        assert lines[0] == BOUNDS_HEADER
        assert len(lines) == 9
        first = lines[1].split(",")
        assert first[0] == "00" and first[1] == "0"
        assert int(first[5]) > 0
