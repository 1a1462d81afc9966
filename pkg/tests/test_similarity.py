import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from volreg import kernels
from volreg.similarity import (SimilarityReport, cc_global, joint_histogram,
                               local_cc, mi, msd, nmi, objective_gradient,
                               objective_value, similarity_report)
from volreg.volume import Volume3
from volreg.warp import DisplacementField3


def _vol(arr):
    return Volume3(np.asarray(arr, dtype=np.float32))


def _random_pair(seed, dims=(8, 8, 8), scale=10.0):
    rs = np.random.RandomState(seed)
    return (_vol(rs.rand(*dims) * scale), _vol(rs.rand(*dims) * scale))


class TestCcGlobal:
    def test_self_correlation(self):
        x, _ = _random_pair(0)
        assert cc_global(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_positive_affine_invariance(self):
        x, _ = _random_pair(1)
        y = _vol(2.5 * x.data + 17.0)
        assert cc_global(x, y) == pytest.approx(1.0, abs=1e-12)

    def test_negation_gives_minus_one(self):
        x, _ = _random_pair(2)
        y = _vol(-x.data)
        assert cc_global(x, y) == pytest.approx(-1.0, abs=1e-12)

    def test_constant_image_convention(self):
        x, _ = _random_pair(3)
        c = _vol(np.full((8, 8, 8), 5.0))
        assert cc_global(c, x) == 0.0
        assert cc_global(x, c) == 0.0
        assert cc_global(c, c) == 0.0

    def test_matches_pearson_oracle(self):
        a, b = _random_pair(4)
        assert cc_global(a, b) == pytest.approx(oracles.pearson(a.data, b.data), abs=1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            cc_global(_vol(np.zeros((4, 4, 4))), _vol(np.zeros((4, 4, 5))))


class TestJointHistogram:
    def test_identical_images_diagonal(self, backend):
        x, _ = _random_pair(5)
        h = joint_histogram(x, x, bins=16)
        off_diag = h.counts - np.diag(np.diag(h.counts))
        assert off_diag.sum() == 0
        assert h.counts.sum() == h.total == 512

    def test_constant_images_single_cell(self):
        c = _vol(np.full((4, 4, 4), 3.0))
        h = joint_histogram(c, c, bins=8)
        assert h.counts[0, 0] == 64
        assert h.counts.sum() == 64

    def test_crafted_2x2x2_counts(self):
        a = _vol(np.array([0, 0, 1, 1, 2, 2, 3, 3], dtype=np.float32).reshape(2, 2, 2))
        b = _vol(np.array([0, 3, 0, 3, 0, 3, 0, 3], dtype=np.float32).reshape(2, 2, 2))
        h = joint_histogram(a, b, bins=4)
        # hand enumeration: a bins are 0,0,1,1,2,2,3,3; b bins alternate 0,3
        expected = np.zeros((4, 4), dtype=np.int64)
        for ia, ib in [(0, 0), (0, 3), (1, 0), (1, 3), (2, 0), (2, 3), (3, 0), (3, 3)]:
            expected[ia, ib] += 1
        assert np.array_equal(h.counts, expected)

    def test_matches_loop_oracle(self, backend):
        a, b = _random_pair(6)
        h = joint_histogram(a, b, bins=16)
        assert np.array_equal(h.counts, oracles.joint_histogram(a.data, b.data, 16))

    def test_top_edge_inclusive(self):
        a = _vol(np.linspace(0, 1, 8).reshape(2, 2, 2))
        h = joint_histogram(a, a, bins=4)
        assert h.counts.sum() == 8
        assert h.counts[3, 3] >= 1  # max value lands in the top bin

    def test_rejects_few_bins(self):
        x, y = _random_pair(7)
        with pytest.raises(ValueError):
            joint_histogram(x, y, bins=1)


def _independent_pair():
    # a varies along x only, b along y only: joint = product of marginals
    a = np.zeros((8, 8, 8), dtype=np.float32)
    a += np.arange(8, dtype=np.float32)[:, None, None]
    b = np.zeros((8, 8, 8), dtype=np.float32)
    b += np.arange(8, dtype=np.float32)[None, :, None]
    return _vol(a), _vol(b)


class TestMi:
    def test_self_mi_is_entropy(self):
        x, _ = _random_pair(8)
        h = oracles.joint_histogram(x.data, x.data, 64)
        marginal = h.sum(axis=1).astype(np.float64) / h.sum()
        assert mi(x, x, 64) == pytest.approx(oracles.entropy(marginal), abs=1e-9)

    def test_independent_images_near_zero(self):
        a, b = _independent_pair()
        assert mi(a, b, 8) == pytest.approx(0.0, abs=0.05)

    def test_constant_image_zero(self):
        x, _ = _random_pair(9)
        c = _vol(np.full((8, 8, 8), 2.0))
        assert mi(c, x) == 0.0

    def test_matches_oracle(self, backend):
        a, b = _random_pair(10)
        expected = oracles.mi_from_counts(oracles.joint_histogram(a.data, b.data, 32))
        assert mi(a, b, 32) == pytest.approx(expected, abs=1e-9)

    def test_nonnegative(self):
        for seed in range(6):
            a, b = _random_pair(20 + seed, dims=(6, 6, 6))
            assert mi(a, b) >= -1e-12


class TestNmi:
    def test_self_is_two(self):
        x, _ = _random_pair(11)
        assert nmi(x, x) == pytest.approx(2.0, abs=1e-9)

    def test_independent_near_one(self):
        a, b = _independent_pair()
        assert nmi(a, b, 8) == pytest.approx(1.0, abs=0.05)

    def test_symmetry_exact(self):
        a, b = _random_pair(12)
        assert nmi(a, b) == nmi(b, a)
        assert mi(a, b) == mi(b, a)

    def test_constant_convention(self):
        x, _ = _random_pair(13)
        c = _vol(np.full((8, 8, 8), 1.0))
        assert nmi(c, c) == 1.0
        assert nmi(c, x) == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_at_least_one(self, seed):
        rs = np.random.RandomState(seed)
        a = _vol(rs.randint(0, 5, size=(6, 6, 6)).astype(np.float32))
        b = _vol(rs.randint(0, 5, size=(6, 6, 6)).astype(np.float32))
        assert nmi(a, b, 16) >= 1.0 - 1e-9


class TestMsd:
    def test_self_zero(self):
        x, _ = _random_pair(14)
        assert msd(x, x) == 0.0

    def test_constant_offset(self):
        z = _vol(np.zeros((6, 6, 6)))
        c = _vol(np.full((6, 6, 6), 3.0))
        assert msd(z, c) == pytest.approx(9.0, abs=1e-12)

    def test_matches_direct_sum(self):
        a, b = _random_pair(15, dims=(4, 4, 4))
        expected = float(np.mean((a.data.astype(np.float64)
                                  - b.data.astype(np.float64)) ** 2))
        assert msd(a, b) == pytest.approx(expected, abs=1e-12)


class TestLocalCc:
    def test_self_is_one(self):
        x, _ = _random_pair(16, dims=(6, 6, 6))
        assert local_cc(x, x, 3) == pytest.approx(1.0, abs=1e-9)

    def test_window_affine_invariance(self):
        x, _ = _random_pair(17, dims=(6, 6, 6))
        y = _vol(3.0 * x.data + 5.0)
        assert local_cc(x, y, 3) == pytest.approx(1.0, abs=1e-9)

    def test_crafted_pair_matches_sliding_oracle(self, backend):
        a, b = _random_pair(18, dims=(6, 6, 6))
        got = local_cc(a, b, 3)
        want = oracles.local_cc(a.data, b.data, 3)
        assert got == pytest.approx(want, abs=1e-6)

    def test_rejects_even_window(self):
        a, b = _random_pair(19, dims=(6, 6, 6))
        with pytest.raises(ValueError):
            local_cc(a, b, 4)

    def test_constant_image_scores_one(self):
        c = _vol(np.zeros((6, 6, 6)))
        x, _ = _random_pair(21, dims=(6, 6, 6))
        assert local_cc(c, x, 3) == 1.0


class TestObjectiveGradient:
    def _instance(self, seed, dims=(12, 12, 12)):
        rs = np.random.RandomState(seed)
        fixed = _vol(rs.rand(*dims))
        moving = _vol(rs.rand(*dims))
        u = DisplacementField3(0.1 + 0.3 * rs.rand(*dims, 3))
        return fixed, moving, u, rs

    def test_msd_gradient_zero_at_optimum(self):
        x, _ = _random_pair(22)
        u = DisplacementField3.zeros(x.dims)
        g = objective_gradient(x, x, u, "msd")
        assert np.abs(g).max() == 0.0

    @pytest.mark.parametrize("objective,window,tol", [
        ("msd", 9, 1e-3), ("local_cc", 5, 5e-3)])
    def test_matches_finite_differences(self, objective, window, tol):
        fixed, moving, u, rs = self._instance(23)
        g = objective_gradient(fixed, moving, u, objective, window)
        h = 1e-3
        sampled_fd = []
        sampled_an = []
        for _ in range(20):
            idx = (rs.randint(12), rs.randint(12), rs.randint(12), rs.randint(3))
            fd = oracles.central_difference(
                lambda uu: objective_value(fixed, moving, DisplacementField3(uu),
                                           objective, window), u.u, idx, h)
            sampled_fd.append(fd)
            sampled_an.append(g[idx])
        err = oracles.max_rel_error(np.array(sampled_an), np.array(sampled_fd))
        assert err <= tol

    def test_rejects_unsupported_objective(self):
        fixed, moving, u, _ = self._instance(24)
        with pytest.raises(ValueError):
            objective_gradient(fixed, moving, u, "mi")
        with pytest.raises(ValueError):
            objective_value(fixed, moving, u, "nmi")


class TestDeterminism:
    def test_metrics_reproducible(self):
        a, b = _random_pair(25, dims=(16, 16, 16), scale=900.0)
        first = (cc_global(a, b), mi(a, b), nmi(a, b), msd(a, b), local_cc(a, b, 5))
        second = (cc_global(a, b), mi(a, b), nmi(a, b), msd(a, b), local_cc(a, b, 5))
        assert first == second

    def test_thread_count_independent(self):
        if kernels.active_backend() != "numba":
            pytest.skip("thread count only matters for the numba backend")
        import numba

        a, b = _random_pair(26, dims=(16, 16, 16))
        before = numba.get_num_threads()
        try:
            numba.set_num_threads(1)
            single = local_cc(a, b, 5)
            numba.set_num_threads(max(2, before))
            multi = local_cc(a, b, 5)
        finally:
            numba.set_num_threads(before)
        assert single == multi


class TestSimilarityReport:
    def test_report_and_csv_row(self):
        a, b = _random_pair(27)
        rep = similarity_report(a, b)
        assert isinstance(rep, SimilarityReport)
        row = rep.csv_row("engine-x", 3, "brain-7")
        parts = row.split(",")
        assert parts[:3] == ["engine-x", "3", "brain-7"]
        assert float(parts[3]) == pytest.approx(rep.cc)
        assert len(parts) == len(SimilarityReport.CSV_HEADER.split(","))
