import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from skimage.metrics import structural_similarity

from nesure import metrics
from nesure.errors import ContractError


class TestPsnr:
    def test_identical(self):
        x = np.random.default_rng(0).random((1, 8, 8))
        assert metrics.mse(x, x) == 0.0
        assert metrics.psnr(x, x) == math.inf

    def test_twenty_db(self):
        x = np.zeros((1, 8, 8))
        assert metrics.mse(x, x + 0.1) == pytest.approx(0.01)
        assert metrics.psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-12)

    def test_random_pair_two_line_recomputation(self, rng):
        x, y = rng.random((3, 10, 10)), rng.random((3, 10, 10))
        m = ((x - y) ** 2).sum() / x.size
        assert metrics.psnr(x, y, peak=2.0) == pytest.approx(10 * math.log10(4.0 / m), rel=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            metrics.mse(np.zeros((1, 4, 4)), np.zeros((1, 4, 5)))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (1, 4, 4), elements=st.floats(0, 1)),
           arrays(np.float64, (1, 4, 4), elements=st.floats(0, 1)))
    def test_psnr_mse_relation(self, x, y):
        m = metrics.mse(x, y)
        if m > 0:
            assert metrics.psnr(x, y) == pytest.approx(10 * math.log10(1.0 / m), rel=1e-12)


class TestSsim:
    def test_identical(self, rng):
        x = rng.random((1, 16, 16))
        assert metrics.ssim(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_negated_zero_mean(self, rng):
        # locally zero-mean texture, so only the structure term carries sign
        checker = np.where(np.add.outer(np.arange(16), np.arange(16)) % 2 == 0, 0.2, -0.2)
        x = (checker * (1 + 0.1 * rng.random((16, 16))))[None]
        assert metrics.ssim(x, -x) < 0

    def test_matches_reference(self, rng):
        x = rng.random((16, 16))
        y = np.clip(x + 0.1 * rng.standard_normal((16, 16)), 0, 1)
        ref = structural_similarity(x, y, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False)
        assert metrics.ssim(x[None], y[None]) == pytest.approx(ref, abs=1e-10)

    def test_channel_mean(self, rng):
        x, y = rng.random((3, 16, 16)), rng.random((3, 16, 16))
        per = [metrics.ssim(x[c:c + 1], y[c:c + 1]) for c in range(3)]
        assert metrics.ssim(x, y) == pytest.approx(np.mean(per), rel=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_symmetric_and_bounded(self, seed):
        r = np.random.default_rng(seed)
        x, y = r.random((1, 12, 12)), r.random((1, 12, 12))
        a, b = metrics.ssim(x, y), metrics.ssim(y, x)
        assert a == pytest.approx(b, abs=1e-12)
        assert -1.0 <= a <= 1.0

    def test_too_small(self):
        with pytest.raises(ContractError):
            metrics.ssim(np.zeros((1, 8, 8)), np.zeros((1, 8, 8)))


class TestSpectrum:
    def test_constant_all_dc(self):
        r, p = metrics.radial_spectrum(np.full((2, 1, 8, 8), 0.3))
        assert p[0] > 0 and np.all(p[1:] == 0)
        assert r.tolist() == list(range(5))

    def test_white_noise_flat(self, rng):
        _, p = metrics.radial_spectrum(rng.standard_normal((1000, 1, 16, 16)))
        assert p.max() / p.min() < 1.5

    def test_sinusoid_single_bin(self):
        n, k = 16, 3
        xx = np.arange(n)
        img = np.cos(2 * np.pi * k * xx / n)[None, None, :] * np.ones((1, n, 1))
        _, p = metrics.radial_spectrum(img[None])
        assert int(np.argmax(p)) == k
        assert p[k] > 1e10 * np.delete(p, k).max()

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 15), st.integers(0, 15), st.integers(0, 10 ** 6))
    def test_shift_invariant(self, dy, dx, seed):
        x = np.random.default_rng(seed).random((2, 1, 16, 16))
        _, a = metrics.radial_spectrum(x)
        _, b = metrics.radial_spectrum(np.roll(x, (dy, dx), axis=(-2, -1)))
        np.testing.assert_allclose(a, b, rtol=1e-10)

    def test_distance(self, rng):
        x = rng.random((4, 1, 16, 16))
        assert metrics.spectrum_distance(x, x) == 0.0
        assert metrics.spectrum_distance(10 * x, x) == pytest.approx(2.0, rel=1e-12)

    def test_square_only(self):
        with pytest.raises(ContractError):
            metrics.radial_spectrum(np.zeros((1, 1, 8, 6)))


class TestPatchNorms:
    def test_all_zero_single_bin(self):
        counts, edges = metrics.patch_norm_histogram(np.zeros((3, 1, 8, 8)), 4)
        assert counts.tolist() == [12] and edges[0] <= 0 <= edges[1]

    def test_unit_constant_is_four(self):
        norms = metrics.patch_norms(np.ones((2, 1, 8, 8)), 4)
        assert norms.tolist() == [4.0] * 8
        counts, edges = metrics.patch_norm_histogram(np.ones((2, 1, 8, 8)), 4)
        assert counts.tolist() == [8] and edges[0] < 4 < edges[1]

    def test_histogram_total(self, rng):
        counts, edges = metrics.patch_norm_histogram(rng.random((5, 1, 16, 16)), 4, bins=10)
        assert counts.sum() == 5 * 16 and len(edges) == 11


class TestReport:
    def test_aggregate_and_csv(self, tmp_path, rng):
        clean = rng.random((3, 1, 12, 12))
        est = clean.copy()
        est[1] += 0.1
        est[2] += 0.05
        rep = metrics.MetricReport.compute(clean, est, with_spectrum=True)
        assert rep.psnr[0] == math.inf
        assert rep.psnr[1] == pytest.approx(20.0)
        agg = rep.aggregate()
        assert agg["mse"] == pytest.approx((0.01 + 0.0025) / 3)
        p = tmp_path / "m.csv"
        rep.write_csv(p, {"sigma": 0.05})
        rows = list(csv.DictReader(open(p)))
        assert len(rows) == 4 and rows[-1]["image"] == "all"
        assert float(rows[0]["psnr"]) == metrics.PSNR_SENTINEL
        assert rows[2]["sigma"] == "0.05"
        assert rep.spectrum[1].shape == (7,)

    def test_curve_csv(self, tmp_path):
        p = tmp_path / "c.csv"
        metrics.write_curve_csv(p, [0, 1], [0.5, 0.25], ("radius", "power"))
        assert open(p).read().splitlines() == ["radius,power", "0.0,0.5", "1.0,0.25"]
