import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity as skimage_ssim

from darkforge.errors import ShapeError
from darkforge.metrics import MetricReport, checkerboard_score, psnr, ssim

RNG = np.random.default_rng(77)


def quantized(img):
    return np.rint(np.asarray(img) * 255.0) / 255.0


class TestPsnr:
    def test_identical_capped(self):
        a = RNG.uniform(0, 1, (32, 32))
        assert psnr(a, a) == 100.0

    def test_constant_difference_closed_form(self):
        a = quantized(RNG.uniform(0.1, 0.8, (64, 64)))
        measured = psnr(a, a + 16 / 255)
        assert measured == pytest.approx(20 * np.log10(255 / 16), abs=1e-9)
        assert measured == pytest.approx(24.049, abs=1e-3)

    def test_symmetry(self):
        a = RNG.uniform(0, 1, (16, 16))
        b = RNG.uniform(0, 1, (16, 16))
        assert psnr(a, b) == psnr(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_uniform_noise_matches_theory(self):
        # Monte-Carlo check: uniform(-d, d) noise has variance d^2/3
        d = 0.05
        a = RNG.uniform(0.3, 0.7, (256, 256))
        b = a + RNG.uniform(-d, d, a.shape)
        expected = -10 * np.log10(d**2 / 3)
        assert psnr(a, b) == pytest.approx(expected, abs=0.1)

    def test_monotone_in_noise_level(self):
        a = RNG.uniform(0.3, 0.7, (128, 128))
        values = []
        for i, sigma in enumerate((0.002, 0.005, 0.01, 0.02, 0.05)):
            noisy = a + np.random.default_rng(1000 + i).normal(0, sigma, a.shape)
            values.append(psnr(a, noisy))
        assert all(x > y for x, y in zip(values, values[1:]))


class TestSsim:
    def test_identical_exactly_one(self):
        a = RNG.uniform(0, 1, (32, 32))
        assert ssim(a, a) == 1.0

    def test_inverted_binary_negative(self):
        a = (RNG.uniform(0, 1, (32, 32)) > 0.5).astype(np.float64)
        assert ssim(a, 1.0 - a) < 0.0

    def test_tiny_noise_stays_high(self):
        a = RNG.uniform(0.2, 0.8, (48, 48))
        b = a + RNG.normal(0, 1e-4, a.shape)
        assert ssim(a, b) >= 0.999

    def test_matches_independent_implementation(self):
        a = RNG.uniform(0, 1, (64, 64))
        b = np.clip(a + RNG.normal(0, 0.08, a.shape), 0, 1)
        reference = skimage_ssim(
            a, b, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False
        )
        assert ssim(a, b) == pytest.approx(reference, abs=1e-12)

    def test_rgb_averages_channels(self):
        a = RNG.uniform(0, 1, (32, 32, 3))
        b = np.clip(a + RNG.normal(0, 0.05, a.shape), 0, 1)
        per_channel = np.mean([ssim(a[:, :, c], b[:, :, c]) for c in range(3)])
        assert ssim(a, b) == pytest.approx(per_channel, abs=1e-12)

    def test_symmetry(self):
        a = RNG.uniform(0, 1, (24, 24))
        b = RNG.uniform(0, 1, (24, 24))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_window_size_guard(self):
        with pytest.raises(ShapeError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_bounded_magnitude(self):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            a = rng.uniform(0, 1, (24, 24))
            b = rng.uniform(0, 1, (24, 24))
            assert abs(ssim(a, b)) <= 1.0


class TestCheckerboard:
    def test_perfect_checkerboard(self):
        board = (np.indices((64, 64)).sum(axis=0) % 2).astype(np.float64)
        assert checkerboard_score(board) > 0.9

    def test_constant_is_zero(self):
        assert checkerboard_score(np.full((32, 32), 0.6)) == 0.0

    def test_smooth_ramp_is_low(self):
        ramp = np.linspace(0, 1, 64)[None, :] * np.ones((64, 1))
        assert checkerboard_score(ramp) < 0.05

    def test_rgb_uses_luminance(self):
        board = (np.indices((32, 32)).sum(axis=0) % 2).astype(np.float64)
        rgb = np.stack([board, board, board], axis=-1)
        assert checkerboard_score(rgb) == pytest.approx(checkerboard_score(board))

    def test_small_or_odd_dims_rejected(self):
        with pytest.raises(ShapeError):
            checkerboard_score(np.zeros((6, 6)))
        with pytest.raises(ShapeError):
            checkerboard_score(np.zeros((9, 16)))

    @settings(max_examples=25)
    @given(st.floats(-0.5, 0.5), st.integers(0, 1_000))
    def test_brightness_offset_invariance(self, offset, seed):
        rng = np.random.default_rng(seed)
        img = rng.uniform(0.2, 0.7, (16, 16))
        base = checkerboard_score(img)
        shifted = checkerboard_score(img + offset)
        assert shifted == pytest.approx(base, abs=1e-9)

    def test_axis_stripes_count_as_artifacts(self):
        stripes = (np.arange(64) % 2).astype(np.float64)[None, :] * np.ones((64, 1))
        assert checkerboard_score(stripes) > 0.9


def test_metric_report_fields():
    report = MetricReport(psnr_db=30.0, ssim=0.9, checkerboard=0.1)
    assert (report.psnr_db, report.ssim, report.checkerboard) == (30.0, 0.9, 0.1)
