import numpy as np
import pytest

from metasplat.errors import ShapeMismatch
from metasplat.gradcheck import photometric_check
from metasplat.photometric import LossBreakdown, loss_LA, psnr, ssim
from metasplat.scene import ImageBuffer


def reference_ssim(a, b):
    """Independent SSIM oracle: direct per-window statistics, no separable
    convolution, no shared code with the implementation."""
    half = 5.0
    g = np.exp(-((np.arange(11) - half) ** 2) / (2.0 * 1.5 ** 2))
    g /= g.sum()
    window = np.outer(g, g)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    h, w, _ = a.shape
    vals = []
    for ch in range(3):
        for i in range(h - 10):
            for j in range(w - 10):
                x = a[i:i + 11, j:j + 11, ch]
                y = b[i:i + 11, j:j + 11, ch]
                mx = (window * x).sum()
                my = (window * y).sum()
                sx = (window * x * x).sum() - mx * mx
                sy = (window * y * y).sum() - my * my
                sxy = (window * x * y).sum() - mx * my
                vals.append(((2 * mx * my + c1) * (2 * sxy + c2))
                            / ((mx * mx + my * my + c1) * (sx + sy + c2)))
    return float(np.mean(vals))


def random_pair(rng, size=16):
    return (ImageBuffer(rng.uniform(0, 1, (size, size, 3))),
            ImageBuffer(rng.uniform(0, 1, (size, size, 3))))


class TestLoss:
    def test_identical_images_zero(self, rng):
        img, _ = random_pair(rng)
        lb = loss_LA(img, ImageBuffer(img.pixels.copy()))
        assert lb.l1 == 0.0 and lb.dssim == 0.0 and lb.total == 0.0
        assert np.all(lb.grad_image == 0.0)

    def test_constant_offset_l1(self, rng):
        img, _ = random_pair(rng)
        target = ImageBuffer(np.clip(img.pixels + 0.1, 0, 1.2))
        shifted = ImageBuffer(target.pixels - 0.1)
        lb = loss_LA(shifted, target)
        assert lb.l1 == pytest.approx(0.1, rel=1e-12)

    def test_total_is_weighted_combination(self, rng):
        r, t = random_pair(rng)
        for w in (0.0, 0.2, 0.7, 1.0):
            lb = loss_LA(r, t, w)
            assert lb.total == (1 - w) * lb.l1 + w * lb.dssim

    def test_ssim_matches_reference_oracle(self, rng):
        r, t = random_pair(rng)
        assert ssim(r, t) == pytest.approx(reference_ssim(r.pixels, t.pixels),
                                           abs=1e-6)
        lb = loss_LA(r, t, 0.5)
        want = (1.0 - reference_ssim(r.pixels, t.pixels)) / 2.0
        assert lb.dssim == pytest.approx(want, abs=1e-6)

    def test_w_zero_is_pure_l1_exact(self, rng):
        r, t = random_pair(rng)
        lb = loss_LA(r, t, 0.0)
        assert lb.total == lb.l1

    def test_gradient_matches_finite_differences(self, rng):
        for w in (0.0, 0.3, 1.0):
            res = photometric_check(rng, w_ssim=w)
            assert res.passed, res.failures

    def test_shape_mismatch(self, rng):
        r, _ = random_pair(rng, 16)
        t = ImageBuffer(np.zeros((12, 16, 3)))
        with pytest.raises(ShapeMismatch):
            loss_LA(r, t)
        with pytest.raises(ShapeMismatch):
            psnr(r, t)

    def test_ssim_symmetry(self, rng):
        r, t = random_pair(rng)
        assert abs(ssim(r, t) - ssim(t, r)) < 1e-12


class TestMetrics:
    def test_psnr_of_known_mse(self):
        a = ImageBuffer(np.zeros((16, 16, 3)))
        b = ImageBuffer(np.full((16, 16, 3), 0.1))
        assert psnr(a, b) == pytest.approx(20.0, rel=1e-12)

    def test_identical_images(self, rng):
        img, _ = random_pair(rng)
        same = ImageBuffer(img.pixels.copy())
        assert psnr(img, same) == 99.0
        assert ssim(img, same) == pytest.approx(1.0, abs=1e-12)

    def test_psnr_consistent_with_direct_mse(self, rng):
        r, t = random_pair(rng)
        mse = float(np.mean((r.pixels - t.pixels) ** 2))
        assert psnr(r, t) == pytest.approx(-10.0 * np.log10(mse), abs=1e-10)
