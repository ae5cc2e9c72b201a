import math

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from gtfmn.metrics import aggregate, evaluate_pair, format_report, psnr_mse, ssim, write_report
from gtfmn.optim import Adam, l1_loss, map_smoothness_loss
from gtfmn.tensor import Tensor, finite_difference_grad, relative_error


class TestL1:
    def test_identical(self, rng):
        x = rng.normal(size=(2, 3))
        assert l1_loss(Tensor(x), Tensor(x)).item() == 0.0

    def test_hand_value(self):
        assert l1_loss(Tensor(np.array([0.0, 1.0])), Tensor(np.array([1.0, 1.0]))).item() == 0.5

    def test_gradient(self, rng):
        p = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
        t = Tensor(rng.normal(size=(2, 5)))
        l1_loss(p, t).backward()
        np.testing.assert_array_equal(p.grad, np.sign(p.data - t.data) / 10)
        numeric = finite_difference_grad(lambda x: l1_loss(x, t), p, 1e-6)
        assert relative_error(p.grad, numeric) < 1e-6

    def test_tie_subgradient_is_zero(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        l1_loss(p, Tensor(np.array([1.0, 0.0]))).backward()
        np.testing.assert_array_equal(p.grad, [0.0, 0.5])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            l1_loss(Tensor(np.zeros(2)), Tensor(np.zeros(3)))

    def test_map_smoothness_gradient(self, rng):
        m = Tensor(rng.uniform(size=(1, 1, 4, 5)), requires_grad=True)
        map_smoothness_loss(m).backward()
        assert relative_error(m.grad, finite_difference_grad(map_smoothness_loss, m, 1e-6)) < 1e-6


def simulate_adam(g_fn, theta, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam written out from the update equations."""
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        g = g_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(theta)
    return out


class TestAdam:
    def test_zero_gradient(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = Adam([p])
        p.grad = np.zeros(2)
        opt.step()
        np.testing.assert_array_equal(p.data, [1.0, -2.0])
        assert opt.t == 1

    def test_first_step_is_sign_like(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = Adam([p], lr=2e-4)
        p.grad = np.array([3.0])
        opt.step()
        # m_hat = 3, v_hat = 9 -> delta = -lr * 3 / (3 + eps)
        assert abs(p.data[0] - (-2e-4 * 3 / (3 + 1e-8))) < 1e-15

    def test_quadratic_descent(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam([p], lr=2e-3)
        trace = []
        for _ in range(500):
            p.grad = p.data.copy()  # d/dtheta of theta^2 / 2
            opt.step()
            trace.append(p.data[0])
        ref = simulate_adam(lambda th: th, 1.0, 500, 2e-3)
        np.testing.assert_allclose(trace, ref, rtol=1e-12)
        assert all(b < a for a, b in zip([1.0] + trace[:99], trace[:100]))
        assert abs(trace[99]) < 0.9

    def test_lr_zero_is_identity(self, rng):
        p = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        before = p.data.copy()
        opt = Adam([p], lr=0.0)
        for _ in range(3):
            p.grad = rng.normal(size=(3, 3))
            opt.step()
        np.testing.assert_array_equal(p.data, before)

    def test_second_moment_nonnegative(self, rng):
        p = Tensor(rng.normal(size=5), requires_grad=True)
        opt = Adam([p])
        for _ in range(10):
            p.grad = rng.normal(size=5)
            opt.step()
        assert np.all(opt.v[0] >= 0)

    def test_nan_gradient_rejected(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam([p])
        p.grad = np.array([np.nan])
        with pytest.raises(FloatingPointError, match="non-finite"):
            opt.step()
        assert p.data[0] == 1.0 and opt.t == 0

    def test_milestones_halve(self):
        opt = Adam([Tensor(np.zeros(1), requires_grad=True)], lr=1.0, milestones=(2, 4))
        lrs = []
        for _ in range(5):
            lrs.append(opt.lr)
            opt.step()
        assert lrs == [1.0, 1.0, 0.5, 0.5, 0.25]


class TestPsnr:
    def test_identical(self, rng):
        img = rng.uniform(size=(3, 16, 16))
        p, m = psnr_mse(img, img)
        assert p == math.inf and m == 0.0

    def test_one_level(self):
        ref = np.full((3, 8, 8), 0.5)
        p, m = psnr_mse(ref + 1 / 255, ref)
        assert abs(m - 1.0) < 1e-9
        assert abs(p - 20 * math.log10(255)) < 1e-9
        assert abs(p - 48.1308) < 1e-3

    def test_uniform_tenth(self):
        ref = np.full((3, 8, 8), 0.2)
        assert abs(psnr_mse(ref + 0.1, ref)[0] - 20.0) < 1e-4

    def test_border_crop(self):
        ref = np.zeros((1, 8, 8))
        pred = ref.copy()
        pred[:, 0, :] = 1.0
        assert psnr_mse(pred, ref, border_crop=1)[0] == math.inf
        with pytest.raises(ValueError, match="empty"):
            psnr_mse(pred, ref, border_crop=4)

    def test_decreasing_in_error(self, rng):
        ref = rng.uniform(size=(3, 12, 12))
        noise = rng.normal(size=ref.shape)
        ps = [psnr_mse(ref + a * noise, ref)[0] for a in (0.001, 0.01, 0.05, 0.2)]
        assert all(b < a for a, b in zip(ps, ps[1:]))


class TestSsim:
    def test_identical(self, rng):
        img = rng.uniform(size=(3, 20, 20))
        assert abs(ssim(img, img) - 1.0) < 1e-12

    def test_constant_images(self):
        c = np.full((1, 16, 16), 0.5)
        assert abs(ssim(c, c) - 1.0) < 1e-12

    def test_matches_reference_implementation(self, rng):
        a = rng.uniform(size=(1, 32, 40))
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
        ref = structural_similarity(a[0], b[0], gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0)
        assert abs(ssim(a, b) - ref) < 1e-10

    def test_negative_image_scores_low(self):
        yy, xx = np.mgrid[0:32, 0:32]
        tex = 0.5 + 0.25 * np.sin(xx / 2.0) * np.cos(yy / 3.0)
        val = ssim(tex[None], 1 - tex[None])
        ref = structural_similarity(tex, 1 - tex, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0)
        assert val < 0.5
        assert abs(val - ref) < 1e-10

    def test_symmetric_and_bounded(self, rng):
        for _ in range(10):
            a, b = rng.uniform(size=(2, 3, 14, 14))
            s = ssim(a, b)
            assert abs(s - ssim(b, a)) < 1e-12
            assert s <= 1.0

    def test_rejects_small(self):
        with pytest.raises(ValueError, match="window"):
            ssim(np.zeros((1, 12, 12)), np.zeros((1, 12, 12)), border_crop=1)


class TestReports:
    def test_aggregate_and_format(self, rng, tmp_path):
        reports = []
        for i in range(3):
            ref = rng.uniform(size=(3, 16, 16))
            reports.append(evaluate_pair(np.clip(ref + 0.02, 0, 1), ref, 2, f"img{i}"))
        mean = aggregate(reports)
        assert mean.psnr == pytest.approx(np.mean([r.psnr for r in reports]))
        text = format_report(reports)
        assert len(text.strip().splitlines()) == 1 + 3 + 1
        assert text.splitlines()[-1].startswith("mean ")
        write_report(reports, tmp_path / "r.txt")
        assert (tmp_path / "r.json").exists()

    def test_order_independent(self, rng):
        refs = [rng.uniform(size=(3, 16, 16)) for _ in range(4)]
        reports = [evaluate_pair(np.clip(r + 0.05 * i, 0, 1), r, 2, str(i)) for i, r in enumerate(refs)]
        a, b = aggregate(reports), aggregate(reports[::-1])
        assert a.psnr == pytest.approx(b.psnr, abs=1e-12) and a.ssim == pytest.approx(b.ssim, abs=1e-12)
