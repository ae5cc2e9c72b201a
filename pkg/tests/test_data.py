import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gtfmn.data import (
    DegradationSpec,
    bicubic_resize,
    build_corpus,
    degrade,
    gamma_darken,
    load_pairs,
    patch_sampler,
    read_image,
    read_manifest,
    rgb_to_y,
    write_image,
    write_synthetic_charts,
)


def catmull_rom(x):
    x = abs(x)
    if x <= 1:
        return 1.5 * x ** 3 - 2.5 * x ** 2 + 1
    if x < 2:
        return -0.5 * x ** 3 + 2.5 * x ** 2 - 4 * x + 2
    return 0.0


def dense_resize_1d(signal, out_size, antialias=True):
    """Evaluate every output sample directly from the kernel formula."""
    n = len(signal)
    scale = out_size / n
    stretch = scale if (antialias and scale < 1) else 1.0
    out = np.zeros(out_size)
    for i in range(out_size):
        center = (i + 0.5) / scale - 0.5
        acc = wsum = 0.0
        for j in range(-20, n + 20):
            wgt = catmull_rom((center - j) * stretch)
            if wgt == 0.0:
                continue
            acc += wgt * signal[min(max(j, 0), n - 1)]
            wsum += wgt
        out[i] = acc / wsum
    return out


class TestGamma:
    @pytest.mark.parametrize("gamma", [0.5, 1.0, 2.2, 5.0])
    def test_fixed_points(self, gamma):
        np.testing.assert_array_equal(gamma_darken(np.array([0.0, 1.0]), gamma), [0.0, 1.0])

    def test_reference_value(self):
        assert abs(gamma_darken(np.array(0.5), 2.2) - 0.5 ** 2.2) < 1e-12
        assert abs(gamma_darken(np.array(0.5), 2.2) - 0.21764) < 1e-5

    @settings(max_examples=50)
    @given(st.floats(0, 1), st.floats(0, 1), st.floats(1.01, 4))
    def test_monotone_and_darkening(self, x, y, gamma):
        a, b = sorted((x, y))
        ga, gb = gamma_darken(np.array(a), gamma), gamma_darken(np.array(b), gamma)
        assert ga <= gb
        assert ga <= a

    @pytest.mark.parametrize("gamma", [0.0, -1.0])
    def test_rejects_non_positive(self, gamma):
        with pytest.raises(ValueError):
            gamma_darken(np.ones(2), gamma)


class TestBicubic:
    def test_constant_image(self):
        img = np.full((3, 10, 14), 0.37)
        for size in [(5, 7), (20, 28), (3, 11)]:
            np.testing.assert_allclose(bicubic_resize(img, size), 0.37, atol=1e-12)

    def test_identity_at_same_size(self, rng):
        img = rng.uniform(size=(3, 6, 9))
        np.testing.assert_array_equal(bicubic_resize(img, (6, 9)), img)

    def test_linear_ramp_matches_dense_evaluation(self):
        ramp = np.add.outer(np.arange(8), np.arange(8)) / 14.0
        got = bicubic_resize(ramp, (4, 4))
        rows = np.stack([dense_resize_1d(r, 4) for r in ramp])
        expected = np.stack([dense_resize_1d(c, 4) for c in rows.T]).T
        np.testing.assert_allclose(got, expected, atol=1e-6)

    def test_upscale_matches_dense_evaluation(self, rng):
        img = rng.uniform(size=(5, 6))
        got = bicubic_resize(img, (10, 12), clip=False)
        rows = np.stack([dense_resize_1d(r, 12) for r in img])
        expected = np.stack([dense_resize_1d(c, 10) for c in rows.T]).T
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_rejects_zero_target(self):
        with pytest.raises(ValueError):
            bicubic_resize(np.ones((4, 4)), (0, 2))

    def test_output_in_unit_range(self, rng):
        img = (rng.uniform(size=(3, 16, 16)) > 0.5).astype(float)
        out = bicubic_resize(img, (37, 37))
        assert out.min() >= 0 and out.max() <= 1


class TestLuma:
    def test_white_and_red(self):
        px = np.array([[1.0, 1.0], [1.0, 0.0], [1.0, 0.0]]).reshape(1, 3, 1, 2)
        np.testing.assert_allclose(rgb_to_y(px).ravel(), [1.0, 0.299], atol=1e-12)

    def test_grayscale(self, rng):
        v = rng.uniform(size=(1, 1, 4, 4))
        np.testing.assert_allclose(rgb_to_y(np.repeat(v, 3, axis=1)), v, atol=1e-12)

    def test_studio_swing(self):
        white = np.ones((3, 1, 1))
        assert abs(rgb_to_y(white, studio=True).item() - 235 / 255) < 1e-9

    def test_rejects_wrong_channels(self):
        with pytest.raises(ValueError):
            rgb_to_y(np.zeros((1, 4, 2, 2)))


class TestPipeline:
    def test_darken_then_downsample(self, rng):
        hr = rng.uniform(size=(3, 16, 16))
        expected = bicubic_resize(hr ** 2.2, (8, 8))
        np.testing.assert_allclose(degrade(hr, 2.2, 2), expected, atol=1e-6)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            DegradationSpec(gamma=0)
        with pytest.raises(ValueError):
            DegradationSpec(scale=3)

    def test_png_round_trip(self, tmp_path, rng):
        img = np.round(rng.uniform(size=(3, 5, 7)) * 255) / 255
        write_image(tmp_path / "a.png", img)
        np.testing.assert_allclose(read_image(tmp_path / "a.png"), img, atol=1e-12)


class TestCorpus:
    @pytest.fixture
    def hr_dir(self, tmp_path):
        write_synthetic_charts(tmp_path / "hr", 5, size=38, seed=1)
        return tmp_path / "hr"

    def test_manifest_and_shapes(self, hr_dir, tmp_path):
        entries = build_corpus(hr_dir, DegradationSpec(scale=2), tmp_path / "out")
        assert len(entries) == 5
        assert len(read_manifest(tmp_path / "out" / "manifest.txt")) == 5
        for p in load_pairs(tmp_path / "out" / "manifest.txt", 2):
            assert p.hr.shape == (3, 38, 38)
            assert p.lr.shape == (3, 19, 19)
            assert p.lr.mean() <= p.hr.mean()

    def test_manifest_format(self, hr_dir, tmp_path):
        build_corpus(hr_dir, DegradationSpec(scale=2, gamma=2.2), tmp_path / "out")
        line = (tmp_path / "out" / "manifest.txt").read_text().splitlines()[0]
        ident, hr, lr, gamma = line.split("\t")
        assert ident == "chart_0000" and hr == "hr/chart_0000.png" and lr == "lr/chart_0000.png"
        assert float(gamma) == 2.2

    def test_crops_to_scale_multiple(self, tmp_path, rng):
        (tmp_path / "hr").mkdir()
        write_image(tmp_path / "hr" / "odd.png", rng.uniform(size=(3, 21, 30)))
        build_corpus(tmp_path / "hr", DegradationSpec(scale=4), tmp_path / "out")
        (pair,) = load_pairs(tmp_path / "out" / "manifest.txt")
        assert pair.hr.shape == (3, 20, 28) and pair.lr.shape == (3, 5, 7)

    def test_rebuild_is_byte_identical(self, hr_dir, tmp_path):
        spec = DegradationSpec(scale=2, gamma_range=(1.5, 3.0))
        build_corpus(hr_dir, spec, tmp_path / "a", seed=7)
        build_corpus(hr_dir, spec, tmp_path / "b", seed=7)
        for f in sorted((tmp_path / "a" / "lr").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / "lr" / f.name).read_bytes()
        assert (tmp_path / "a" / "manifest.txt").read_text() == (tmp_path / "b" / "manifest.txt").read_text()

    def test_sampled_gamma_varies(self, hr_dir, tmp_path):
        entries = build_corpus(hr_dir, DegradationSpec(scale=2, gamma_range=(1.5, 3.0)), tmp_path / "o", seed=1)
        gammas = [e.gamma for e in entries]
        assert len(set(gammas)) == 5 and all(1.5 <= g <= 3.0 for g in gammas)

    def test_skips_unreadable(self, hr_dir, tmp_path, caplog):
        (hr_dir / "broken.png").write_bytes(b"not a png")
        entries = build_corpus(hr_dir, DegradationSpec(scale=2), tmp_path / "out")
        assert len(entries) == 5
        assert "broken" in caplog.text

    def test_empty_directory(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(FileNotFoundError):
            build_corpus(tmp_path / "empty", DegradationSpec(), tmp_path / "out")


class TestPatchSampler:
    @pytest.fixture
    def pairs(self, tmp_path):
        write_synthetic_charts(tmp_path / "hr", 3, size=80, seed=2)
        build_corpus(tmp_path / "hr", DegradationSpec(scale=2), tmp_path / "out")
        return load_pairs(tmp_path / "out" / "manifest.txt")

    def test_shapes(self, pairs):
        lr, hr = next(patch_sampler(pairs, 32, 4, seed=0))
        assert lr.shape == (4, 3, 32, 32) and hr.shape == (4, 3, 64, 64)

    def test_reproducible(self, pairs):
        a = next(patch_sampler(pairs, 16, 3, seed=5))
        b = next(patch_sampler(pairs, 16, 3, seed=5))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_hr_window_is_aligned_crop(self, pairs):
        lr, hr = next(patch_sampler(pairs, 8, 6, seed=3))
        for lr_p, hr_p in zip(lr, hr):
            # find the LR offset by exhaustive search, then check the HR window at 2x that offset
            hit = None
            for p in pairs:
                for top in range(p.lr.shape[1] - 7):
                    for left in range(p.lr.shape[2] - 7):
                        if np.array_equal(p.lr[:, top:top + 8, left:left + 8].astype(np.float32), lr_p):
                            hit = (p, top, left)
                            break
                    if hit:
                        break
                if hit:
                    break
            assert hit is not None
            p, top, left = hit
            np.testing.assert_array_equal(p.hr[:, 2 * top:2 * top + 16, 2 * left:2 * left + 16].astype(np.float32), hr_p)

    def test_augmentation_applied_to_both(self, pairs):
        lr, hr = next(patch_sampler(pairs, 12, 8, seed=4, augment=True))
        for lr_p, hr_p in zip(lr, hr):
            # decimating the HR patch should correlate far better with its own LR than with a flipped one
            assert lr_p.shape == (3, 12, 12) and hr_p.shape == (3, 24, 24)
            down = bicubic_resize(gamma_darken(hr_p, 2.2), (12, 12))
            assert np.abs(down - lr_p).mean() < 0.02

    def test_rejects_oversized_patch(self, pairs):
        with pytest.raises(ValueError, match="larger"):
            next(patch_sampler(pairs, 41, 1))
