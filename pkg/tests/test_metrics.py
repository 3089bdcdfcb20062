import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octdiff.errors import ConfigError, DegenerateInputError, ShapeMismatchError
from octdiff.metrics import (
    MetricsReport,
    Rect,
    ROISet,
    cnr,
    enl,
    evaluate_pair,
    paired_t_test,
    psnr,
    snr,
)

# Frozen oracle: differences [1,1,1,1,-1] give t = 0.6 / (sqrt(0.8)/sqrt(5)) = 1.5
# exactly; the two-tailed p at 4 dof is 0.2080 (50-digit incomplete-beta evaluation).
HAND_T = 1.5
HAND_P = 0.20800000000000002


@pytest.fixture
def rois():
    return ROISet(
        background=(Rect(0, 0, 8, 8),),
        foreground=(Rect(16, 0, 8, 8),),
        homogeneous=(Rect(16, 0, 8, 8),),
    )


def make_test_image(rng, bg_level=0.1, fg_level=0.8, noise=0.05):
    img = np.full((32, 32), bg_level)
    img[16:] = fg_level
    return img + rng.normal(0, noise, img.shape)


class TestSnr:
    def test_increases_when_background_noise_shrinks(self, rois, rng):
        noisy = make_test_image(rng, noise=0.1)
        clean = make_test_image(rng, noise=0.01)
        assert snr(clean, rois) > snr(noisy, rois)

    def test_zero_variance_background_rejected(self, rois):
        img = np.zeros((32, 32))
        img[16:] = 1.0
        with pytest.raises(DegenerateInputError):
            snr(img, rois)

    def test_missing_rois_rejected(self, rng):
        with pytest.raises(ConfigError):
            snr(make_test_image(rng), ROISet())


class TestPsnr:
    def test_identical_images_infinite(self, rng):
        img = rng.uniform(size=(16, 16))
        assert psnr(img, img) == math.inf

    def test_closed_form_offset(self):
        # range-2 reference, uniform 0.01 error: 10 log10(4 / 1e-4)
        ref = np.linspace(-1, 1, 256).reshape(16, 16)
        assert psnr(ref + 0.01, ref) == pytest.approx(10 * math.log10(4 / 1e-4), rel=1e-12)

    def test_strictly_decreasing_in_noise_amplitude(self, rng):
        ref = rng.uniform(-1, 1, (64, 64))
        noise = rng.standard_normal(ref.shape)
        values = [psnr(ref + amp * noise, ref) for amp in (0.01, 0.05, 0.1, 0.3)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            psnr(np.zeros((4, 4)), np.zeros((4, 5)))


class TestCnr:
    def test_equal_means_give_zero(self, rois, rng):
        img = rng.normal(0.5, 0.1, (32, 32))
        assert cnr(img, rois) == pytest.approx(0.0, abs=0.2)

    def test_sign_flips_when_rois_swap(self, rois, rng):
        img = make_test_image(rng)
        swapped = ROISet(
            background=rois.foreground, foreground=rois.background,
            homogeneous=rois.homogeneous,
        )
        assert cnr(img, rois) == pytest.approx(-cnr(img, swapped), rel=0.2)

    def test_exact_value_on_constructed_stats(self):
        rng = np.random.default_rng(0)
        img = np.zeros((32, 32))
        img[:8, :8] = rng.normal(0.0, 0.1, (8, 8))
        img[16:24, :8] = rng.normal(1.0, 0.1, (8, 8))
        rois = ROISet(background=(Rect(0, 0, 8, 8),), foreground=(Rect(16, 0, 8, 8),))
        bg = img[:8, :8].ravel()
        fg = img[16:24, :8].ravel()
        expect = (fg.mean() - bg.mean()) / math.sqrt(
            0.5 * (fg.var(ddof=1) + bg.var(ddof=1))
        )
        assert cnr(img, rois) == pytest.approx(expect, rel=1e-12)


class TestEnl:
    def test_gamma_speckle_recovers_shape_parameter(self, rng):
        for k in (1.0, 4.0, 16.0):
            img = 0.7 * rng.gamma(k, 1.0 / k, (200, 200))
            rois = ROISet(homogeneous=(Rect(0, 0, 200, 200),))
            assert enl(img, rois) == pytest.approx(k, rel=0.05)

    @settings(max_examples=30, deadline=None)
    @given(scale=st.floats(0.01, 100.0))
    def test_scale_invariant(self, scale):
        rng = np.random.default_rng(7)
        img = rng.gamma(4.0, 0.25, (32, 32))
        rois = ROISet(homogeneous=(Rect(0, 0, 32, 32),))
        assert enl(scale * img, rois) == pytest.approx(enl(img, rois), rel=1e-9)

    def test_constant_roi_rejected(self):
        rois = ROISet(homogeneous=(Rect(0, 0, 4, 4),))
        with pytest.raises(DegenerateInputError):
            enl(np.ones((8, 8)), rois)


class TestPairedTTest:
    def test_hand_computed_case(self):
        a = [2.0, 3.0, 4.0, 5.0, 1.0]
        b = [1.0, 2.0, 3.0, 4.0, 2.0]  # differences [1, 1, 1, 1, -1]
        t, p = paired_t_test(a, b)
        assert t == pytest.approx(HAND_T, rel=1e-12)
        assert p == pytest.approx(HAND_P, rel=1e-9)

    def test_antisymmetric(self, rng):
        a = rng.normal(size=12)
        b = rng.normal(size=12)
        t_ab, p_ab = paired_t_test(a, b)
        t_ba, p_ba = paired_t_test(b, a)
        assert t_ab == pytest.approx(-t_ba, rel=1e-12)
        assert p_ab == pytest.approx(p_ba, rel=1e-12)

    def test_identical_samples_degenerate(self):
        with pytest.raises(DegenerateInputError):
            paired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])

    def test_too_short(self):
        with pytest.raises(ConfigError):
            paired_t_test([1.0], [2.0])

    def test_null_calibration(self, rng):
        # under the null, p < 0.05 should trigger at ~5% over 1000 trials
        rejections = 0
        for _ in range(1000):
            a = rng.normal(size=10)
            b = rng.normal(size=10)
            _, p = paired_t_test(a, b)
            rejections += p < 0.05
        assert 30 <= rejections <= 70


class TestRoiPlumbing:
    def test_rect_validation(self):
        with pytest.raises(ConfigError):
            Rect(-1, 0, 4, 4)
        with pytest.raises(ConfigError):
            Rect(0, 0, 0, 4)
        with pytest.raises(ConfigError):
            Rect(0, 0, 8, 8).extract(np.zeros((4, 4)))

    def test_roiset_json_round_trip(self, tmp_path, rois):
        path = tmp_path / "rois.json"
        rois.save(path)
        assert ROISet.load(path) == rois
        # the sidecar is plain JSON with plain lists
        raw = json.loads(path.read_text())
        assert raw["background"] == [[0, 0, 8, 8]]

    def test_report_row_and_dict(self, rois, rng):
        img = make_test_image(rng)
        ref = make_test_image(rng, noise=0.01)
        report = evaluate_pair(img, ref, rois, image_id="x", reference_id="r", domain="unit")
        row = report.as_row()
        assert row[:3] == ["x", "r", "unit"]
        assert len(row) == len(MetricsReport.CSV_HEADER)
        d = report.to_dict()
        assert d["rois"]["foreground"] == [[16, 0, 8, 8]]
        assert all(math.isfinite(d[k]) for k in ("snr", "psnr", "cnr", "enl"))
