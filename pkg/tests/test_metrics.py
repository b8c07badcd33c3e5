import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import convolve2d

from driftdecode.features import ExtractorSpec, build_extractor
from driftdecode.metrics import (
    DB_CAP,
    MetricReport,
    cbr,
    default_scales,
    feature_distance,
    ms_ssim,
    msssim_db,
    psnr,
    psnr_per_image,
)

WEIGHTS = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333]


def _ref_ms_ssim(x, y, n_scales, win, sigma=1.5):
    """Plain numpy/scipy MS-SSIM of one 2-D image pair, written from the standard formula."""
    c = np.arange(win) - (win - 1) / 2
    g = np.exp(-c**2 / (2 * sigma**2))
    g = g / g.sum()
    kernel = np.outer(g, g)
    w = np.array(WEIGHTS[:n_scales])
    w = w / w.sum()
    c1, c2 = 0.01**2, 0.03**2
    out = 1.0
    for s in range(n_scales):
        blur = lambda t: convolve2d(t, kernel[::-1, ::-1], mode="valid")
        mx, my = blur(x), blur(y)
        vx, vy, cxy = blur(x * x) - mx**2, blur(y * y) - my**2, blur(x * y) - mx * my
        cs = np.mean((2 * cxy + c2) / (vx + vy + c2))
        if s == n_scales - 1:
            term = np.mean((2 * mx * my + c1) / (mx**2 + my**2 + c1) * (2 * cxy + c2) / (vx + vy + c2))
        else:
            term = cs
            h, wd = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
            x = x[:h, :wd].reshape(h // 2, 2, wd // 2, 2).mean((1, 3))
            y = y[:h, :wd].reshape(h // 2, 2, wd // 2, 2).mean((1, 3))
        out *= max(term, 0.0) ** w[s]
    return out


def test_psnr_examples():
    x = torch.zeros(1, 4, 4, dtype=torch.float64)
    assert psnr(x, x) == DB_CAP
    assert psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert psnr(x, x + math.sqrt(0.001)) == pytest.approx(30.0, abs=1e-9)
    with pytest.raises(ValueError):
        psnr(x, torch.zeros(1, 4, 5))
    with pytest.raises(ValueError):
        psnr(x, x, peak=0)


def test_psnr_per_image():
    x = torch.zeros(3, 1, 4, 4, dtype=torch.float64)
    y = x.clone()
    y[1] += 0.1
    y[2] += math.sqrt(0.001)
    assert psnr_per_image(x, y).tolist() == pytest.approx([DB_CAP, 20.0, 30.0])


def test_psnr_decreases_with_noise():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(1, 32, 32, generator=g, dtype=torch.float64)
    vals = [psnr(x, x + s * torch.randn(x.shape, generator=g, dtype=torch.float64)) for s in (0.01, 0.05, 0.1)]
    assert vals[0] > vals[1] > vals[2]


def test_msssim_db_examples():
    assert msssim_db(0.9) == pytest.approx(10.0, abs=1e-9)
    assert msssim_db(0.99) == pytest.approx(20.0, abs=1e-9)
    assert msssim_db(1.0) == DB_CAP
    for bad in (-0.1, 1.1):
        with pytest.raises(ValueError):
            msssim_db(bad)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 0.999999), st.floats(0.0, 0.999999))
def test_msssim_db_is_monotone(a, b):
    if a <= b:
        assert msssim_db(a) <= msssim_db(b)
    if b - a > 1e-12:  # strict only above float resolution of the transform
        assert msssim_db(a) < msssim_db(b)
    assert msssim_db(a) == pytest.approx(-10 * math.log10(1 - a), abs=1e-9)


def test_ms_ssim_identity_and_symmetry():
    g = torch.Generator().manual_seed(1)
    x = torch.rand(2, 1, 32, 32, generator=g)
    y = (x + 0.1 * torch.randn(x.shape, generator=g)).clamp(0, 1)
    assert ms_ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert abs(ms_ssim(x, y) - ms_ssim(y, x)) <= 1e-9
    assert 0 < ms_ssim(x, y) < 1


def test_ms_ssim_gray_plus_tiny_noise():
    g = torch.Generator().manual_seed(2)
    x = torch.full((1, 1, 32, 32), 0.5, dtype=torch.float64)
    y = x + 1e-3 * torch.randn(x.shape, generator=g, dtype=torch.float64)
    assert ms_ssim(x, y) > 0.99


@pytest.mark.parametrize("size,n_scales,win", [(32, 3, 7), (48, 3, 11), (176, 5, 11)])
def test_ms_ssim_matches_reference(size, n_scales, win):
    rng = np.random.default_rng(size)
    x = rng.random((size, size))
    y = np.clip(x + 0.15 * rng.standard_normal((size, size)), 0, 1)
    ours = ms_ssim(torch.from_numpy(x)[None, None], torch.from_numpy(y)[None, None], n_scales, win)
    assert ours == pytest.approx(_ref_ms_ssim(x, y, n_scales, win), rel=1e-9)


def test_ms_ssim_scale_selection_and_precondition():
    assert default_scales(32, 32) == (3, 7)
    assert default_scales(256, 256) == (5, 11)
    x = torch.rand(1, 1, 32, 32)
    with pytest.raises(ValueError, match="smaller n_scales"):
        ms_ssim(x, x, n_scales=3, win_size=11)
    with pytest.raises(ValueError):
        ms_ssim(x, x, n_scales=6)


def test_ms_ssim_per_image():
    x = torch.rand(3, 1, 32, 32)
    per = ms_ssim(x, x.flip(-1), reduce=False)
    assert per.shape == (3,)
    assert float(per.mean()) == pytest.approx(ms_ssim(x, x.flip(-1)))


@pytest.fixture(scope="module")
def extractor():
    return build_extractor(ExtractorSpec(seed=0))


def test_feature_distance_identity_and_symmetry(extractor):
    g = torch.Generator().manual_seed(3)
    x, y = torch.rand(2, 1, 32, 32, generator=g), torch.rand(2, 1, 32, 32, generator=g)
    assert feature_distance(x, x, extractor) == 0.0
    assert abs(feature_distance(x, y, extractor) - feature_distance(y, x, extractor)) <= 1e-9
    assert feature_distance(x, y, extractor) > 0
    assert feature_distance(x, y, extractor, reduce=False).shape == (2,)


def test_feature_distance_monotone_under_interpolation(extractor):
    g = torch.Generator().manual_seed(4)
    passed, n_pairs = 0, 40
    for _ in range(n_pairs):
        x, y = torch.rand(1, 1, 32, 32, generator=g), torch.rand(1, 1, 32, 32, generator=g)
        d = [feature_distance(x, torch.lerp(x, y, t), extractor) for t in (0, 0.25, 0.5, 0.75, 1)]
        passed += all(b >= a for a, b in zip(d, d[1:]))
    assert passed >= 0.95 * n_pairs


def test_cbr_examples():
    assert cbr(1024, 1, 32, 32) == 1.0
    assert cbr(98304, 3, 256, 256) == 0.5
    assert cbr(3 * 8 * 8, 3, 8, 8) == 1.0
    with pytest.raises(ValueError):
        cbr(0, 1, 1, 1)


def test_metric_report_row():
    r = MetricReport(20.0, 0.9, 10.0, 0.1, 5.0, 10, "awgn")
    assert r.as_row()["msssim_db"] == pytest.approx(-10 * math.log10(1 - r.msssim))
