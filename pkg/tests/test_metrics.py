import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adc_cyclegan.metrics import (
    ImagePair,
    aggregate,
    evaluate_pair,
    gaussian_window,
    mae,
    mse,
    psnr,
    render_table,
    ssim,
    ssim_map,
)

C1, C2 = 0.01 ** 2, 0.03 ** 2


def test_image_pair_clamps_and_validates():
    p = ImagePair(np.full((4, 4), 1.5), np.full((4, 4), -0.2))
    assert p.reference.max() == 1.0 and p.candidate.min() == 0.0
    with pytest.raises(ValueError):
        ImagePair(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        ImagePair(np.zeros((2, 4, 4)), np.zeros((2, 4, 4)))


def test_mae_values(rng):
    a = rng.uniform(0, 1, (8, 8))
    assert mae(a, a) == 0.0
    assert mae(np.full((5, 5), 0.3), np.full((5, 5), 0.41)) == pytest.approx(0.11, abs=1e-12)
    b = rng.uniform(0, 1, (8, 8))
    total = 0.0
    for i in range(8):
        for j in range(8):
            total += abs(a[i, j] - b[i, j])
    assert mae(a, b) == pytest.approx(total / 64, abs=1e-9)


def test_psnr_values(rng):
    a = np.full((8, 8), 0.2)
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert psnr(a, a) == 100.0
    x, y = rng.uniform(0, 1, (8, 8)), rng.uniform(0, 1, (8, 8))
    s = 0.0
    for i in range(8):
        for j in range(8):
            s += (x[i, j] - y[i, j]) ** 2
    assert psnr(x, y) == pytest.approx(10 * math.log10(1 / (s / 64)), abs=1e-6)
    assert mse(x, y) == pytest.approx(s / 64, abs=1e-12)


def test_psnr_literal_flag(rng):
    x, y = rng.uniform(0, 1, (8, 8)), rng.uniform(0, 1, (8, 8))
    m = np.mean((x - y) ** 2)
    assert psnr(x, y, data_range=0.5, literal=True) == pytest.approx(10 * math.log10(0.5 / m), abs=1e-9)
    assert psnr(x, y, data_range=0.5) == pytest.approx(10 * math.log10(0.25 / m), abs=1e-9)


def test_gaussian_window():
    g = gaussian_window()
    assert g.shape == (11,) and g.sum() == pytest.approx(1.0, abs=1e-15)
    assert g[5] == g.max() and np.allclose(g, g[::-1])


def test_ssim_identity_and_symmetry(rng):
    a, b = rng.uniform(0, 1, (20, 20)), rng.uniform(0, 1, (20, 20))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)


def test_ssim_constant_images_closed_form():
    expected = (2 * 0.2 * 0.6 + C1) / (0.2 ** 2 + 0.6 ** 2 + C1)
    assert ssim(np.full((16, 16), 0.2), np.full((16, 16), 0.6)) == pytest.approx(expected, abs=1e-6)
    assert ssim(np.full((16, 16), 0.2), np.full((16, 16), 0.6), mode="global") == pytest.approx(expected, abs=1e-6)


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_ssim_map_matches_direct_window_oracle(rng):
    a, b = rng.uniform(0, 1, (13, 14)), rng.uniform(0, 1, (13, 14))
    g = gaussian_window()
    w2 = np.outer(g, g)
    m = ssim_map(a, b)
    assert m.shape == (3, 4)
    for i in range(3):
        for j in range(4):
            pa, pb = a[i:i + 11, j:j + 11], b[i:i + 11, j:j + 11]
            mu_a, mu_b = (w2 * pa).sum(), (w2 * pb).sum()
            va = (w2 * pa * pa).sum() - mu_a ** 2
            vb = (w2 * pb * pb).sum() - mu_b ** 2
            cov = (w2 * pa * pb).sum() - mu_a * mu_b
            v = ((2 * mu_a * mu_b + C1) * (2 * cov + C2)) / ((mu_a ** 2 + mu_b ** 2 + C1) * (va + vb + C2))
            assert m[i, j] == pytest.approx(v, abs=1e-12)


def test_ssim_degrades_with_noise():
    rng = np.random.default_rng(0)
    yy, xx = np.mgrid[0:48, 0:48] / 48
    img = 0.5 + 0.4 * np.sin(8 * xx) * np.cos(5 * yy)
    noise = rng.standard_normal(img.shape)
    vals = [ssim(img, img + a * noise) for a in np.linspace(0.0, 0.4, 20)]
    inversions = sum(1 for u, v in zip(vals, vals[1:]) if v > u)
    assert inversions <= 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_metric_properties(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(0, 1, (12, 12)), rng.uniform(0, 1, (12, 12))
    assert 0 <= mae(a, b) <= 1
    assert mae(a, b) == mae(b, a)
    assert psnr(a, b) == psnr(b, a)
    assert -1 <= ssim(a, b) <= 1
    assert mae(a, b) >= mae(a, a) and psnr(a, b) <= psnr(a, a) and ssim(a, b) <= ssim(a, a) + 1e-12


def test_evaluate_pair_perfect():
    a = np.random.default_rng(0).uniform(0, 1, (16, 16))
    assert evaluate_pair(a, a) == {"mae": 0.0, "psnr": 100.0, "ssim": pytest.approx(1.0, abs=1e-9)}


def test_aggregate_closed_forms():
    rep = aggregate([{"mae": v, "psnr": v, "ssim": v} for v in (1.0, 2.0, 3.0)])
    assert rep.cell("mae") == "2.00000 (1.00000)"
    single = aggregate([{"mae": 0.11005, "psnr": 19.04385, "ssim": 0.68551}])
    assert single.cell("mae") == "0.11005 (0.00000)"
    with pytest.raises(ValueError):
        aggregate([])


def test_aggregate_two_pass_oracle(rng):
    runs = [{m: float(rng.uniform()) for m in ("mae", "psnr", "ssim")} for _ in range(5)]
    rep = aggregate(runs)
    for m in ("mae", "psnr", "ssim"):
        vals = [r[m] for r in runs]
        mean = sum(vals) / 5
        sd = math.sqrt(sum((v - mean) ** 2 for v in vals) / 4)
        assert rep.mean[m] == pytest.approx(mean, abs=1e-12)
        assert rep.sd[m] == pytest.approx(sd, abs=1e-12)


def test_report_format_and_files(tmp_path):
    rep = aggregate([{"mae": 0.10555, "psnr": 19.0, "ssim": 0.68}, {"mae": 0.11455, "psnr": 19.08770, "ssim": 0.69102}])
    assert rep.cell("mae") == f"{0.11005:.5f} ({np.std([0.10555, 0.11455], ddof=1):.5f})"
    rep.write(tmp_path / "combined", label="combined")
    data = json.loads((tmp_path / "combined.json").read_text())
    assert {"mae_mean", "mae_sd", "psnr_mean", "psnr_sd", "ssim_mean", "ssim_sd"} <= set(data)
    text = (tmp_path / "combined.txt").read_text()
    assert "combined" in text and rep.cell("psnr") in text
    table = render_table([("ADC-cycleGAN", rep)], title="t")
    assert table.splitlines()[0] == "t" and "ADC-cycleGAN" in table
