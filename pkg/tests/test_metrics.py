import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepcp.errors import InvalidArgumentError
from deepcp.metrics import (
    average_reports,
    build_report,
    error_map,
    gaussian_window,
    mse,
    psnr,
    psnr_from_mse,
    read_report_csv,
    ssim,
    write_pgm,
)
from deepcp.training import augment, AUGMENT_OPS


def brute_force_ssim(x, ref, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Per-pixel loop over explicitly symmetric-padded neighbourhoods."""
    x, ref = np.abs(x), np.abs(ref)
    L = ref.max()
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    r = size // 2
    g = np.exp(-((np.arange(size) - r) ** 2) / (2 * sigma ** 2))
    win = np.outer(g, g) / np.outer(g, g).sum()
    xp, rp = np.pad(x, r, mode="symmetric"), np.pad(ref, r, mode="symmetric")
    vals = []
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            a, b = xp[i:i + size, j:j + size], rp[i:i + size, j:j + size]
            ma, mb = (win * a).sum(), (win * b).sum()
            va = (win * (a - ma) ** 2).sum()
            vb = (win * (b - mb) ** 2).sum()
            cov = (win * (a - ma) * (b - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_mse_examples():
    rng = np.random.default_rng(0)
    ref = rng.random((16, 16))
    assert mse(ref, ref) == 0
    assert mse(ref + 0.01, ref) == pytest.approx(1e-4, rel=1e-9)
    # magnitudes are compared, so a pure phase change costs nothing
    assert mse(ref * 1j, ref) == pytest.approx(0, abs=1e-30)


def test_published_psnr_mse_consistency():
    # published zero-filled R=4 figures: MSE 0.0024 (2 significant figures), PSNR 26.1451
    reported = 26.1451
    assert abs(psnr_from_mse(0.0024, 1.0) - reported) < 0.1
    lo, hi = psnr_from_mse(0.00245, 1.0), psnr_from_mse(0.00235, 1.0)
    assert lo <= reported <= hi


def test_psnr_examples():
    ref = np.zeros((16, 16))
    ref[0, 0] = 1.0
    x = ref.copy()
    assert psnr(x, ref) == math.inf
    x = ref + 0.01
    assert psnr(x, ref) == pytest.approx(40.0, abs=1e-9)
    assert psnr(2 * x, 2 * ref) == pytest.approx(psnr(x, ref), abs=1e-9)
    with pytest.raises(InvalidArgumentError):
        psnr(x, np.zeros((16, 16)))


def test_gaussian_window():
    w = gaussian_window()
    assert w.shape == (11, 11)
    assert w.sum() == pytest.approx(1.0)
    assert w[5, 5] == w.max()


def test_ssim_identical_is_one():
    rng = np.random.default_rng(1)
    x = rng.random((20, 20))
    assert ssim(x, x) == 1.0


def test_ssim_matches_brute_force():
    rng = np.random.default_rng(2)
    ref = rng.random((16, 18))
    x = ref + 0.2 * rng.standard_normal(ref.shape)
    assert ssim(x, ref) == pytest.approx(brute_force_ssim(x, ref), abs=1e-12)


def test_ssim_constant_images():
    c1v, c2v = 0.3, 0.8
    x, ref = np.full((16, 16), c1v), np.full((16, 16), c2v)
    C1 = (0.01 * c2v) ** 2
    expected = (2 * c1v * c2v + C1) / (c1v ** 2 + c2v ** 2 + C1)
    assert ssim(x, ref) == pytest.approx(expected, abs=1e-12)


def test_ssim_monotone_in_scale():
    rng = np.random.default_rng(3)
    ref = rng.random((24, 24))
    vals = [ssim(ref * (1 + d), ref) for d in (0.1, 0.01, 0.001)]
    assert all(v < 1 for v in vals)
    assert vals[0] < vals[1] < vals[2]


def test_ssim_too_small():
    with pytest.raises(InvalidArgumentError):
        ssim(np.ones((10, 12)), np.ones((10, 12)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 2.0))
def test_ssim_bounds(seed, noise):
    rng = np.random.default_rng(seed)
    ref = rng.random((12, 12)) + 0.1
    x = ref + noise * rng.standard_normal(ref.shape)
    v = ssim(x, ref)
    assert -1 <= v <= 1
    assert v < 1


@pytest.mark.parametrize("op", AUGMENT_OPS)
def test_metrics_dihedral_invariance(op):
    rng = np.random.default_rng(4)
    ref = rng.random((16, 16))
    x = ref + 0.1 * rng.standard_normal(ref.shape)
    xa, ra = augment(x, op), augment(ref, op)
    assert mse(xa, ra) == pytest.approx(mse(x, ref), rel=1e-12)
    assert psnr(xa, ra) == pytest.approx(psnr(x, ref), rel=1e-12)
    assert ssim(xa, ra) == pytest.approx(ssim(x, ref), rel=1e-10)


def test_report_rows_and_csv(tmp_path):
    rng = np.random.default_rng(5)
    ref = rng.random((16, 16))
    recons = {
        ("ref", 4.0): ref,
        ("noisy", 4.0): ref + 0.05 * rng.standard_normal(ref.shape),
        ("bad", 4.0): np.zeros((8, 8)),
    }
    rep = build_report(recons, ref, "ref0")
    row = rep.row("ref", 4.0)
    assert (row.mse, row.ssim, row.psnr_db) == (0.0, 1.0, math.inf)
    noisy = rep.row("noisy", 4.0)
    assert noisy.psnr_db == pytest.approx(10 * math.log10(ref.max() ** 2 / noisy.mse), abs=1e-9)
    assert rep.row("bad", 4.0).error
    path = tmp_path / "r.csv"
    rep.to_csv(path)
    text = path.read_text()
    assert text.splitlines()[0] == "method,R,MSE,SSIM,PSNR"
    assert "ref,4.0,0.0,1.0,inf" in text
    back = read_report_csv(path)
    assert back.row("noisy", 4.0).psnr_db == noisy.psnr_db
    rep2 = build_report(recons, ref, "ref0")
    assert rep2.to_csv_text() == text


def test_average_reports():
    rng = np.random.default_rng(6)
    reps = []
    for _ in range(3):
        ref = rng.random((16, 16))
        reps.append(build_report({("a", 4.0): ref + 0.1}, ref))
    avg = average_reports(reps)
    row = avg.row("a", 4.0)
    assert row.n_images == 3
    assert row.mse == pytest.approx(np.mean([r.rows[0].mse for r in reps]))


def test_error_map_and_pgm(tmp_path):
    ref = np.ones((4, 4))
    x = ref.copy()
    x[0, 0] = 0.75  # 5 * 0.25 saturates
    x[0, 1] = 0.875  # 5 * 0.125 = 0.625 of full scale
    em = error_map(x, ref, amplification=5)
    assert em[0, 0] == 255 and em[0, 1] == round(255 * 0.625) and em[1, 1] == 0
    write_pgm(tmp_path / "e.pgm", em)
    data = (tmp_path / "e.pgm").read_bytes()
    assert data.startswith(b"P5\n4 4\n255\n") and len(data) == 11 + 16
