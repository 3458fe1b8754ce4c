"""Image quality metrics on magnitude images and comparison reports.

All metrics compare ``|x|`` against ``|ref|`` and use ``peak = max |ref|``
as the dynamic range.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
CSV_COLUMNS = ("method", "R", "MSE", "SSIM", "PSNR")


def _pair(x, ref):
    x, ref = np.abs(np.asarray(x)), np.abs(np.asarray(ref))
    if x.shape != ref.shape:
        raise InvalidArgumentError(f"shape mismatch {x.shape} vs {ref.shape}")
    return x.astype(np.float64), ref.astype(np.float64)


def mse(x, ref):
    x, ref = _pair(x, ref)
    return float(np.mean((x - ref) ** 2))


def psnr_from_mse(err, peak):
    if err == 0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 / err)


def psnr(x, ref):
    """PSNR in dB; ``math.inf`` when the images agree exactly."""
    x, ref = _pair(x, ref)
    peak = ref.max()
    if peak == 0:
        raise InvalidArgumentError("reference image is all zero")
    return psnr_from_mse(float(np.mean((x - ref) ** 2)), peak)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(x, ref):
    x, ref = _pair(x, ref)
    if min(x.shape) < SSIM_WINDOW:
        raise InvalidArgumentError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    L = ref.max()
    c1, c2 = (SSIM_K1 * L) ** 2, (SSIM_K2 * L) ** 2
    win = gaussian_window()

    def filt(img):
        # "reflect" repeats the edge sample (half-sample symmetric padding)
        return ndimage.correlate(img, win, mode="reflect")

    mu_x, mu_y = filt(x), filt(ref)
    sxx = filt(x * x) - mu_x ** 2
    syy = filt(ref * ref) - mu_y ** 2
    sxy = filt(x * ref) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return num / den


def ssim(x, ref):
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5)."""
    x_, ref_ = _pair(x, ref)
    if np.array_equal(x_, ref_):
        if min(x_.shape) < SSIM_WINDOW:
            raise InvalidArgumentError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
        return 1.0
    return float(np.mean(ssim_map(x_, ref_)))


@dataclass
class ReportRow:
    method: str
    R: float
    mse: float
    ssim: float
    psnr_db: float
    peak: float = 1.0
    n_images: int = 1
    error: str | None = None


@dataclass
class ReconReport:
    """Rows keyed by (method, R).

    Single-image rows satisfy ``psnr_db == 10 log10(peak^2 / mse)``.
    Rows produced by :func:`average_reports` hold per-metric means over
    ``n_images`` images, so that identity only holds image by image.
    """

    rows: list = field(default_factory=list)
    reference_id: str = ""

    def row(self, method, R):
        for r in self.rows:
            if r.method == method and r.R == R:
                return r
        raise KeyError((method, R))

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            f.write(self.to_csv_text())

    def to_csv_text(self):
        lines = [",".join(CSV_COLUMNS)]
        for r in self.rows:
            if r.error:
                lines.append(f"{r.method},{_fmt(r.R)},error,error,error")
            else:
                lines.append(",".join([r.method, _fmt(r.R), _fmt(r.mse), _fmt(r.ssim), _fmt(r.psnr_db)]))
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v) if isinstance(v, float) else str(v)


def read_report_csv(path):
    rows = []
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            if rec["MSE"] == "error":
                rows.append(ReportRow(rec["method"], float(rec["R"]), math.nan, math.nan, math.nan,
                                      error="error"))
            else:
                rows.append(ReportRow(rec["method"], float(rec["R"]), float(rec["MSE"]),
                                      float(rec["SSIM"]), float(rec["PSNR"])))
    return ReconReport(rows)


def build_report(reconstructions, ref, reference_id=""):
    """One row per ``(method, R)`` key of ``reconstructions``.

    A reconstruction whose shape does not match ``ref`` produces an error
    row instead of aborting the report.
    """
    ref = np.asarray(ref)
    peak = float(np.abs(ref).max())
    report = ReconReport(reference_id=reference_id)
    for (method, R), img in reconstructions.items():
        try:
            e = mse(img, ref)
            row = ReportRow(method, R, e, ssim(img, ref), psnr_from_mse(e, peak), peak)
        except InvalidArgumentError as exc:
            row = ReportRow(method, R, math.nan, math.nan, math.nan, peak, error=str(exc))
        report.rows.append(row)
    return report


def average_reports(reports, reference_id="mean"):
    """Per-(method, R) means of each metric across several single-image reports."""
    groups = {}
    for rep in reports:
        for r in rep.rows:
            if r.error is None:
                groups.setdefault((r.method, r.R), []).append(r)
    out = ReconReport(reference_id=reference_id)
    for (method, R), rows in groups.items():
        out.rows.append(ReportRow(
            method, R,
            float(np.mean([r.mse for r in rows])),
            float(np.mean([r.ssim for r in rows])),
            float(np.mean([r.psnr_db for r in rows])),
            float(np.mean([r.peak for r in rows])),
            n_images=len(rows),
        ))
    return out


def to_gray8(img, vmax=None):
    mag = np.abs(np.asarray(img))
    vmax = mag.max() if vmax is None else vmax
    if vmax <= 0:
        return np.zeros(mag.shape, dtype=np.uint8)
    return np.clip(np.round(255 * mag / vmax), 0, 255).astype(np.uint8)


def write_pgm(path, gray):
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(gray.tobytes())


def error_map(x, ref, amplification=5.0):
    """Amplified absolute magnitude error, as 8-bit gray relative to ``max |ref|``."""
    x, r = _pair(x, ref)
    return to_gray8(amplification * np.abs(x - r), vmax=r.max())
