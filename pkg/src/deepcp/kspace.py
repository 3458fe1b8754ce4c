"""Centered unitary FFTs, the undersampled Fourier encoding and Poisson-disk masks.

Fields are plain ``complex128`` numpy arrays of shape ``(H, W)``; most
operators also accept a leading batch axis ``(B, H, W)``.  k-space arrays
and masks use the DC-centered layout (DC at ``(H // 2, W // 2)``).
"""

from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import InfeasibleRError, InvalidArgumentError

_AXES = (-2, -1)


def as_field(x, name="field"):
    """Return ``x`` as a complex128 array, validating the trailing grid dims."""
    x = np.asarray(x)
    if x.ndim < 2:
        raise InvalidArgumentError(f"{name} must be at least 2-D, got shape {x.shape}")
    if x.shape[-1] == 0 or x.shape[-2] == 0:
        raise InvalidArgumentError(f"{name} has a zero dimension: {x.shape}")
    return x.astype(np.complex128, copy=False)


def _check_fft_shape(x):
    if x.shape[-1] < 2 or x.shape[-2] < 2:
        raise InvalidArgumentError(f"FFT needs height, width >= 2, got {x.shape[-2:]}")


def fft2c(x):
    """Unitary 2-D DFT with DC-centered input and output."""
    x = as_field(x)
    _check_fft_shape(x)
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(x, axes=_AXES), norm="ortho"), axes=_AXES)


def ifft2c(k):
    """Inverse of :func:`fft2c`."""
    k = as_field(k)
    _check_fft_shape(k)
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(k, axes=_AXES), norm="ortho"), axes=_AXES)


@dataclass(frozen=True, eq=False)
class SamplingMask:
    """Boolean DC-centered k-space sampling pattern.

    ``min_distance`` is the tuned Poisson-disk spacing at the k-space
    center (0 for a full mask); it is diagnostic only.
    """

    kept: np.ndarray
    target_R: float = 1.0
    calib_radius: float = 0.0
    seed: int = 0
    min_distance: float = field(default=0.0)

    def __post_init__(self):
        kept = np.asarray(self.kept)
        if kept.ndim != 2 or 0 in kept.shape:
            raise InvalidArgumentError(f"mask must be a non-empty 2-D grid, got {kept.shape}")
        kept = kept.astype(bool)
        if not kept.any():
            raise InvalidArgumentError("mask keeps no k-space points")
        kept.setflags(write=False)
        object.__setattr__(self, "kept", kept)

    @property
    def shape(self):
        return self.kept.shape

    @property
    def height(self):
        return self.kept.shape[0]

    @property
    def width(self):
        return self.kept.shape[1]

    @property
    def achieved_R(self):
        return self.kept.size / np.count_nonzero(self.kept)

    def __eq__(self, other):
        if not isinstance(other, SamplingMask):
            return NotImplemented
        return (
            np.array_equal(self.kept, other.kept)
            and self.target_R == other.target_R
            and self.calib_radius == other.calib_radius
            and self.seed == other.seed
        )

    @classmethod
    def full(cls, height, width):
        return cls(np.ones((height, width), dtype=bool))


def _mask_array(m):
    return m.kept if isinstance(m, SamplingMask) else np.asarray(m, dtype=bool)


def _check_shapes(x, m):
    mk = _mask_array(m)
    if x.shape[-2:] != mk.shape[-2:]:
        raise InvalidArgumentError(f"shape mismatch: field {x.shape[-2:]} vs mask {mk.shape[-2:]}")
    return mk


def apply_encoding(p, m):
    """``A p``: masked centered FFT. Unsampled entries are exactly 0."""
    p = as_field(p, "image")
    mk = _check_shapes(p, m)
    return np.where(mk, fft2c(p), 0)


def apply_adjoint(k, m):
    """``A* k``: inverse FFT of the masked k-space."""
    k = as_field(k, "kspace")
    mk = _check_shapes(k, m)
    return ifft2c(np.where(mk, k, 0))


def zero_filled_recon(y, m):
    return apply_adjoint(y, m)


def inner(a, b):
    """Standard complex inner product ``<a, b> = sum(a * conj(b))``."""
    return np.vdot(b, a)


def operator_norm(m, n_iter=50, seed=0, tol=1e-6):
    """Estimate ``||A||`` by power iteration on ``A* A``."""
    mk = _mask_array(m)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(mk.shape) + 1j * rng.standard_normal(mk.shape)
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(n_iter):
        z = apply_adjoint(apply_encoding(x, mk), mk)
        new = np.linalg.norm(z)
        if new == 0:
            return 0.0
        x = z / new
        if abs(new - est) < tol * new:
            est = new
            break
        est = new
    return float(np.sqrt(est))


# --- Poisson-disk sampling -------------------------------------------------

DENSITY_SLOPE = 2.0  # spacing grows from r0 at DC to r0 * (1 + slope) at the corners


def _radial_distance(height, width):
    iy = np.arange(height) - height // 2
    ix = np.arange(width) - width // 2
    return np.hypot(iy[:, None], ix[None, :])


@numba.njit(cache=True)
def _dart_throw(order, radius, occupied, offsets_y, offsets_x, offsets_d):
    height, width = occupied.shape
    kept = occupied.copy()
    n_off = offsets_d.shape[0]
    for idx in order:
        cy = idx // width
        cx = idx % width
        if kept[cy, cx]:
            continue
        r = radius[cy, cx]
        ok = True
        for j in range(n_off):
            if offsets_d[j] >= r:
                break
            y = cy + offsets_y[j]
            x = cx + offsets_x[j]
            if 0 <= y < height and 0 <= x < width and kept[y, x]:
                ok = False
                break
        if ok:
            kept[cy, cx] = True
    return kept


def _offsets(rmax):
    n = int(np.ceil(rmax))
    oy, ox = np.mgrid[-n:n + 1, -n:n + 1]
    oy, ox = oy.ravel(), ox.ravel()
    d = np.hypot(oy, ox)
    sel = (d > 0) & (d < rmax)
    order = np.argsort(d[sel], kind="stable")
    return oy[sel][order].astype(np.int64), ox[sel][order].astype(np.int64), d[sel][order]


def _poisson_trial(r0, rho, calib, order):
    radius = r0 * (1.0 + DENSITY_SLOPE * rho / rho.max())
    oy, ox, od = _offsets(radius.max())
    return _dart_throw(order, radius, calib, oy, ox, od)


def generate_poisson_mask(height, width, target_R, calib_radius, seed, max_bisect=60, rtol=0.1):
    """Variable-density Poisson-disk mask with a fully kept calibration disk.

    Candidates are the grid points in a seeded random order; a candidate is
    kept when no kept point lies closer than the local spacing
    ``r0 * (1 + DENSITY_SLOPE * rho / rho_max)``.  ``r0`` is bisected until
    the achieved acceleration is within ``rtol`` of ``target_R``.
    """
    if target_R < 1:
        raise InvalidArgumentError(f"target_R must be >= 1, got {target_R}")
    if height < 1 or width < 1:
        raise InvalidArgumentError(f"bad grid {height}x{width}")
    if not 0 <= calib_radius < min(height, width) / 2:
        raise InvalidArgumentError(
            f"calib_radius must be in [0, {min(height, width) / 2}), got {calib_radius}")
    meta = dict(target_R=float(target_R), calib_radius=float(calib_radius), seed=int(seed))
    if target_R == 1:
        return SamplingMask(np.ones((height, width), dtype=bool), **meta)

    rho = _radial_distance(height, width)
    calib = rho <= calib_radius
    order = np.random.default_rng(seed).permutation(height * width).astype(np.int64)
    n_target = height * width / target_R

    best, best_err, best_r = None, np.inf, 0.0

    def trial(r0):
        nonlocal best, best_err, best_r
        kept = _poisson_trial(r0, rho, calib, order)
        n = np.count_nonzero(kept)
        err = abs(height * width / n - target_R) / target_R
        if err < best_err:
            best, best_err, best_r = kept, err, r0
        return n, err

    # grow the upper bracket geometrically; huge spacings are slow to test
    lo, hi = 0.0, 1.0
    while trial(hi)[0] > n_target and hi < max(height, width):
        lo, hi = hi, 2.0 * hi
    for _ in range(max_bisect):
        if best_err <= 0.01:
            break
        r0 = 0.5 * (lo + hi)
        n, err = trial(r0)
        if n > n_target:
            lo = r0
        else:
            hi = r0
    if best_err > rtol:
        raise InfeasibleRError(
            f"cannot reach R={target_R} on {height}x{width} with calib_radius={calib_radius} "
            f"(closest achieved R={height * width / np.count_nonzero(best):.3f})")
    return SamplingMask(best, min_distance=best_r, **meta)
