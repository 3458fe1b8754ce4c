"""Classical Chambolle-Pock reconstruction.

Solves ``min_p 0.5 * ||A p - y||^2 + lam * ||Haar(p)||_1`` with the
primal-dual iteration

    d  <- prox_{sigma F*}(d + sigma * A pbar)
    p' <- prox_{tau G}(p - tau * A* d)
    pbar <- p' + theta * (p' - p)

where ``A`` is the masked unitary FFT (``||A|| = 1``).
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InvalidArgumentError
from .kspace import apply_adjoint, apply_encoding, as_field

STEP_PRODUCT_LIMIT = 0.95  # sigma * tau * ||A||^2, with ||A|| = 1


@dataclass(frozen=True)
class CPParams:
    sigma: float = 0.95
    tau: float = 0.95
    theta: float = 1.0
    lam: float = 1e-3
    max_iters: int = 500
    tol: float = 1e-6
    haar_levels: int | None = None  # None: decompose as deep as the grid allows

    def __post_init__(self):
        if not (self.sigma > 0 and self.tau > 0):
            raise ConfigurationError(f"sigma and tau must be positive, got {self.sigma}, {self.tau}")
        if self.sigma * self.tau > STEP_PRODUCT_LIMIT:
            raise ConfigurationError(
                f"sigma*tau = {self.sigma * self.tau:.4g} exceeds {STEP_PRODUCT_LIMIT} (||A|| = 1)")
        if not 0 <= self.theta <= 1:
            raise ConfigurationError(f"theta must be in [0, 1], got {self.theta}")
        if self.lam < 0:
            raise ConfigurationError(f"lambda must be >= 0, got {self.lam}")
        if self.max_iters < 1:
            raise ConfigurationError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.tol < 0:
            raise ConfigurationError(f"tol must be >= 0, got {self.tol}")


@dataclass
class SolveTrace:
    objective: list = field(default_factory=list)
    relative_change: list = field(default_factory=list)
    iterations_run: int = 0
    converged: bool = False

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iteration", "objective", "relative_change"])
            for i, (obj, rel) in enumerate(zip(self.objective, self.relative_change), start=1):
                w.writerow([i, repr(float(obj)), repr(float(rel))])


def prox_sigma_fstar(v, y, sigma):
    """Proximal map of ``sigma * F*`` for ``F(z) = 0.5 * ||z - y||^2``."""
    v, y = as_field(v), as_field(y)
    if v.shape != y.shape:
        raise InvalidArgumentError(f"shape mismatch {v.shape} vs {y.shape}")
    if sigma < 0:
        raise InvalidArgumentError(f"sigma must be >= 0, got {sigma}")
    return (v - sigma * y) / (1.0 + sigma)


def _max_levels(h, w):
    n = 0
    while h % 2 == 0 and w % 2 == 0 and h >= 2 and w >= 2:
        h, w, n = h // 2, w // 2, n + 1
    return n


def _resolve_levels(shape, levels):
    h, w = shape[-2:]
    avail = _max_levels(h, w)
    if levels is None:
        levels = avail
        if levels == 0:
            raise InvalidArgumentError(f"Haar transform needs even dimensions, got {h}x{w}")
    if levels < 1 or levels > avail:
        raise InvalidArgumentError(
            f"{levels}-level Haar transform needs dims divisible by 2^{levels}, got {h}x{w}")
    return levels


def haar2(p, levels=None):
    """Orthonormal multi-level 2-D Haar analysis.

    Coefficients are stored in place in the usual quadrant layout: the
    approximation band occupies the top-left corner, details the rest.
    """
    p = np.array(p, dtype=np.result_type(p, np.float64))
    levels = _resolve_levels(p.shape, levels)
    h, w = p.shape[-2:]
    for _ in range(levels):
        x = p[..., :h, :w]
        a, b = x[..., 0::2, 0::2], x[..., 0::2, 1::2]
        c, d = x[..., 1::2, 0::2], x[..., 1::2, 1::2]
        bands = [
            [(a + b + c + d) / 2, (a - b + c - d) / 2],
            [(a + b - c - d) / 2, (a - b - c + d) / 2],
        ]
        p[..., :h, :w] = np.block(bands)
        h, w = h // 2, w // 2
    return p


def ihaar2(coeffs, levels=None):
    """Inverse of :func:`haar2`."""
    w_ = np.array(coeffs, dtype=np.result_type(coeffs, np.float64))
    levels = _resolve_levels(w_.shape, levels)
    H, W = w_.shape[-2:]
    for k in reversed(range(levels)):
        h, w = H >> k, W >> k
        hh, hw = h // 2, w // 2
        s, dh = w_[..., :hh, :hw], w_[..., :hh, hw:w]
        dv, dd = w_[..., hh:h, :hw], w_[..., hh:h, hw:w]
        out = np.empty(w_.shape[:-2] + (h, w), dtype=w_.dtype)
        out[..., 0::2, 0::2] = (s + dh + dv + dd) / 2
        out[..., 0::2, 1::2] = (s - dh + dv - dd) / 2
        out[..., 1::2, 0::2] = (s + dh - dv - dd) / 2
        out[..., 1::2, 1::2] = (s - dh - dv + dd) / 2
        w_[..., :h, :w] = out
    return w_


def soft_threshold(w, t):
    """Complex soft-thresholding: shrink each magnitude by ``t``, keep the phase."""
    if t < 0:
        raise InvalidArgumentError(f"threshold must be >= 0, got {t}")
    w = np.asarray(w)
    mag = np.abs(w)
    scale = np.maximum(mag - t, 0.0) / np.where(mag > 0, mag, 1.0)
    return w * scale


def prox_tau_g(p, tau, lam, levels=None):
    """Proximal map of ``tau * lam * ||Haar(.)||_1`` (exact: Haar is orthonormal)."""
    if lam == 0:
        return np.array(p, dtype=np.complex128)
    return ihaar2(soft_threshold(haar2(p, levels), tau * lam), levels)


def objective(p, y, m, lam, levels=None):
    r = apply_encoding(p, m) - y
    val = 0.5 * np.vdot(r, r).real
    if lam:
        val += lam * np.abs(haar2(p, levels)).sum()
    return float(val)


def cp_solve(y, m, params=None):
    """Run the classical iteration from ``d = 0``, ``p = pbar = A* y``.

    Stops after ``params.max_iters`` iterations or once the relative primal
    change ``||p' - p|| / ||p||`` drops below ``params.tol``.
    Returns ``(p, SolveTrace)``.
    """
    params = params or CPParams()
    if not isinstance(params, CPParams):
        raise ConfigurationError("params must be a CPParams")
    y = as_field(y, "kspace")
    sigma, tau, theta, lam = params.sigma, params.tau, params.theta, params.lam
    lv = params.haar_levels

    p = apply_adjoint(y, m)
    p_bar = p.copy()
    d = np.zeros_like(y)
    trace = SolveTrace()
    for _ in range(params.max_iters):
        d = prox_sigma_fstar(d + sigma * apply_encoding(p_bar, m), y, sigma)
        p_new = prox_tau_g(p - tau * apply_adjoint(d, m), tau, lam, lv)
        p_bar = p_new + theta * (p_new - p)

        step = np.linalg.norm(p_new - p)
        base = np.linalg.norm(p)
        rel = step / base if base > 0 else (0.0 if step == 0 else np.inf)
        p = p_new
        trace.objective.append(objective(p, y, m, lam, lv))
        trace.relative_change.append(float(rel))
        trace.iterations_run += 1
        if rel < params.tol:
            trace.converged = True
            break
    return p, trace
