"""Ellipse phantoms (Shepp-Logan style) and randomized variants for training."""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError


@dataclass(frozen=True)
class Ellipse:
    center_x: float
    center_y: float
    a: float  # half-axis along the rotated x direction
    b: float
    angle: float  # radians, counter-clockwise
    intensity: float


@dataclass(frozen=True)
class PhantomSpec:
    ellipses: tuple
    height: int = 64
    width: int = 64

    def __post_init__(self):
        if len(self.ellipses) == 0:
            raise InvalidArgumentError("phantom needs at least one ellipse")
        if any(e.a <= 0 or e.b <= 0 for e in self.ellipses):
            raise InvalidArgumentError("ellipse half-axes must be positive")
        if self.height < 1 or self.width < 1:
            raise InvalidArgumentError(f"bad phantom size {self.height}x{self.width}")


# (intensity, a, b, x0, y0, angle in degrees); the "modified" high-contrast table
SHEPP_LOGAN_TABLE = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
)


def shepp_logan_spec(height=64, width=None):
    ellipses = tuple(
        Ellipse(x0, y0, a, b, np.deg2rad(phi), val) for val, a, b, x0, y0, phi in SHEPP_LOGAN_TABLE
    )
    return PhantomSpec(ellipses, height, width or height)


def pixel_centers(height, width):
    """Pixel-center coordinates in [-1, 1]; row 0 is the top (y = +1 side)."""
    x = (2 * np.arange(width) + 1) / width - 1
    y = 1 - (2 * np.arange(height) + 1) / height
    return np.meshgrid(x, y)


def inside_ellipse(e, x, y):
    dx, dy = x - e.center_x, y - e.center_y
    c, s = np.cos(e.angle), np.sin(e.angle)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / e.a) ** 2 + (v / e.b) ** 2 <= 1.0


def render_phantom(spec):
    """Sum of ellipse intensities at each pixel center, as a complex field."""
    x, y = pixel_centers(spec.height, spec.width)
    img = np.zeros((spec.height, spec.width))
    for e in spec.ellipses:
        img[inside_ellipse(e, x, y)] += e.intensity
    return img.astype(np.complex128)


def random_phantom_spec(rng, height=64, width=None, n_extra=(0, 4)):
    """Jittered Shepp-Logan table plus a few random small blobs.

    The head outline scales and rotates as a whole; inner structures are
    perturbed independently so samples differ in shape and contrast.
    """
    width = width or height
    scale = rng.uniform(0.8, 1.0)
    rot = rng.uniform(-np.pi / 12, np.pi / 12)
    shift = rng.uniform(-0.05, 0.05, size=2)
    cr, sr = np.cos(rot), np.sin(rot)
    ellipses = []
    for i, (val, a, b, x0, y0, phi) in enumerate(SHEPP_LOGAN_TABLE):
        if i >= 2:
            a *= rng.uniform(0.8, 1.2)
            b *= rng.uniform(0.8, 1.2)
            x0 += rng.uniform(-0.04, 0.04)
            y0 += rng.uniform(-0.04, 0.04)
            phi += rng.uniform(-15, 15)
            val *= rng.uniform(0.5, 1.5)
        # rigid transform of the whole head
        xs, ys = scale * x0, scale * y0
        cx, cy = cr * xs - sr * ys + shift[0], sr * xs + cr * ys + shift[1]
        ellipses.append(Ellipse(cx, cy, scale * a, scale * b, np.deg2rad(phi) + rot, val))
    for _ in range(rng.integers(n_extra[0], n_extra[1] + 1)):
        r = scale * 0.45 * np.sqrt(rng.uniform())
        t = rng.uniform(0, 2 * np.pi)
        ellipses.append(Ellipse(
            r * np.cos(t) + shift[0], r * np.sin(t) + shift[1],
            scale * rng.uniform(0.02, 0.1), scale * rng.uniform(0.02, 0.1),
            rng.uniform(0, np.pi), rng.uniform(-0.2, 0.3),
        ))
    return PhantomSpec(tuple(ellipses), height, width)
