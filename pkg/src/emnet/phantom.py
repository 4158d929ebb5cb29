"""Synthetic ellipsoid phantoms for training and evaluation.

Each phantom is a noisy scalar volume containing one ellipsoid "organ" per
foreground label. Labels come from the exact ellipsoid inequality
((x-c)/r)^2-sum <= 1; the image gets a soft-edged version of each organ
(linear ramp over the outer 30% of the normalized radius) on a dim
background plus Gaussian noise, so boundaries are learnable but not free.

With no explicit organ list, organs are placed on distinct octant anchors
with seeded jitter so they never collide; a 2-class phantom centers its
single organ instead.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError

_EDGE = 0.3  # image ramp width, in units of the normalized ellipsoid radius
_BACKGROUND = 0.1


@dataclass
class PhantomSpec:
    """Sampling ranges for one phantom.

    ``organs`` pins explicit ellipsoids as (label, center, radii[, intensity])
    tuples; otherwise organs are drawn per label: anchor + uniform jitter for
    the center, semi-axes as uniform extent fractions from ``radius_range``
    (size-aware default when None), and intensity from that label's slice of
    ``intensity_range`` (the band splits evenly across labels so organs stay
    distinguishable).
    """

    extents: tuple = (32, 32, 32)
    classes: int = 5  # background + classes-1 organs
    organs: list | None = None  # explicit [(label, center, radii[, intensity])]
    center_jitter: float = 0.04  # anchor jitter, as a fraction of the extent
    radius_range: tuple | None = None  # semi-axis range, extent fractions
    intensity_range: tuple = (0.35, 0.95)
    noise: float = 0.05
    seed: int = 0


def _anchors(count: int) -> list:
    if count == 1:
        return [(0.5, 0.5, 0.5)]
    lo, hi = 0.28, 0.72
    pts = [(x, y, z) for x in (lo, hi) for y in (lo, hi) for z in (lo, hi)]
    return pts[:count]


def _intensity_band(spec: PhantomSpec, label: int) -> tuple:
    """Slice of the intensity range reserved for one label."""
    lo, hi = spec.intensity_range
    width = (hi - lo) / (spec.classes - 1)
    return lo + (label - 1) * width, lo + label * width


def _sample_organs(spec: PhantomSpec, rng: np.random.Generator) -> list:
    n = spec.classes - 1
    if n > 8:
        raise DataError(f"at most 8 foreground classes fit the octant layout, "
                        f"got {n}")
    organs = []
    ext = np.asarray(spec.extents, dtype=np.float64)
    frac_range = spec.radius_range or ((0.22, 0.30) if n == 1 else (0.12, 0.20))
    for label, anchor in zip(range(1, spec.classes), _anchors(n)):
        jitter = rng.uniform(-spec.center_jitter, spec.center_jitter, 3)
        center = (np.asarray(anchor) + jitter) * ext
        frac = rng.uniform(*frac_range, 3)
        intensity = rng.uniform(*_intensity_band(spec, label))
        organs.append((label, tuple(center), tuple(frac * ext), intensity))
    return organs


def _validate_organs(spec: PhantomSpec) -> list:
    organs = []
    for organ in spec.organs:
        if len(organ) == 3:
            (label, center, radii), intensity = organ, None
        elif len(organ) == 4:
            label, center, radii, intensity = organ
        else:
            raise DataError("organ tuples are (label, center, radii[, intensity])")
        label = int(label)
        if not 1 <= label < spec.classes:
            raise DataError(f"organ label {label} outside [1, {spec.classes})")
        center = tuple(float(c) for c in center)
        radii = tuple(float(r) for r in radii)
        if len(center) != 3 or len(radii) != 3 or min(radii) <= 0:
            raise DataError(f"organ {label}: need 3 center and 3 positive radii")
        for c, r, e in zip(center, radii, spec.extents):
            if c - r < 0 or c + r > e:
                raise DataError(
                    f"organ {label} exceeds volume bounds: center {center}, "
                    f"radii {radii}, extents {spec.extents}"
                )
        if intensity is None:
            band = _intensity_band(spec, label)
            intensity = 0.5 * (band[0] + band[1])
        organs.append((label, center, radii, float(intensity)))
    return organs


def gen_phantom(spec: PhantomSpec):
    """Returns (image [1, X, Y, Z] float32, labels [X, Y, Z] uint8)."""
    if spec.classes < 2:
        raise DataError(f"classes must be >= 2, got {spec.classes}")
    rng = np.random.default_rng(spec.seed)
    organs = _validate_organs(spec) if spec.organs is not None \
        else _sample_organs(spec, rng)
    grids = np.meshgrid(*[np.arange(e, dtype=np.float64) for e in spec.extents],
                        indexing="ij")
    labels = np.zeros(spec.extents, dtype=np.uint8)
    image = np.full(spec.extents, _BACKGROUND, dtype=np.float64)
    for label, center, radii, intensity in organs:
        e = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
        labels[e <= 1.0] = label
        w = np.clip((1.0 - e) / _EDGE, 0.0, 1.0)
        image += (intensity - _BACKGROUND) * w
    if spec.noise > 0:
        image += rng.normal(0.0, spec.noise, spec.extents)
    return image.astype(np.float32)[None], labels


def gen_dataset(count: int, spec: PhantomSpec, seed: int = 0) -> list:
    """``count`` independent phantoms; per-item seeds derive from ``seed``."""
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**63 - 1, size=count)
    return [gen_phantom(replace(spec, seed=int(s))) for s in seeds]
