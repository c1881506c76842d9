"""Edge-preserving bilateral smoothing, plus a Gaussian blur used as a
reference point for it.

The bilateral output at pixel ``x`` is the weighted mean

    h(x) = sum_xi g(xi) c(xi, x) s(g(xi), g(x)) / n(x),
    n(x) = sum_xi c(xi, x) s(g(xi), g(x))

over the ``(2 radius + 1)^2`` window clipped at the image border, with
unnormalised Gaussian closeness ``c`` and similarity ``s``. ``n(x)`` is the
plain sum of weights; it is not itself scaled by ``1 / n(x)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .imaging import GrayImage, gaussian_kernel_1d


class FilterParamError(ValueError):
    pass


@dataclass(frozen=True)
class BilateralParams:
    sigma_spatial: float = 3.0
    sigma_range: float = 0.1
    radius: Optional[int] = None

    def __post_init__(self):
        if not self.sigma_spatial > 0:
            raise FilterParamError(f"sigma_spatial must be > 0, got {self.sigma_spatial}")
        if not self.sigma_range > 0:
            raise FilterParamError(f"sigma_range must be > 0, got {self.sigma_range}")
        if self.radius is None:
            object.__setattr__(self, "radius", int(math.ceil(3.0 * self.sigma_spatial)))
        elif self.radius < 1:
            raise FilterParamError(f"radius must be >= 1, got {self.radius}")


def bilateral_filter(img: GrayImage, p: BilateralParams = BilateralParams()) -> GrayImage:
    g = img.data
    h, w = g.shape
    r = p.radius
    padded = np.pad(g, r, mode="constant")
    inside = np.pad(np.ones_like(g), r, mode="constant")
    inv_2ss = 1.0 / (2.0 * p.sigma_spatial**2)
    inv_2sr = 1.0 / (2.0 * p.sigma_range**2)

    num = np.zeros_like(g)
    den = np.zeros_like(g)
    # offsets visited in a fixed order so the float reduction is reproducible
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            closeness = math.exp(-(dx * dx + dy * dy) * inv_2ss)
            nb = padded[r + dy : r + dy + h, r + dx : r + dx + w]
            valid = inside[r + dy : r + dy + h, r + dx : r + dx + w]
            diff = nb - g
            wgt = closeness * np.exp(-(diff * diff) * inv_2sr) * valid
            num += wgt * nb
            den += wgt
    # the centre pixel always carries weight 1, so den >= 1
    out = num / den
    return GrayImage(np.clip(out, g.min(), g.max()))


def gaussian_blur(img: GrayImage, sigma: float) -> GrayImage:
    """Separable Gaussian truncated at 3 sigma, renormalised where clipped."""
    if not sigma > 0:
        raise FilterParamError(f"sigma must be > 0, got {sigma}")
    kernel = gaussian_kernel_1d(sigma)
    out = blur_axis(img.data, kernel, axis=1)
    out = blur_axis(out, kernel, axis=0)
    return GrayImage(np.clip(out, 0.0, 1.0))


def blur_axis(arr: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    """1-D correlation along ``axis`` with border-clipped renormalisation."""
    r = len(kernel) // 2
    moved = np.moveaxis(arr, axis, -1)
    n = moved.shape[-1]
    pad = [(0, 0)] * (moved.ndim - 1) + [(r, r)]
    padded = np.pad(moved, pad, mode="constant")
    ones = np.pad(np.ones(n), (r, r), mode="constant")
    num = np.zeros_like(moved, dtype=np.float64)
    den = np.zeros(n)
    for i, k in enumerate(kernel):
        num += k * padded[..., i : i + n]
        den += k * ones[i : i + n]
    return np.moveaxis(num / den, -1, axis)
