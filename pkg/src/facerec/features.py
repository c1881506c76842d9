"""SURF keypoints and descriptors over integral images, and the affine
view-simulation wrapper (ASURF) that runs SURF on tilted/rotated copies of
an image and maps the keypoints back.

Box-filter layouts follow the usual 9x9 base pattern scaled to odd filter
sizes ``3 * (2**(octave + 1) * (level + 1) + 1)`` (9, 15, 21, 27 for the
first octave), with the determinant ``Dxx * Dyy - (0.9 * Dxy)**2`` and every
box sum divided by the filter area.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .filter import blur_axis
from .imaging import (
    GrayImage,
    IntegralImage,
    PathLike,
    bilinear_sample,
    box_sums,
    gaussian_kernel_1d,
    integral_image,
)

logger = logging.getLogger(__name__)

DESCRIPTOR_DIM = 64
DXY_WEIGHT = 0.9
# integral-image round-off grows with the image total; responses below this
# fraction of it are treated as an exactly flat patch
_FLAT_RTOL = 1e-11
# a tie between two samples refines to an offset of exactly one half
_OFFSET_SLACK = 1e-9


class FeatureParamError(ValueError):
    pass


@dataclass(frozen=True)
class SurfParams:
    octaves: int = 4
    levels: int = 4
    threshold: float = 1e-4
    upright: bool = False
    max_keypoints: Optional[int] = 500

    def __post_init__(self):
        if self.octaves < 1:
            raise FeatureParamError("octaves must be >= 1")
        if self.levels < 3:
            raise FeatureParamError("levels must be >= 3 for scale-space extrema")
        if self.threshold < 0:
            raise FeatureParamError("threshold must be >= 0")


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    scale: float
    orientation: float
    response: float
    laplacian_sign: int
    view: tuple[float, float] = (1.0, 0.0)


@dataclass(frozen=True)
class AffineView:
    """Rotate by ``angle`` then compress x by ``tilt``.

    ``forward`` maps source pixel coordinates to the simulated image and
    ``backward`` undoes it; both are 2x3 matrices acting on ``(x, y, 1)``.
    """

    tilt: float
    angle: float
    forward: np.ndarray
    backward: np.ndarray

    def to_view(self, xs, ys):
        return _apply(self.forward, xs, ys)

    def to_source(self, xs, ys):
        return _apply(self.backward, xs, ys)


@dataclass
class ScaleSpace:
    width: int
    height: int
    steps: list[int]  # sampling stride per octave
    sizes: list[list[int]]  # filter size per octave and level
    responses: list[np.ndarray]  # (levels, ny, nx) determinant maps per octave
    laplacians: list[np.ndarray]  # matching trace signs
    valid: list[np.ndarray]  # where each filter fits inside the image


def _apply(m: np.ndarray, xs, ys):
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    return m[0, 0] * xs + m[0, 1] * ys + m[0, 2], m[1, 0] * xs + m[1, 1] * ys + m[1, 2]


def _round(v):
    return np.floor(np.asarray(v) + 0.5).astype(np.intp)


# ---------------------------------------------------------------------------
# fast Hessian


def filter_size(octave: int, level: int) -> int:
    return 3 * (2 ** (octave + 1) * (level + 1) + 1)


def filter_scale(size: float) -> float:
    return 1.2 * size / 9.0


def _hessian_at(ii: IntegralImage, size: int, ys: np.ndarray, xs: np.ndarray):
    """Dxx, Dyy, Dxy at integer centres (already area-normalised) and validity."""
    lobe = size // 3
    half = (size - 1) // 2
    h, w = ii.data.shape
    valid = (ys - half >= 0) & (ys + half < h) & (xs - half >= 0) & (xs + half < w)

    # Dyy: full (2l-1) x size column minus three times its middle lobe
    cx0, cx1 = xs - (lobe - 1), xs + lobe
    top = ys - half
    full = box_sums(ii, cx0, top, cx1, top + size)
    mid = box_sums(ii, cx0, top + lobe, cx1, top + 2 * lobe)
    dyy = full - 3.0 * mid

    cy0, cy1 = ys - (lobe - 1), ys + lobe
    left = xs - half
    full = box_sums(ii, left, cy0, left + size, cy1)
    mid = box_sums(ii, left + lobe, cy0, left + 2 * lobe, cy1)
    dxx = full - 3.0 * mid

    tl = box_sums(ii, xs - lobe, ys - lobe, xs, ys)
    tr = box_sums(ii, xs + 1, ys - lobe, xs + lobe + 1, ys)
    bl = box_sums(ii, xs - lobe, ys + 1, xs, ys + lobe + 1)
    br = box_sums(ii, xs + 1, ys + 1, xs + lobe + 1, ys + lobe + 1)
    dxy = tl + br - tr - bl

    area = float(size * size)
    return dxx / area, dyy / area, dxy / area, valid


def hessian_responses(ii: IntegralImage, filter_size: int) -> np.ndarray:
    """Per-pixel approximate Hessian determinant; 0 where the filter does not fit.

    Returns an empty ``(0, 0)`` array when the filter is larger than the image.
    """
    if filter_size < 9 or filter_size % 2 == 0:
        raise FeatureParamError(f"filter size must be odd and >= 9, got {filter_size}")
    h, w = ii.data.shape
    if filter_size > h or filter_size > w:
        return np.zeros((0, 0))
    ys, xs = np.mgrid[0:h, 0:w]
    dxx, dyy, dxy, valid = _hessian_at(ii, filter_size, ys, xs)
    det = dxx * dyy - (DXY_WEIGHT * dxy) ** 2
    return np.where(valid, det, 0.0)


_DROP_WARNED: set = set()


def build_scale_space(ii: IntegralImage, octaves: int = 4, levels: int = 4) -> ScaleSpace:
    h, w = ii.data.shape
    ss = ScaleSpace(w, h, [], [], [], [], [])
    for o in range(octaves):
        sizes = [filter_size(o, lv) for lv in range(levels)]
        if sizes[-1] > min(w, h):
            key = (o, octaves, w, h)
            if key not in _DROP_WARNED:
                _DROP_WARNED.add(key)
                logger.warning(
                    "dropping octaves %d..%d: filter size %d exceeds %dx%d image",
                    o, octaves - 1, sizes[-1], w, h,
                )
            break
        step = 2**o
        ys, xs = np.mgrid[0:h:step, 0:w:step]
        dets, laps, valids = [], [], []
        for size in sizes:
            dxx, dyy, dxy, valid = _hessian_at(ii, size, ys, xs)
            det = dxx * dyy - (DXY_WEIGHT * dxy) ** 2
            dets.append(np.where(valid, det, 0.0))
            laps.append(np.where(dxx + dyy >= 0, 1, -1).astype(np.int8))
            valids.append(valid)
        ss.steps.append(step)
        ss.sizes.append(sizes)
        ss.responses.append(np.stack(dets))
        ss.laplacians.append(np.stack(laps))
        ss.valid.append(np.stack(valids))
    return ss


# ---------------------------------------------------------------------------
# extrema


def _neighbour_max(stack: np.ndarray):
    """Max over the 26 neighbours of every interior cell of a (L, ny, nx) stack.

    Returned as two maps: neighbours before the cell in (level, y, x) order
    and neighbours after it.
    """
    L, ny, nx = stack.shape
    before = np.full((L - 2, ny - 2, nx - 2), -np.inf)
    after = np.full((L - 2, ny - 2, nx - 2), -np.inf)
    for dl in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dl == dy == dx == 0:
                    continue
                nb = stack[1 + dl : L - 1 + dl, 1 + dy : ny - 1 + dy, 1 + dx : nx - 1 + dx]
                out = before if (dl, dy, dx) < (0, 0, 0) else after
                np.maximum(out, nb, out=out)
    return before, after


def _eroded(mask: np.ndarray) -> np.ndarray:
    ny, nx = mask.shape
    out = np.ones((ny - 2, nx - 2), dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            out &= mask[1 + dy : ny - 1 + dy, 1 + dx : nx - 1 + dx]
    return out


def _beats_finer_octaves(ss: ScaleSpace, o: int, lv, iy, ix) -> np.ndarray:
    """Cross-octave suppression for extrema found in octave ``o``.

    Coarser octaves space their filter sizes further apart, so an extremum
    there can sit between sizes a finer octave already sampled. It survives
    only if it beats those intermediate sizes over the 3x3 neighbourhood at
    the finer sampling.
    """
    sizes = ss.sizes[o]
    own = ss.responses[o][lv, iy, ix]
    lo = np.array(sizes)[lv - 1]
    hi = np.array(sizes)[lv + 1]
    mine = np.array(sizes)[lv]
    keep = np.ones(len(lv), dtype=bool)
    step = ss.steps[o]
    for fo in range(o):
        fstep = ss.steps[fo]
        F = ss.responses[fo]
        _, fny, fnx = F.shape
        fy = iy * (step // fstep)
        fx = ix * (step // fstep)
        for fl, fsize in enumerate(ss.sizes[fo]):
            rel = (fsize > lo) & (fsize < hi) & (fsize != mine)
            if not rel.any():
                continue
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy = np.clip(fy + dy, 0, fny - 1)
                    xx = np.clip(fx + dx, 0, fnx - 1)
                    keep &= ~rel | (own > F[fl, yy, xx])
    return keep


def detect_keypoints(ss: ScaleSpace, threshold: float = 1e-4) -> list[Keypoint]:
    """3x3x3 maxima above ``threshold`` refined by a quadratic fit.

    Maxima from coarser octaves must also beat the finer octaves' responses
    at filter sizes between their scale neighbours.

    Extrema whose fitted offset exceeds half a sample in x, y or scale are
    rejected. Results are sorted by response, strongest first.
    """
    found = []
    for o, step in enumerate(ss.steps):
        D = ss.responses[o]
        L, ny, nx = D.shape
        if ny < 3 or nx < 3:
            continue
        before, after = _neighbour_max(D)
        centre = D[1:-1, 1:-1, 1:-1]
        # an exact plateau (e.g. a blob centred between two samples) keeps
        # only its first cell in scan order
        cand = (centre > threshold) & (centre > before) & (centre >= after)
        for li in range(L - 2):
            # the next-larger filter has the smallest valid area
            cand[li] &= _eroded(ss.valid[o][li + 2])
        lv, iy, ix = np.nonzero(cand)
        if lv.size == 0:
            continue
        lv, iy, ix = lv + 1, iy + 1, ix + 1
        if o > 0:
            keep = _beats_finer_octaves(ss, o, lv, iy, ix)
            lv, iy, ix = lv[keep], iy[keep], ix[keep]
            if lv.size == 0:
                continue

        def at(dl, dy, dx):
            return D[lv + dl, iy + dy, ix + dx]

        c = at(0, 0, 0)
        g = np.stack(
            [
                (at(0, 0, 1) - at(0, 0, -1)) / 2,
                (at(0, 1, 0) - at(0, -1, 0)) / 2,
                (at(1, 0, 0) - at(-1, 0, 0)) / 2,
            ],
            axis=-1,
        )
        dxx = at(0, 0, 1) + at(0, 0, -1) - 2 * c
        dyy = at(0, 1, 0) + at(0, -1, 0) - 2 * c
        dss = at(1, 0, 0) + at(-1, 0, 0) - 2 * c
        dxy = (at(0, 1, 1) - at(0, 1, -1) - at(0, -1, 1) + at(0, -1, -1)) / 4
        dxs = (at(1, 0, 1) - at(1, 0, -1) - at(-1, 0, 1) + at(-1, 0, -1)) / 4
        dys = (at(1, 1, 0) - at(1, -1, 0) - at(-1, 1, 0) + at(-1, -1, 0)) / 4
        H = np.stack(
            [
                np.stack([dxx, dxy, dxs], -1),
                np.stack([dxy, dyy, dys], -1),
                np.stack([dxs, dys, dss], -1),
            ],
            axis=-2,
        )
        det = np.linalg.det(H)
        ok = np.abs(det) > 1e-30
        offs = np.zeros_like(g)
        if ok.any():
            offs[ok] = -np.linalg.solve(H[ok], g[ok][..., None])[..., 0]
        ok &= np.all(np.abs(offs) <= 0.5 + _OFFSET_SLACK, axis=1)
        sizes = np.array(ss.sizes[o], dtype=np.float64)
        spacing = sizes[1] - sizes[0]
        for k in np.flatnonzero(ok):
            x = (ix[k] + offs[k, 0]) * step
            y = (iy[k] + offs[k, 1]) * step
            size = sizes[lv[k]] + offs[k, 2] * spacing
            lap = int(ss.laplacians[o][lv[k], iy[k], ix[k]])
            found.append(
                (
                    -float(c[k]),
                    (o, int(lv[k]), int(iy[k]), int(ix[k])),
                    Keypoint(float(x), float(y), filter_scale(size), 0.0, float(c[k]), lap),
                )
            )
    found.sort(key=lambda t: (t[0], t[1]))
    return [kp for _, _, kp in found]


# ---------------------------------------------------------------------------
# orientation and description


def _flat_tol(ii: IntegralImage) -> float:
    return _FLAT_RTOL * max(1.0, abs(ii.total()))


def _haar(ii: IntegralImage, px: np.ndarray, py: np.ndarray, size: np.ndarray):
    """Haar wavelet responses (dx, dy) of side ``size`` centred on integer pixels."""
    half = size // 2
    x0, x1 = px - half, px + half
    y0, y1 = py - half, py + half
    left = box_sums(ii, x0, y0, px, y1)
    right = box_sums(ii, px, y0, x1, y1)
    top = box_sums(ii, x0, y0, x1, py)
    bottom = box_sums(ii, x0, py, x1, y1)
    return right - left, bottom - top


_ORI_I, _ORI_J = np.mgrid[-6:7, -6:7]
_ORI_MASK = _ORI_I**2 + _ORI_J**2 < 36
_ORI_I = _ORI_I[_ORI_MASK].astype(np.float64)
_ORI_J = _ORI_J[_ORI_MASK].astype(np.float64)
_ORI_GAUSS = np.exp(-(_ORI_I**2 + _ORI_J**2) / (2 * 2.0**2))
_WINDOW = math.pi / 3


def _orientations(ii: IntegralImage, xs, ys, scales) -> np.ndarray:
    xs, ys, scales = (np.asarray(a, dtype=np.float64)[:, None] for a in (xs, ys, scales))
    px = _round(xs + _ORI_I * scales)
    py = _round(ys + _ORI_J * scales)
    size = np.maximum(2, 2 * _round(2.0 * scales))
    dx, dy = _haar(ii, px, py, np.broadcast_to(size, px.shape))
    dx = dx * _ORI_GAUSS
    dy = dy * _ORI_GAUSS
    ang = np.mod(np.arctan2(dy, dx), 2 * math.pi)
    # window k covers angles in [ang_k, ang_k + pi/3)
    rel = np.mod(ang[:, None, :] - ang[:, :, None], 2 * math.pi)
    inwin = rel < _WINDOW
    sx = np.einsum("kcs,ks->kc", inwin, dx)
    sy = np.einsum("kcs,ks->kc", inwin, dy)
    mag = sx * sx + sy * sy
    best = np.argmax(mag, axis=1)
    rows = np.arange(len(best))
    bx, by = sx[rows, best], sy[rows, best]
    theta = np.mod(np.arctan2(by, bx), 2 * math.pi)
    flat = np.sqrt(mag[rows, best]) <= _flat_tol(ii)
    theta[flat] = 0.0
    # arctan2 can return exactly 2*pi after the mod for tiny negative angles
    theta[theta >= 2 * math.pi] = 0.0
    return theta


def assign_orientation(ii: IntegralImage, kp: Keypoint) -> float:
    """Dominant gradient direction around ``kp`` in radians, in [0, 2 pi)."""
    return float(_orientations(ii, [kp.x], [kp.y], [kp.scale])[0])


_DESC_U = (np.arange(-10, 10) + 0.5)
_DESC_V, _DESC_Ug = np.meshgrid(_DESC_U, _DESC_U, indexing="ij")  # (row=v, col=u)
_DESC_V = _DESC_V.ravel()
_DESC_Ug = _DESC_Ug.ravel()
_DESC_GAUSS = np.exp(-(_DESC_Ug**2 + _DESC_V**2) / (2 * 3.3**2))
_DESC_CELL = ((np.floor(_DESC_V + 10) // 5) * 4 + (np.floor(_DESC_Ug + 10) // 5)).astype(np.intp)


def _descriptors(ii: IntegralImage, xs, ys, scales, thetas) -> np.ndarray:
    xs, ys, scales, thetas = (
        np.asarray(a, dtype=np.float64)[:, None] for a in (xs, ys, scales, thetas)
    )
    cos, sin = np.cos(thetas), np.sin(thetas)
    u = _DESC_Ug * scales
    v = _DESC_V * scales
    px = _round(xs + u * cos - v * sin)
    py = _round(ys + u * sin + v * cos)
    size = np.maximum(2, 2 * _round(scales))
    dx, dy = _haar(ii, px, py, np.broadcast_to(size, px.shape))
    rx = (dx * cos + dy * sin) * _DESC_GAUSS
    ry = (-dx * sin + dy * cos) * _DESC_GAUSS
    n = len(xs)
    out = np.zeros((n, 16, 4))
    onehot = np.zeros((400, 16))
    onehot[np.arange(400), _DESC_CELL] = 1.0
    out[:, :, 0] = rx @ onehot
    out[:, :, 1] = ry @ onehot
    out[:, :, 2] = np.abs(rx) @ onehot
    out[:, :, 3] = np.abs(ry) @ onehot
    out = out.reshape(n, DESCRIPTOR_DIM)
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    flat = norms[:, 0] <= _flat_tol(ii)
    out[~flat] /= norms[~flat]
    out[flat] = 0.0
    return out


def compute_descriptor(ii: IntegralImage, kp: Keypoint) -> np.ndarray:
    """64-d SURF descriptor of an oriented keypoint (L2-normalised)."""
    return _descriptors(ii, [kp.x], [kp.y], [kp.scale], [kp.orientation])[0]


def describe(ii: IntegralImage, kps: Sequence[Keypoint], upright: bool = False):
    """Assign orientations (unless ``upright``) and descriptors in one batch."""
    if not kps:
        return [], np.zeros((0, DESCRIPTOR_DIM))
    xs = [k.x for k in kps]
    ys = [k.y for k in kps]
    sc = [k.scale for k in kps]
    if upright:
        thetas = np.zeros(len(kps))
    else:
        thetas = _orientations(ii, xs, ys, sc)
    desc = _descriptors(ii, xs, ys, sc, thetas)
    oriented = [
        Keypoint(k.x, k.y, k.scale, float(t), k.response, k.laplacian_sign, k.view)
        for k, t in zip(kps, thetas)
    ]
    return oriented, desc


# ---------------------------------------------------------------------------
# SURF / ASURF drivers


def surf_detect(img: GrayImage, params: SurfParams = SurfParams()) -> list[Keypoint]:
    ii = integral_image(img)
    ss = build_scale_space(ii, params.octaves, params.levels)
    return detect_keypoints(ss, params.threshold)


def surf_extract(img: GrayImage, params: SurfParams = SurfParams()):
    """Plain SURF: capped keypoints with their descriptors."""
    ii = integral_image(img)
    kps = surf_detect(img, params)
    if params.max_keypoints is not None:
        kps = kps[: params.max_keypoints]
    return describe(ii, kps, params.upright)


def affine_simulate(img: GrayImage, tilt: float, angle: float):
    """Rotate ``img`` by ``angle`` radians then compress x by ``tilt``.

    The compressed axis is low-passed with a Gaussian of
    ``sigma = 0.8 * sqrt(tilt**2 - 1)`` before resampling. Returns the
    :class:`AffineView` and the simulated image.
    """
    if not tilt >= 1.0:
        raise FeatureParamError(f"tilt must be >= 1, got {tilt}")
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    w, h = img.width, img.height
    corners = np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], dtype=np.float64)
    mapped = corners @ rot.T
    lo = mapped.min(axis=0)
    span = mapped.max(axis=0) - lo
    # forward: p -> diag(1/t, 1) (R p - lo)
    scale = np.array([[1.0 / tilt, 0.0], [0.0, 1.0]])
    fwd_lin = scale @ rot
    forward = np.hstack([fwd_lin, (-(scale @ lo))[:, None]])
    bwd_lin = rot.T @ np.array([[tilt, 0.0], [0.0, 1.0]])
    backward = np.hstack([bwd_lin, (rot.T @ lo)[:, None]])
    view = AffineView(float(tilt), float(angle), forward, backward)

    if tilt == 1.0 and angle == 0.0:
        return view, img

    rw = int(math.floor(span[0] + 1e-9)) + 1
    rh = int(math.floor(span[1] + 1e-9)) + 1
    gy, gx = np.mgrid[0:rh, 0:rw].astype(np.float64)
    # rotated frame -> source
    sx = rot[0, 0] * (gx + lo[0]) + rot[1, 0] * (gy + lo[1])
    sy = rot[0, 1] * (gx + lo[0]) + rot[1, 1] * (gy + lo[1])
    rotated = bilinear_sample(img.data, sx, sy)
    if tilt > 1.0:
        sigma = 0.8 * math.sqrt(tilt * tilt - 1.0)
        rotated = blur_axis(rotated, gaussian_kernel_1d(sigma), axis=1)
        out_w = int(math.floor(span[0] / tilt + 1e-9)) + 1
        # the last column may fall past the final rotated sample; clamp it
        cols = np.minimum(np.arange(out_w) * tilt, rw - 1)
        c0 = np.minimum(np.floor(cols).astype(np.intp), rw - 1)
        c1 = np.minimum(c0 + 1, rw - 1)
        f = cols - c0
        rotated = rotated[:, c0] * (1 - f) + rotated[:, c1] * f
    return view, GrayImage(np.clip(rotated, 0.0, 1.0))


DEFAULT_TILTS = (1.0, math.sqrt(2.0), 2.0)


def default_view_grid(tilts: Sequence[float] = DEFAULT_TILTS) -> list[tuple[float, float]]:
    """Rotations stepped by 72/t degrees over [0, 180) for every tilt t.

    A tilt of 1 contributes only the unrotated view.
    """
    grid = []
    for t in tilts:
        t = float(t)
        if t < 1.0:
            raise FeatureParamError(f"tilt must be >= 1, got {t}")
        if t == 1.0:
            grid.append((1.0, 0.0))
            continue
        step = 72.0 / t
        k = 0
        while k * step < 180.0 - 1e-9:
            grid.append((t, math.radians(k * step)))
            k += 1
    return grid


def asurf_extract(
    img: GrayImage,
    view_grid: Optional[Sequence[tuple[float, float]]] = None,
    params: SurfParams = SurfParams(),
):
    """SURF over every simulated view, keypoints mapped back to ``img``.

    Returns ``(keypoints, descriptors)``. Keypoints landing outside the
    source image are dropped; the survivors from all views are ranked by
    response (ties keep grid order) and capped at ``params.max_keypoints``
    before description. Orientations are expressed in the view frame the
    descriptor was computed in.
    """
    if view_grid is None:
        view_grid = default_view_grid()
    view_grid = list(view_grid)
    if not view_grid:
        raise FeatureParamError("view grid must not be empty")

    views = []
    pool = []  # (-response, view index, rank in view, source keypoint, view keypoint)
    for vi, (tilt, angle) in enumerate(view_grid):
        view, sim = affine_simulate(img, tilt, angle)
        ii = integral_image(sim)
        views.append(ii)
        kps = surf_detect(sim, params)
        if not kps:
            continue
        sx, sy = view.to_source([k.x for k in kps], [k.y for k in kps])
        for rank, (k, x, y) in enumerate(zip(kps, sx, sy)):
            if not (0.0 <= x <= img.width - 1 and 0.0 <= y <= img.height - 1):
                continue
            src = Keypoint(float(x), float(y), k.scale, 0.0, k.response, k.laplacian_sign,
                           (float(tilt), float(angle)))
            pool.append((-k.response, vi, rank, src, k))
    pool.sort(key=lambda t: (t[0], t[1], t[2]))
    if params.max_keypoints is not None:
        pool = pool[: params.max_keypoints]

    order = {}
    for pos, entry in enumerate(pool):
        order.setdefault(entry[1], []).append(pos)
    out_kps: list[Optional[Keypoint]] = [None] * len(pool)
    out_desc = np.zeros((len(pool), DESCRIPTOR_DIM))
    for vi, positions in sorted(order.items()):
        view_kps = [pool[p][4] for p in positions]
        oriented, desc = describe(views[vi], view_kps, params.upright)
        for p, ok, d in zip(positions, oriented, desc):
            src = pool[p][3]
            out_kps[p] = Keypoint(src.x, src.y, src.scale, ok.orientation, src.response,
                                  src.laplacian_sign, src.view)
            out_desc[p] = d
    return out_kps, out_desc


# ---------------------------------------------------------------------------
# descriptor dump: u32 count, u32 dim, then count*dim little-endian float32


def write_descriptors(path: PathLike, desc: np.ndarray) -> None:
    desc = np.asarray(desc, dtype="<f4")
    if desc.ndim != 2:
        desc = desc.reshape(-1, DESCRIPTOR_DIM)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", desc.shape[0], desc.shape[1]))
        fh.write(desc.tobytes())


def read_descriptors(path: PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise ValueError("descriptor dump too short")
    count, dim = struct.unpack_from("<II", buf)
    payload = buf[8:]
    if len(payload) != count * dim * 4:
        raise ValueError(f"descriptor dump payload is {len(payload)} bytes, expected {count * dim * 4}")
    return np.frombuffer(payload, dtype="<f4").reshape(count, dim).astype(np.float64)
