"""Raster types, grayscale conversion, summed-area tables and image I/O.

Intensities are stored as float64 in [0, 1]. 8-bit sources are divided by
255 when decoded.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

# values a hair outside [0, 1] from float round-off are clipped, not rejected
_RANGE_EPS = 1e-9


class ImageError(ValueError):
    """Raised for malformed rasters, bad dimensions or undecodable files."""


class BoundsError(ImageError):
    """Raised when a rectangle does not lie inside the queried image."""


@dataclass(frozen=True)
class GrayImage:
    """Single-channel image, ``data`` has shape ``(height, width)``."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ImageError(f"expected a non-empty 2-D raster, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ImageError("raster contains non-finite values")
        lo, hi = float(arr.min()), float(arr.max())
        if lo < -_RANGE_EPS or hi > 1.0 + _RANGE_EPS:
            raise ImageError(f"intensities must lie in [0, 1], got [{lo}, {hi}]")
        arr = np.clip(arr, 0.0, 1.0)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def crop(self, rect: "Rect") -> "GrayImage":
        rect.check_inside(self.width, self.height)
        return GrayImage(self.data[rect.y : rect.y + rect.h, rect.x : rect.x + rect.w])


@dataclass(frozen=True)
class IntegralImage:
    """Summed-area table; ``data[y, x]`` is the sum of ``i[y', x']`` for
    ``y' <= y`` and ``x' <= x``."""

    data: np.ndarray

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def total(self) -> float:
        return float(self.data[-1, -1])


@dataclass(frozen=True)
class Rect:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise BoundsError(f"rect extents must be >= 1, got {self.w}x{self.h}")

    @property
    def area(self) -> int:
        return self.w * self.h

    def inside(self, width: int, height: int) -> bool:
        return (
            self.x >= 0
            and self.y >= 0
            and self.x + self.w <= width
            and self.y + self.h <= height
        )

    def check_inside(self, width: int, height: int) -> None:
        if not self.inside(width, height):
            raise BoundsError(f"{self} does not fit inside a {width}x{height} image")

    def iou(self, other: "Rect") -> float:
        ix = max(0, min(self.x + self.w, other.x + other.w) - max(self.x, other.x))
        iy = max(0, min(self.y + self.h, other.y + other.h) - max(self.y, other.y))
        inter = ix * iy
        union = self.area + other.area - inter
        return inter / union


def to_grayscale(rgb) -> GrayImage:
    """Convert an ``(H, W, 3)`` raster with channels in [0, 1] to luma."""
    arr = np.asarray(rgb, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageError(f"expected an (H, W, 3) raster, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ImageError("raster has a zero dimension")
    r, g, b = LUMA_WEIGHTS
    gray = r * arr[..., 0] + g * arr[..., 1] + b * arr[..., 2]
    return GrayImage(gray)


def integral_image(img: GrayImage) -> IntegralImage:
    # cumsum along both axes is a single pass per axis, O(width * height)
    data = np.cumsum(np.cumsum(img.data, axis=0), axis=1)
    data.setflags(write=False)
    return IntegralImage(data)


def squared_integral_image(img: GrayImage) -> IntegralImage:
    data = np.cumsum(np.cumsum(img.data * img.data, axis=0), axis=1)
    data.setflags(write=False)
    return IntegralImage(data)


def box_sum(ii: IntegralImage, r: Rect) -> float:
    """Exact sum of the source pixels inside ``r`` from four corner lookups."""
    r.check_inside(ii.width, ii.height)
    d = ii.data
    x0, y0 = r.x - 1, r.y - 1
    x1, y1 = r.x + r.w - 1, r.y + r.h - 1
    total = d[y1, x1]
    if x0 >= 0:
        total -= d[y1, x0]
    if y0 >= 0:
        total -= d[y0, x1]
    if x0 >= 0 and y0 >= 0:
        total += d[y0, x0]
    return float(total)


def box_sums(ii: IntegralImage, x0, y0, x1, y1) -> np.ndarray:
    """Vectorised rectangle sums over half-open boxes ``[x0, x1) x [y0, y1)``.

    Boxes are clipped to the image, so pixels outside contribute 0. Empty
    boxes sum to 0.
    """
    d = ii.data
    h, w = d.shape
    x0 = np.clip(np.asarray(x0), 0, w)
    x1 = np.clip(np.asarray(x1), 0, w)
    y0 = np.clip(np.asarray(y0), 0, h)
    y1 = np.clip(np.asarray(y1), 0, h)
    x1 = np.maximum(x1, x0)
    y1 = np.maximum(y1, y0)
    return (
        _corner(d, y1 - 1, x1 - 1)
        - _corner(d, y0 - 1, x1 - 1)
        - _corner(d, y1 - 1, x0 - 1)
        + _corner(d, y0 - 1, x0 - 1)
    )


def _corner(d: np.ndarray, y, x) -> np.ndarray:
    # zero-padded convention: lookups at -1 read as 0
    valid = (y >= 0) & (x >= 0)
    vals = d[np.maximum(y, 0), np.maximum(x, 0)]
    return np.where(valid, vals, 0.0)


def bilinear_sample(arr: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``arr`` at real coordinates with clamp-to-edge bilinear weights."""
    h, w = arr.shape
    xs = np.clip(xs, 0.0, w - 1)
    ys = np.clip(ys, 0.0, h - 1)
    x0 = np.minimum(np.floor(xs).astype(np.intp), w - 1)
    y0 = np.minimum(np.floor(ys).astype(np.intp), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = arr[y0, x0] * (1 - fx) + arr[y0, x1] * fx
    bottom = arr[y1, x0] * (1 - fx) + arr[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def resize(img: GrayImage, new_w: int, new_h: int) -> GrayImage:
    """Bilinear resize using pixel-centre alignment.

    Output pixel ``j`` samples source coordinate ``(j + 0.5) * w / new_w - 0.5``
    clamped to the valid range.
    """
    if new_w < 1 or new_h < 1:
        raise ImageError(f"target dimensions must be >= 1, got {new_w}x{new_h}")
    if (new_w, new_h) == (img.width, img.height):
        return img
    xs = (np.arange(new_w) + 0.5) * (img.width / new_w) - 0.5
    ys = (np.arange(new_h) + 0.5) * (img.height / new_h) - 0.5
    gx, gy = np.meshgrid(xs, ys)
    out = bilinear_sample(img.data, gx, gy)
    return GrayImage(np.clip(out, 0.0, 1.0))


# ---------------------------------------------------------------------------
# decoding / encoding


def _pgm_tokens(buf: bytes, count: int, pos: int) -> tuple[list[bytes], int]:
    tokens = []
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageError("truncated PGM header")
        tokens.append(buf[start:pos])
    return tokens, pos


def decode_pgm(buf: bytes) -> GrayImage:
    """Decode binary (P5) or ASCII (P2) PGM bytes."""
    magic = buf[:2]
    if magic not in (b"P5", b"P2"):
        raise ImageError(f"not a PGM file (magic {magic!r})")
    try:
        (w, h, maxval), pos = _pgm_tokens(buf, 3, 2)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ImageError(f"bad PGM header: {exc}") from exc
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise ImageError(f"bad PGM header values {w}x{h} maxval={maxval}")
    if magic == b"P5":
        pos += 1  # single whitespace byte before the raster
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
        nbytes = w * h * dtype.itemsize
        raw = buf[pos : pos + nbytes]
        if len(raw) < nbytes:
            raise ImageError(f"PGM raster truncated: {len(raw)} of {nbytes} bytes")
        pix = np.frombuffer(raw, dtype=dtype).astype(np.float64)
    else:
        fields = buf[pos:].split()
        if len(fields) < w * h:
            raise ImageError(f"PGM raster truncated: {len(fields)} of {w * h} samples")
        pix = np.array([int(t) for t in fields[: w * h]], dtype=np.float64)
    if pix.max(initial=0) > maxval:
        raise ImageError("PGM sample exceeds maxval")
    return GrayImage(pix.reshape(h, w) / maxval)


def encode_pgm(img: GrayImage) -> bytes:
    """Binary 8-bit PGM, used for debug dumps."""
    pix = np.floor(img.data * 255.0 + 0.5).astype(np.uint8)
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + pix.tobytes()


def write_pgm(path: PathLike, img: GrayImage) -> None:
    Path(path).write_bytes(encode_pgm(img))


def read_image(path: PathLike) -> GrayImage:
    """Load a PGM (own decoder) or any Pillow-readable format as grayscale."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise ImageError(f"cannot read {path}: {exc}") from exc
    if buf[:2] in (b"P5", b"P2"):
        return decode_pgm(buf)
    from io import BytesIO

    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(BytesIO(buf)) as im:
            im.load()
            if im.mode in ("L", "I;16", "I", "F"):
                arr = np.asarray(im, dtype=np.float64)
                scale = 255.0 if im.mode == "L" else float(max(arr.max(), 1.0))
                return GrayImage(arr / scale)
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageError(f"cannot decode {path}: {exc}") from exc
    return to_grayscale(rgb)


def sniff_image(path: PathLike) -> None:
    """Cheap readability check that parses the header only."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(512)
    except OSError as exc:
        raise ImageError(f"cannot read {path}: {exc}") from exc
    if head[:2] in (b"P5", b"P2"):
        _pgm_tokens(head, 3, 2)
        return
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im.size
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageError(f"cannot decode {path}: {exc}") from exc


def gaussian_kernel_1d(sigma: float, radius: int | None = None) -> np.ndarray:
    """Normalised sampled Gaussian truncated at ``radius`` (default ceil(3 sigma))."""
    if radius is None:
        radius = int(math.ceil(3.0 * sigma))
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(k * k) / (2.0 * sigma * sigma))
    return g / g.sum()
