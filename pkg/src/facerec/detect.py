"""Haar-cascade face detection over integral images.

Cascades are read from the XML dialect OpenCV writes for boosted stump
cascades (``<cascade>`` with ``<stages>``, ``<weakClassifiers>`` holding
``internalNodes``/``leafValues`` and a shared ``<features>`` table of
``x y w h weight`` rects). Only depth-1 trees (stumps) and upright features
are supported.

Feature responses are normalised the way those cascades were trained: the
weighted rect sum is divided by ``N * stddev`` where ``N`` is the area of the
window shrunk by one base pixel on each side and ``stddev`` is the intensity
standard deviation over that same area.
"""

from __future__ import annotations

import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

from .imaging import (
    GrayImage,
    IntegralImage,
    Rect,
    _corner,
    integral_image,
    squared_integral_image,
)

logger = logging.getLogger(__name__)

MIN_STDDEV = 1e-6
DEFAULT_CASCADE = "haarcascade_frontalface_default.xml"


class CascadeParseError(ValueError):
    pass


@dataclass(frozen=True)
class HaarFeature:
    rects: tuple[Rect, ...]
    weights: tuple[float, ...]


@dataclass(frozen=True)
class WeakClassifier:
    feature: HaarFeature
    threshold: float
    left_value: float
    right_value: float


@dataclass(frozen=True)
class CascadeStage:
    classifiers: tuple[WeakClassifier, ...]
    stage_threshold: float


@dataclass(frozen=True)
class CascadeModel:
    base_width: int
    base_height: int
    stages: tuple[CascadeStage, ...]
    _scaled: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    def __post_init__(self):
        if not self.stages:
            raise CascadeParseError("cascade has no stages")
        if self.base_width < 8 or self.base_height < 8:
            raise CascadeParseError(
                f"base window {self.base_width}x{self.base_height} is smaller than 8x8"
            )


@dataclass(frozen=True)
class DetectParams:
    scale_factor: float = 1.1
    min_neighbors: int = 3
    min_size: int = 24
    group_iou: float = 0.3

    def __post_init__(self):
        if not self.scale_factor > 1.0:
            raise ValueError(f"scale_factor must be > 1, got {self.scale_factor}")
        if self.min_neighbors < 0:
            raise ValueError("min_neighbors must be >= 0")


# ---------------------------------------------------------------------------
# XML


def _child(node: ET.Element, tag: str, where: str) -> ET.Element:
    found = node.find(tag)
    if found is None:
        raise CascadeParseError(f"missing element <{tag}> in {where}")
    return found


def _numbers(node: ET.Element, where: str) -> list[float]:
    text = (node.text or "").split()
    try:
        return [float(t) for t in text]
    except ValueError as exc:
        raise CascadeParseError(f"non-numeric content in {where}: {exc}") from exc


def _parse_xml(data: bytes) -> ET.Element:
    parser = ET.XMLPullParser(events=("start", "end"))
    open_tags: list[str] = []
    root = None
    try:
        parser.feed(data)
        for event, elem in parser.read_events():
            if event == "start":
                if root is None:
                    root = elem
                open_tags.append(elem.tag)
            else:
                open_tags.pop()
        parser.close()
    except ET.ParseError as exc:
        for event, elem in parser.read_events():
            if event == "start":
                open_tags.append(elem.tag)
            elif open_tags:
                open_tags.pop()
        if open_tags:
            chain = " > ".join(f"<{t}>" for t in open_tags)
            raise CascadeParseError(
                f"malformed or truncated cascade XML ({exc}); unclosed element {chain}"
            ) from exc
        raise CascadeParseError(f"malformed cascade XML: {exc}") from exc
    if root is None:
        raise CascadeParseError("empty cascade document")
    return root


def load_cascade(source: Union[bytes, str, Path, "object"]) -> CascadeModel:
    """Parse a stump cascade from bytes, a path, or a binary file object."""
    if isinstance(source, (str, Path)):
        data = Path(source).read_bytes()
    elif isinstance(source, (bytes, bytearray)):
        data = bytes(source)
    else:
        data = source.read()
    root = _parse_xml(data)
    cascade = root if root.tag == "cascade" else root.find("cascade")
    if cascade is None:
        raise CascadeParseError("missing element <cascade>")

    feature_type = cascade.findtext("featureType", "HAAR").strip()
    if feature_type != "HAAR":
        raise CascadeParseError(f"unsupported featureType {feature_type!r}")
    try:
        width = int(_child(cascade, "width", "<cascade>").text)
        height = int(_child(cascade, "height", "<cascade>").text)
        declared = int(_child(cascade, "stageNum", "<cascade>").text)
    except (TypeError, ValueError) as exc:
        raise CascadeParseError(f"bad cascade header: {exc}") from exc

    features = []
    for fi, fnode in enumerate(_child(cascade, "features", "<cascade>")):
        where = f"feature {fi}"
        if int(fnode.findtext("tilted", "0").strip() or 0):
            raise CascadeParseError(f"{where}: tilted features are not supported")
        rects, weights = [], []
        for rnode in _child(fnode, "rects", where):
            vals = _numbers(rnode, where)
            if len(vals) != 5:
                raise CascadeParseError(f"{where}: rect needs 5 numbers, got {len(vals)}")
            x, y, w, h = (int(v) for v in vals[:4])
            try:
                r = Rect(x, y, w, h)
            except ValueError as exc:
                raise CascadeParseError(f"{where}: {exc}") from exc
            if not r.inside(width, height):
                raise CascadeParseError(
                    f"{where}: rect {r} lies outside the {width}x{height} base window"
                )
            rects.append(r)
            weights.append(vals[4])
        if not 2 <= len(rects) <= 3:
            raise CascadeParseError(f"{where}: expected 2-3 rects, got {len(rects)}")
        if not (min(weights) < 0 < max(weights)):
            raise CascadeParseError(f"{where}: rect weights must have mixed signs")
        features.append(HaarFeature(tuple(rects), tuple(weights)))

    stages = []
    stage_nodes = list(_child(cascade, "stages", "<cascade>"))
    for si, snode in enumerate(stage_nodes):
        where = f"stage {si}"
        threshold = _numbers(_child(snode, "stageThreshold", where), where)
        if len(threshold) != 1:
            raise CascadeParseError(f"{where}: stageThreshold must be one number")
        weak = []
        for wi, wnode in enumerate(_child(snode, "weakClassifiers", where)):
            wwhere = f"{where} classifier {wi}"
            nodes = _numbers(_child(wnode, "internalNodes", wwhere), wwhere)
            leaves = _numbers(_child(wnode, "leafValues", wwhere), wwhere)
            if len(nodes) != 4 or len(leaves) != 2:
                raise CascadeParseError(f"{wwhere}: only stump classifiers are supported")
            left, right, fidx, thr = nodes
            if (left, right) != (0, -1):
                raise CascadeParseError(f"{wwhere}: only stump classifiers are supported")
            fidx = int(fidx)
            if not 0 <= fidx < len(features):
                raise CascadeParseError(f"{wwhere}: feature index {fidx} out of range")
            weak.append(WeakClassifier(features[fidx], thr, leaves[0], leaves[1]))
        if not weak:
            raise CascadeParseError(f"{where}: no weak classifiers")
        stages.append(CascadeStage(tuple(weak), threshold[0]))
    if len(stages) != declared:
        raise CascadeParseError(
            f"stageNum declares {declared} stages but {len(stages)} were found"
        )
    return CascadeModel(width, height, tuple(stages))


def load_default_cascade() -> CascadeModel:
    data = (resources.files("facerec") / "data" / DEFAULT_CASCADE).read_bytes()
    return load_cascade(data)


def serialize_cascade(model: CascadeModel) -> bytes:
    """Write ``model`` back out in the same XML dialect."""
    features: list[HaarFeature] = []
    index: dict[HaarFeature, int] = {}
    for stage in model.stages:
        for wc in stage.classifiers:
            if wc.feature not in index:
                index[wc.feature] = len(features)
                features.append(wc.feature)

    lines = [
        '<?xml version="1.0"?>',
        "<opencv_storage>",
        '<cascade type_id="opencv-cascade-classifier">',
        "  <stageType>BOOST</stageType>",
        "  <featureType>HAAR</featureType>",
        f"  <height>{model.base_height}</height>",
        f"  <width>{model.base_width}</width>",
        f"  <stageNum>{len(model.stages)}</stageNum>",
        "  <stages>",
    ]
    for stage in model.stages:
        lines.append("    <_>")
        lines.append(f"      <maxWeakCount>{len(stage.classifiers)}</maxWeakCount>")
        lines.append(f"      <stageThreshold>{stage.stage_threshold!r}</stageThreshold>")
        lines.append("      <weakClassifiers>")
        for wc in stage.classifiers:
            lines.append(
                f"        <_><internalNodes>0 -1 {index[wc.feature]} {wc.threshold!r}"
                f"</internalNodes><leafValues>{wc.left_value!r} {wc.right_value!r}"
                "</leafValues></_>"
            )
        lines.append("      </weakClassifiers>")
        lines.append("    </_>")
    lines.append("  </stages>")
    lines.append("  <features>")
    for feat in features:
        rects = "".join(
            f"<_>{r.x} {r.y} {r.w} {r.h} {w!r}</_>" for r, w in zip(feat.rects, feat.weights)
        )
        lines.append(f"    <_><rects>{rects}</rects></_>")
    lines.append("  </features>")
    lines.append("</cascade>")
    lines.append("</opencv_storage>")
    return ("\n".join(lines) + "\n").encode("utf-8")


# ---------------------------------------------------------------------------
# evaluation


def _round(v: float) -> int:
    return int(math.floor(v + 0.5))


@dataclass
class _ScaledStage:
    rx: np.ndarray  # (F, 3) rect geometry relative to the window origin
    ry: np.ndarray
    rw: np.ndarray
    rh: np.ndarray
    weights: np.ndarray  # (F, 3), zero for absent third rects
    thresholds: np.ndarray
    left: np.ndarray
    right: np.ndarray
    stage_threshold: float


@dataclass
class _ScaledCascade:
    win_w: int
    win_h: int
    norm: Rect  # normalisation area relative to the window origin
    stages: list


def _scale_cascade(model: CascadeModel, win_w: int, win_h: int) -> _ScaledCascade:
    key = (win_w, win_h)
    cached = model._scaled.get(key)
    if cached is not None:
        return cached
    sx = win_w / model.base_width
    sy = win_h / model.base_height
    stages = []
    for stage in model.stages:
        n = len(stage.classifiers)
        geo = np.zeros((4, n, 3), dtype=np.intp)
        geo[2:] = 1
        wts = np.zeros((n, 3))
        for i, wc in enumerate(stage.classifiers):
            rects = wc.feature.rects
            for k, r in enumerate(rects):
                x0, y0 = _round(r.x * sx), _round(r.y * sy)
                x1 = min(_round((r.x + r.w) * sx), win_w)
                y1 = min(_round((r.y + r.h) * sy), win_h)
                geo[:, i, k] = (x0, y0, max(x1 - x0, 1), max(y1 - y0, 1))
                wts[i, k] = wc.feature.weights[k]
            # re-balance the first weight so rounding keeps the feature zero-sum
            area0 = geo[2, i, 0] * geo[3, i, 0]
            rest = sum(wts[i, k] * geo[2, i, k] * geo[3, i, k] for k in range(1, len(rects)))
            base_rest = sum(
                w * r.w * r.h for w, r in zip(wc.feature.weights[1:], rects[1:])
            )
            base0 = wc.feature.weights[0] * rects[0].w * rects[0].h
            if abs(base0 + base_rest) < 1e-9 * max(1.0, abs(base0)):
                wts[i, 0] = -rest / area0
        stages.append(
            _ScaledStage(
                geo[0],
                geo[1],
                geo[2],
                geo[3],
                wts,
                np.array([wc.threshold for wc in stage.classifiers]),
                np.array([wc.left_value for wc in stage.classifiers]),
                np.array([wc.right_value for wc in stage.classifiers]),
                stage.stage_threshold,
            )
        )
    bx, by = max(1, _round(sx)), max(1, _round(sy))
    norm = Rect(bx, by, max(1, win_w - 2 * bx), max(1, win_h - 2 * by))
    scaled = _ScaledCascade(win_w, win_h, norm, stages)
    model._scaled[key] = scaled
    return scaled


def _rect_sums(d: np.ndarray, xs, ys, rx, ry, rw, rh) -> np.ndarray:
    # xs, ys: (N, 1, 1); rect arrays (F, 3) -> (N, F, 3)
    x0 = xs + rx
    y0 = ys + ry
    x1 = x0 + rw
    y1 = y0 + rh
    return (
        _corner(d, y1 - 1, x1 - 1)
        - _corner(d, y0 - 1, x1 - 1)
        - _corner(d, y1 - 1, x0 - 1)
        + _corner(d, y0 - 1, x0 - 1)
    )


def _window_norms(sc: _ScaledCascade, ii: IntegralImage, ii_sq: IntegralImage, xs, ys):
    nr = sc.norm
    geo = dict(rx=np.array(nr.x), ry=np.array(nr.y), rw=np.array(nr.w), rh=np.array(nr.h))
    s = _rect_sums(ii.data, xs, ys, **geo)
    sq = _rect_sums(ii_sq.data, xs, ys, **geo)
    area = nr.area
    mean = s / area
    var = np.maximum(0.0, sq / area - mean * mean)
    std = np.sqrt(var)
    return std, area * std


def _stage_votes(stage: _ScaledStage, d: np.ndarray, xs, ys, norm) -> np.ndarray:
    """Summed stump votes of one stage for a batch of windows."""
    sums = _rect_sums(d, xs[:, None, None], ys[:, None, None], stage.rx, stage.ry, stage.rw, stage.rh)
    values = np.einsum("nfk,fk->nf", sums, stage.weights) / norm[:, None]
    votes = np.where(values < stage.thresholds, stage.left, stage.right)
    return votes.sum(axis=1)


def _evaluate_batch(
    sc: _ScaledCascade, ii: IntegralImage, ii_sq: IntegralImage, xs: np.ndarray, ys: np.ndarray
) -> np.ndarray:
    accepted = np.zeros(len(xs), dtype=bool)
    std, norm = _window_norms(sc, ii, ii_sq, xs, ys)
    active = np.flatnonzero(std >= MIN_STDDEV)
    for stage in sc.stages:
        if active.size == 0:
            break
        votes = _stage_votes(stage, ii.data, xs[active], ys[active], norm[active])
        active = active[votes >= stage.stage_threshold]
    accepted[active] = True
    return accepted


def evaluate_window(
    model: CascadeModel, ii: IntegralImage, ii_sq: IntegralImage, window: Rect
) -> bool:
    """True when ``window`` passes every stage of the cascade."""
    window.check_inside(ii.width, ii.height)
    sc = _scale_cascade(model, window.w, window.h)
    hit = _evaluate_batch(sc, ii, ii_sq, np.array([window.x]), np.array([window.y]))
    return bool(hit[0])


def window_sizes(model: CascadeModel, width: int, height: int, params: DetectParams):
    """Window sizes of the geometric scan, smallest first."""
    sizes = []
    scale = 1.0
    while True:
        ww = int(model.base_width * scale)
        wh = int(model.base_height * scale)
        if ww > width or wh > height:
            break
        if ww >= params.min_size and wh >= params.min_size:
            if not sizes or sizes[-1] != (ww, wh):
                sizes.append((ww, wh))
        scale *= params.scale_factor
    return sizes


def scan_stride(window_width: int) -> int:
    return max(1, _round(0.05 * window_width))


def raw_detections(img: GrayImage, model: CascadeModel, params: DetectParams) -> list[Rect]:
    """Every accepted window, ordered by scale then row-major position."""
    ii = integral_image(img)
    ii_sq = squared_integral_image(img)
    hits = []
    for ww, wh in window_sizes(model, img.width, img.height, params):
        sc = _scale_cascade(model, ww, wh)
        step = scan_stride(ww)
        gy, gx = np.mgrid[0 : img.height - wh + 1 : step, 0 : img.width - ww + 1 : step]
        xs, ys = gx.ravel(), gy.ravel()
        ok = _evaluate_batch(sc, ii, ii_sq, xs, ys)
        hits.extend(Rect(int(x), int(y), ww, wh) for x, y in zip(xs[ok], ys[ok]))
    return hits


def group_rects(rects: list[Rect], min_neighbors: int, iou: float = 0.3) -> list[Rect]:
    """Cluster rects linked by pairwise IoU >= ``iou`` and average each cluster."""
    n = len(rects)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if rects[i].iou(rects[j]) >= iou:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)

    groups: dict[int, list[Rect]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(rects[i])
    out = []
    for members in groups.values():
        if len(members) < min_neighbors:
            continue
        arr = np.array([(r.x, r.y, r.w, r.h) for r in members], dtype=np.float64)
        x, y, w, h = (_round(v) for v in arr.mean(axis=0))
        out.append(Rect(x, y, w, h))
    return out


def detect_faces(
    img: GrayImage, model: CascadeModel, params: DetectParams = DetectParams()
) -> list[Rect]:
    """Grouped detections sorted by area, largest first."""
    if img.width < model.base_width or img.height < model.base_height:
        return []
    hits = raw_detections(img, model, params)
    grouped = group_rects(hits, params.min_neighbors, params.group_iou)
    grouped.sort(key=lambda r: (-r.area, r.y, r.x))
    return grouped


def largest_face(
    img: GrayImage, model: CascadeModel, params: DetectParams = DetectParams()
) -> Optional[Rect]:
    faces = detect_faces(img, model, params)
    return faces[0] if faces else None


def naive_window_votes(
    model: CascadeModel, img: GrayImage, window: Rect
) -> list[float]:
    """Per-stage vote sums computed by direct pixel summation.

    Slow reference path; every stage is evaluated regardless of earlier
    rejections.
    """
    sc = _scale_cascade(model, window.w, window.h)
    pix = img.data[window.y : window.y + window.h, window.x : window.x + window.w]
    nr = sc.norm
    inner = pix[nr.y : nr.y + nr.h, nr.x : nr.x + nr.w]
    std = math.sqrt(max(0.0, float(np.mean(inner * inner)) - float(np.mean(inner)) ** 2))
    norm = nr.area * std
    out = []
    for stage in sc.stages:
        total = 0.0
        for f in range(len(stage.thresholds)):
            value = 0.0
            for k in range(3):
                if stage.weights[f, k] == 0.0:
                    continue
                x0, y0 = stage.rx[f, k], stage.ry[f, k]
                patch = pix[y0 : y0 + stage.rh[f, k], x0 : x0 + stage.rw[f, k]]
                value += stage.weights[f, k] * float(patch.sum())
            value /= norm
            total += stage.left[f] if value < stage.thresholds[f] else stage.right[f]
        out.append(total)
    return out


def stage_votes(
    model: CascadeModel, ii: IntegralImage, ii_sq: IntegralImage, window: Rect
) -> list[float]:
    """Per-stage vote sums for one window via the integral-image path."""
    sc = _scale_cascade(model, window.w, window.h)
    xs, ys = np.array([window.x]), np.array([window.y])
    _, norm = _window_norms(sc, ii, ii_sq, xs, ys)
    return [float(_stage_votes(st, ii.data, xs, ys, norm)[0]) for st in sc.stages]
