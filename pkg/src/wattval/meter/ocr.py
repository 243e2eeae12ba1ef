"""Seven-segment display rendering, segmentation and digit decoding."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from datetime import datetime
from typing import Sequence

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ..core import MeterReading, utc_ms

log = logging.getLogger(__name__)

SEGMENTS = "abcdefg"

# conventional a-g order: a top, b upper right, c lower right, d bottom,
# e lower left, f upper left, g middle
DIGIT_SEGMENTS = {
    0: "abcdef",
    1: "bc",
    2: "abdeg",
    3: "abcdg",
    4: "bcfg",
    5: "acdfg",
    6: "acdefg",
    7: "abc",
    8: "abcdefg",
    9: "abcdfg",
}

PATTERNS = np.array(
    [[s in DIGIT_SEGMENTS[d] for s in SEGMENTS] for d in range(10)], dtype=float
)

# Segment rectangles as (x0, y0, x1, y1) fractions of a digit cell.
RENDER_SEGMENTS = {
    "a": (0.22, 0.05, 0.78, 0.14),
    "b": (0.72, 0.09, 0.86, 0.48),
    "c": (0.72, 0.52, 0.86, 0.91),
    "d": (0.22, 0.86, 0.78, 0.95),
    "e": (0.14, 0.52, 0.28, 0.91),
    "f": (0.14, 0.09, 0.28, 0.48),
    "g": (0.22, 0.455, 0.78, 0.545),
}


def _shrink(rect, fx, fy):
    x0, y0, x1, y1 = rect
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    hx, hy = (x1 - x0) / 2 * fx, (y1 - y0) / 2 * fy
    return (cx - hx, cy - hy, cx + hx, cy + hy)


# Sampling regions: the middle of each segment, away from the corners.
DEFAULT_REGIONS = {
    s: _shrink(r, 0.6, 0.5) if s in "adg" else _shrink(r, 0.5, 0.6)
    for s, r in RENDER_SEGMENTS.items()
}


class LowContrastWarning(UserWarning):
    pass


@dataclass(frozen=True)
class DisplayLayout:
    """Where the numerals sit in a frame and how to read them.

    ``bbox`` is ``(x, y, width, height)`` in pixels; the box is split into
    ``digit_count`` equal cells. ``decimal_position`` counts the digits in
    front of the decimal point.
    """

    bbox: tuple[int, int, int, int] = (16, 12, 144, 40)
    digit_count: int = 6
    decimal_position: int = 4
    regions: dict[str, tuple[float, float, float, float]] = field(
        default_factory=lambda: dict(DEFAULT_REGIONS)
    )
    dark_segments: bool = False
    threshold: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "bbox", tuple(int(v) for v in self.bbox))
        if self.digit_count < 1:
            raise ValueError("digit_count must be >= 1")
        if not 0 <= self.decimal_position <= self.digit_count:
            raise ValueError("decimal_position must lie in [0, digit_count]")
        if set(self.regions) != set(SEGMENTS):
            raise ValueError("regions must define all seven segments a-g")

    @property
    def frame_shape(self) -> tuple[int, int]:
        """Smallest frame (height, width) that holds the display with its margins."""
        x, y, w, h = self.bbox
        return (2 * y + h, 2 * x + w)

    def value_of(self, digits: Sequence[int]) -> float:
        n = int("".join(str(d) for d in digits))
        return n / 10 ** (self.digit_count - self.decimal_position)

    def digits_of(self, value: float) -> str:
        scaled = int(round(value * 10 ** (self.digit_count - self.decimal_position)))
        text = str(scaled).zfill(self.digit_count)
        if len(text) > self.digit_count:
            raise ValueError(f"{value} does not fit on a {self.digit_count}-digit display")
        return text

    @classmethod
    def from_dict(cls, d: dict) -> DisplayLayout:
        kw = dict(d)
        if "regions" in kw:
            kw["regions"] = {k: tuple(v) for k, v in kw["regions"].items()}
        return cls(**kw)


@dataclass(frozen=True)
class MeterFrame:
    timestamp: datetime
    pixels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "timestamp", utc_ms(self.timestamp))
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.size == 0:
            raise ValueError("frame must be a nonempty 2-D grayscale raster")


@dataclass(frozen=True)
class DigitDecode:
    digit: int | None
    confidence: float

    @property
    def rejected(self) -> bool:
        return self.digit is None


# -- rendering ----------------------------------------------------------------

def render_digit(digit: int, width: int, height: int) -> np.ndarray:
    cell = np.zeros((height, width), dtype=float)
    for s in DIGIT_SEGMENTS[digit]:
        x0, y0, x1, y1 = RENDER_SEGMENTS[s]
        cell[int(round(y0 * height)):int(round(y1 * height)),
             int(round(x0 * width)):int(round(x1 * width))] = 255.0
    return cell


def render_display(
    text: str,
    layout: DisplayLayout = DisplayLayout(),
    *,
    noise_std: float = 0.0,
    rotation_deg: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Synthetic grayscale frame showing ``text`` (digits only) on ``layout``."""
    if len(text) != layout.digit_count or not text.isdigit():
        raise ValueError(f"need exactly {layout.digit_count} digits, got {text!r}")
    x, y, w, h = layout.bbox
    frame = np.zeros(layout.frame_shape, dtype=float)
    cw = w / layout.digit_count
    for i, ch in enumerate(text):
        left = int(round(x + i * cw))
        right = int(round(x + (i + 1) * cw))
        frame[y:y + h, left:right] = render_digit(int(ch), right - left, h)
    if 0 < layout.decimal_position < layout.digit_count:
        px = int(round(x + layout.decimal_position * cw))
        frame[y + h - 4:y + h - 1, px - 2:px + 1] = 255.0
    if rotation_deg:
        frame = ndimage.rotate(frame, rotation_deg, reshape=False, order=1, mode="constant")
    if layout.dark_segments:
        frame = 255.0 - frame
    if noise_std:
        rng = rng if rng is not None else np.random.default_rng()
        frame = frame + rng.normal(0.0, noise_std, frame.shape)
    return np.clip(np.rint(frame), 0, 255).astype(np.uint8)


# -- segmentation ---------------------------------------------------------------

def global_threshold(pixels: np.ndarray) -> tuple[float, float]:
    """Midpoint between the 1st and 99th intensity percentiles, and the contrast."""
    lo, hi = np.percentile(pixels, [1, 99])
    return (lo + hi) / 2.0, hi - lo


def segment_display(frame: MeterFrame | np.ndarray, layout: DisplayLayout, min_contrast: float = 32.0) -> list[np.ndarray]:
    """Crop the display and split it into binarized per-digit rasters (True = lit)."""
    pixels = np.asarray(frame.pixels if isinstance(frame, MeterFrame) else frame, dtype=float)
    x, y, w, h = layout.bbox
    H, W = pixels.shape
    if x < 0 or y < 0 or w <= 0 or h <= 0 or x + w > W or y + h > H:
        raise ValueError(f"display box {layout.bbox} lies outside the {W}x{H} frame")
    crop = pixels[y:y + h, x:x + w]
    thr, contrast = global_threshold(crop)
    if layout.threshold is not None:
        thr = layout.threshold
    if contrast < min_contrast:
        warnings.warn(f"low display contrast ({contrast:.0f} levels)", LowContrastWarning, stacklevel=2)
    lit = crop < thr if layout.dark_segments else crop > thr
    cw = w / layout.digit_count
    return [
        lit[:, int(round(i * cw)):int(round((i + 1) * cw))].copy()
        for i in range(layout.digit_count)
    ]


# -- decoding -------------------------------------------------------------------

def _region_fills(integral: np.ndarray, regions: dict, offsets: np.ndarray) -> np.ndarray:
    """Mean activation of each segment region for every (dy, dx) offset.

    ``integral`` is the zero-padded summed-area table of the raster; returns
    an array of shape (len(offsets), 7).
    """
    h, w = integral.shape[0] - 1, integral.shape[1] - 1
    rect = np.array([regions[s] for s in SEGMENTS])
    dy = offsets[:, :1]
    dx = offsets[:, 1:]
    r0 = np.clip(np.rint(rect[:, 1] * h).astype(int) + dy, 0, h - 1)
    r1 = np.clip(np.rint(rect[:, 3] * h).astype(int) + dy, r0 + 1, h)
    c0 = np.clip(np.rint(rect[:, 0] * w).astype(int) + dx, 0, w - 1)
    c1 = np.clip(np.rint(rect[:, 2] * w).astype(int) + dx, c0 + 1, w)
    total = integral[r1, c1] - integral[r0, c1] - integral[r1, c0] + integral[r0, c0]
    return total / ((r1 - r0) * (c1 - c0))


def decode_pattern(segments: Sequence[bool]) -> DigitDecode:
    """Decode a seven-boolean a-g activation pattern."""
    return _decode_fills(np.asarray(segments, dtype=float))


def _decode_fills(fills: np.ndarray) -> DigitDecode:
    soft = np.abs(PATTERNS - fills).sum(axis=1)
    hard = np.abs(PATTERNS - (fills > 0.5)).sum(axis=1)
    order = np.argsort(soft, kind="stable")
    if hard.min() > 1:
        return DigitDecode(None, 0.0)
    best, second = order[0], order[1]
    if hard[best] > 1:
        best = int(np.argmin(hard))
    confidence = float(np.clip(soft[second] - soft[best], 0.0, 1.0))
    return DigitDecode(int(best), confidence)


def decode_digit(raster: np.ndarray, regions: dict | None = None, max_shift: int | None = None) -> DigitDecode:
    """Decode one binarized digit raster by segment activation.

    The mean of each of the seven sampling regions is compared with the ten
    canonical patterns. Small misalignments (rotation, loose crop) are
    absorbed by trying offsets up to ``max_shift`` pixels and keeping the
    best-matching one. Patterns more than one segment away from every digit
    are rejected.
    """
    raster = np.asarray(raster)
    if raster.ndim != 2 or raster.size == 0:
        raise ValueError("digit raster must be a nonempty 2-D array")
    regions = regions or DEFAULT_REGIONS
    h, w = raster.shape
    if max_shift is None:
        max_shift = max(1, int(round(0.08 * h)))
    integral = np.zeros((h + 1, w + 1))
    integral[1:, 1:] = (raster > 0).astype(float).cumsum(0).cumsum(1)
    half = max_shift // 2
    offsets = np.array(
        [(dy, dx) for dy in range(-max_shift, max_shift + 1) for dx in range(-half, half + 1)]
    )
    fills = _region_fills(integral, regions, offsets)
    dist = np.abs(fills[:, None, :] - PATTERNS[None, :, :]).sum(axis=2).min(axis=1)
    score = dist + 1e-3 * np.abs(offsets).sum(axis=1)
    best_fills = fills[int(np.argmin(score))]
    return _decode_fills(best_fills)


def read_frame(frame: MeterFrame, layout: DisplayLayout, decoder=None) -> MeterReading | None:
    """Turn one frame into a cumulative reading, or None if any digit is rejected."""
    cells = segment_display(frame, layout)
    if decoder is None:
        decodes = [decode_digit(c, layout.regions) for c in cells]
    else:
        decodes = decoder.decode_many(cells)
    rejected = sum(d.rejected for d in decodes)
    if rejected == len(decodes):
        log.warning("frame %s skipped: no digit could be decoded", frame.timestamp.isoformat())
        return None
    if rejected:
        log.info("frame %s dropped: %d of %d digits rejected", frame.timestamp.isoformat(), rejected, len(decodes))
        return None
    return MeterReading(
        timestamp=frame.timestamp,
        cumulative_kwh=layout.value_of([d.digit for d in decodes]),
        confidence=min(d.confidence for d in decodes),
        provenance="ocr",
    )


# -- estimator front-ends --------------------------------------------------------

def _as_stack(X) -> list[np.ndarray]:
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    rasters = [np.asarray(x) for x in X]
    if not rasters:
        raise ValueError("expected at least one raster")
    for r in rasters:
        if r.ndim != 2 or r.size == 0:
            raise ValueError("every raster must be a nonempty 2-D array")
    return rasters


class SegmentDecoder(ClassifierMixin, BaseEstimator):
    """Deterministic seven-segment decoder with the estimator interface.

    ``fit`` learns nothing; it only records the label set so the decoder can
    sit in pipelines next to trained alternatives. Rejected rasters predict -1.
    """

    def __init__(self, regions=None, max_shift=None):
        self.regions = regions
        self.max_shift = max_shift

    def fit(self, X=None, y=None):
        self.classes_ = np.arange(10)
        return self

    def decode_many(self, X) -> list[DigitDecode]:
        return [decode_digit(r, self.regions, self.max_shift) for r in _as_stack(X)]

    def predict(self, X) -> np.ndarray:
        return np.array([-1 if d.rejected else d.digit for d in self.decode_many(X)])

    def predict_confidence(self, X) -> np.ndarray:
        return np.array([d.confidence for d in self.decode_many(X)])


class PixelForestDecoder(ClassifierMixin, BaseEstimator):
    """Random-forest digit classifier on down-sampled pixel intensities.

    Needs labelled rasters; :func:`synthetic_digit_corpus` makes some.
    Predictions whose top class probability falls below ``min_confidence``
    are rejected (-1).
    """

    def __init__(self, n_estimators=100, grid=(12, 8), min_confidence=0.5, random_state=None):
        self.n_estimators = n_estimators
        self.grid = grid
        self.min_confidence = min_confidence
        self.random_state = random_state

    def _features(self, X) -> np.ndarray:
        gh, gw = self.grid
        feats = []
        for r in _as_stack(X):
            r = (r > 0).astype(float) if r.dtype == bool else r.astype(float) / 255.0
            h, w = r.shape
            rows = np.linspace(0, h, gh + 1).astype(int)
            cols = np.linspace(0, w, gw + 1).astype(int)
            feats.append([
                r[rows[i]:max(rows[i + 1], rows[i] + 1), cols[j]:max(cols[j + 1], cols[j] + 1)].mean()
                for i in range(gh) for j in range(gw)
            ])
        return np.asarray(feats)

    def fit(self, X, y):
        from sklearn.ensemble import RandomForestClassifier

        y = np.asarray(y)
        self.forest_ = RandomForestClassifier(n_estimators=self.n_estimators, random_state=self.random_state)
        self.forest_.fit(self._features(X), y)
        self.classes_ = self.forest_.classes_
        return self

    def decode_many(self, X) -> list[DigitDecode]:
        check_is_fitted(self, "forest_")
        proba = self.forest_.predict_proba(self._features(X))
        out = []
        for p in proba:
            top = int(np.argmax(p))
            if p[top] < self.min_confidence:
                out.append(DigitDecode(None, 0.0))
            else:
                ranked = np.sort(p)
                margin = ranked[-1] - (ranked[-2] if len(ranked) > 1 else 0.0)
                out.append(DigitDecode(int(self.classes_[top]), float(margin)))
        return out

    def predict(self, X) -> np.ndarray:
        return np.array([-1 if d.rejected else d.digit for d in self.decode_many(X)])


def synthetic_digit_corpus(
    n: int,
    layout: DisplayLayout = DisplayLayout(),
    *,
    noise_std: float = 10.0,
    max_rotation_deg: float = 2.0,
    seed: int = 0,
) -> tuple[list[np.ndarray], np.ndarray]:
    """``n`` rendered frames cut into labelled digit rasters."""
    rng = np.random.default_rng(seed)
    rasters, labels = [], []
    for _ in range(n):
        text = "".join(str(d) for d in rng.integers(0, 10, layout.digit_count))
        frame = render_display(
            text, layout, noise_std=noise_std,
            rotation_deg=rng.uniform(-max_rotation_deg, max_rotation_deg), rng=rng,
        )
        rasters.extend(segment_display(frame, layout))
        labels.extend(int(c) for c in text)
    return rasters, np.array(labels)
