"""Stochastic image transformation schemes and their baseline parameters.

Image coordinates are continuous pixel coordinates: pixel (col, row) has its
center at (col + 0.5, row + 0.5), so the canvas center of a 128 px image is
(64, 64). Positive rotation is counterclockwise as seen on screen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Any, Sequence

import numpy as np

from invarlab.errors import ConfigError, OutOfCanvasError, ShapeError
from invarlab.stimuli3d.render import IMAGE_SIZE, Camera, camera_grid


class TransformKind(str, Enum):
    ROTATION = "rotation"
    SCALE = "scale"
    TRANSLATION = "translation"
    BRIGHTNESS = "brightness"
    CONTRAST = "contrast"
    VIEWPOINT = "viewpoint"
    NONE = "none"

    def __str__(self) -> str:
        return self.value


TRANSFORM_KINDS = [k for k in TransformKind if k is not TransformKind.NONE]
PHOTOMETRIC = {TransformKind.BRIGHTNESS, TransformKind.CONTRAST}

FIXED_INCLINATION = 80.0
FIXED_AZIMUTH = 36.0


def as_kind(kind: str | TransformKind) -> TransformKind:
    try:
        return TransformKind(kind)
    except ValueError:
        raise ConfigError(f"unknown transform kind {kind!r}") from None


def fixed_pose_camera() -> Camera:
    """Camera used for every condition except viewpoint."""
    return Camera(FIXED_INCLINATION, FIXED_AZIMUTH)


def _interval(value) -> tuple[float, float] | None:
    if value is None:
        return None
    lo, hi = (float(v) for v in value)
    if lo > hi:
        raise ConfigError(f"interval lower bound {lo} exceeds upper bound {hi}")
    return lo, hi


@dataclass
class TransformRanges:
    """Admissible parameters per kind; ``None`` leaves a kind undefined.

    ``translation_center_px`` is ``((x_lo, x_hi), (y_lo, y_hi))`` for the
    object's foreground centroid; it is further narrowed per image so the
    foreground never leaves the canvas.
    """

    rotation_deg: tuple[float, float] | None = (-180.0, 180.0)
    scale_factor: tuple[float, float] | None = (0.5, 1.5)
    translation_center_px: tuple[tuple[float, float], tuple[float, float]] | None = (
        (0.0, float(IMAGE_SIZE)),
        (0.0, float(IMAGE_SIZE)),
    )
    brightness_factor: tuple[float, float] | None = (0.4, 1.6)
    contrast_factor: tuple[float, float] | None = (0.4, 1.6)
    viewpoint: list[Camera] | None = field(default_factory=camera_grid)

    def __post_init__(self):
        self.rotation_deg = _interval(self.rotation_deg)
        self.scale_factor = _interval(self.scale_factor)
        self.brightness_factor = _interval(self.brightness_factor)
        self.contrast_factor = _interval(self.contrast_factor)
        if self.translation_center_px is not None:
            xr, yr = (_interval(r) for r in self.translation_center_px)
            if xr[0] < 0 or yr[0] < 0 or xr[1] > IMAGE_SIZE or yr[1] > IMAGE_SIZE:
                raise ConfigError("translation rectangle must lie inside the canvas")
            self.translation_center_px = (xr, yr)
        if self.scale_factor is not None and self.scale_factor[0] <= 0:
            raise ConfigError("scale factors must be positive")
        if self.viewpoint is not None:
            self.viewpoint = [c if isinstance(c, Camera) else Camera.from_dict(c) for c in self.viewpoint]
            if not self.viewpoint:
                raise ConfigError("viewpoint grid is empty")

    def defines(self, kind: TransformKind) -> bool:
        attr = _RANGE_ATTR.get(kind)
        return attr is None or getattr(self, attr) is not None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "viewpoint" and value is not None:
                value = [c.to_dict() for c in value]
            elif f.name == "translation_center_px" and value is not None:
                value = [list(value[0]), list(value[1])]
            elif value is not None:
                value = list(value)
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TransformRanges":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown transform range keys: {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("viewpoint"), dict):
            d["viewpoint"] = camera_grid(**d["viewpoint"])
        return cls(**d)


_RANGE_ATTR = {
    TransformKind.ROTATION: "rotation_deg",
    TransformKind.SCALE: "scale_factor",
    TransformKind.TRANSLATION: "translation_center_px",
    TransformKind.BRIGHTNESS: "brightness_factor",
    TransformKind.CONTRAST: "contrast_factor",
    TransformKind.VIEWPOINT: "viewpoint",
}


@dataclass(frozen=True)
class TransformInstance:
    """One realized transformation.

    ``theta`` is degrees (rotation), a factor (scale, brightness, contrast),
    an ``(x, y)`` centroid target (translation), a :class:`Camera`
    (viewpoint) or ``None`` (none).
    """

    kind: TransformKind
    theta: Any = None

    def to_json(self) -> dict[str, Any]:
        k = self.kind
        if k is TransformKind.NONE:
            return {"kind": "none"}
        if k is TransformKind.ROTATION:
            return {"kind": k.value, "deg": float(self.theta)}
        if k is TransformKind.TRANSLATION:
            return {"kind": k.value, "cx": float(self.theta[0]), "cy": float(self.theta[1])}
        if k is TransformKind.VIEWPOINT:
            return {"kind": k.value, **self.theta.to_dict()}
        return {"kind": k.value, "factor": float(self.theta)}

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "TransformInstance":
        k = as_kind(d["kind"])
        if k is TransformKind.NONE:
            return cls(k)
        if k is TransformKind.ROTATION:
            return cls(k, float(d["deg"]))
        if k is TransformKind.TRANSLATION:
            return cls(k, (float(d["cx"]), float(d["cy"])))
        if k is TransformKind.VIEWPOINT:
            return cls(k, Camera.from_dict(d))
        return cls(k, float(d["factor"]))

    @property
    def camera(self) -> Camera:
        """Camera to render with before any 2D operation."""
        return self.theta if self.kind is TransformKind.VIEWPOINT else fixed_pose_camera()


NO_TRANSFORM = TransformInstance(TransformKind.NONE)


def baseline_instance(kind: str | TransformKind) -> TransformInstance:
    """The identity setting of a transformation kind."""
    kind = as_kind(kind)
    if kind is TransformKind.NONE:
        raise ConfigError("the 'none' condition has no baseline parameters")
    theta = {
        TransformKind.ROTATION: 0.0,
        TransformKind.SCALE: 1.0,
        TransformKind.TRANSLATION: (IMAGE_SIZE / 2, IMAGE_SIZE / 2),
        TransformKind.BRIGHTNESS: 1.0,
        TransformKind.CONTRAST: 1.0,
        TransformKind.VIEWPOINT: fixed_pose_camera(),
    }[kind]
    return TransformInstance(kind, theta)


# ---------------------------------------------------------------------------
# foreground geometry


def foreground_mask(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return (image[..., 0] | image[..., 1] | image[..., 2]) > 0
    return np.abs(image).max(axis=2) > 0


def foreground_centroid(image: np.ndarray) -> tuple[float, float] | None:
    fp = Footprint.of(image)
    return None if fp is None else fp.centroid


def foreground_bbox(image: np.ndarray) -> tuple[int, int, int, int] | None:
    """(col_min, col_max, row_min, row_max) of nonzero pixels, inclusive."""
    fp = Footprint.of(image)
    return None if fp is None else fp.bbox


@dataclass(frozen=True)
class Footprint:
    """Centroid and bounding box of an image's foreground.

    Lets the sampler keep translated objects inside the canvas.
    """

    centroid: tuple[float, float]
    bbox: tuple[int, int, int, int]
    size: int = IMAGE_SIZE

    @classmethod
    def of(cls, image: np.ndarray) -> "Footprint | None":
        rows, cols = np.nonzero(foreground_mask(image))
        if len(rows) == 0:
            return None
        centroid = (float(cols.mean()) + 0.5, float(rows.mean()) + 0.5)
        bbox = (int(cols.min()), int(cols.max()), int(rows.min()), int(rows.max()))
        return cls(centroid, bbox, image.shape[0])

    def shift_limits(self) -> tuple[int, int, int, int]:
        """Feasible integer shifts (dx_min, dx_max, dy_min, dy_max)."""
        c0, c1, r0, r1 = self.bbox
        return -c0, self.size - 1 - c1, -r0, self.size - 1 - r1


def _shift(image: np.ndarray, dx: int, dy: int) -> np.ndarray:
    out = np.zeros_like(image)
    h, w = image.shape[:2]
    src_r = slice(max(0, -dy), min(h, h - dy))
    src_c = slice(max(0, -dx), min(w, w - dx))
    dst_r = slice(max(0, dy), min(h, h + dy))
    dst_c = slice(max(0, dx), min(w, w + dx))
    out[dst_r, dst_c] = image[src_r, src_c]
    return out


def center_foreground(image: np.ndarray) -> np.ndarray:
    """Shift by whole pixels so the foreground centroid rounds to the canvas center."""
    fp = Footprint.of(image)
    if fp is None:
        return image.copy()
    half = image.shape[0] / 2
    dx = int(np.rint(half - fp.centroid[0]))
    dy = int(np.rint(half - fp.centroid[1]))
    lo_x, hi_x, lo_y, hi_y = fp.shift_limits()
    return _shift(image, int(np.clip(dx, lo_x, hi_x)), int(np.clip(dy, lo_y, hi_y)))


# ---------------------------------------------------------------------------
# sampling


def sample_transform(
    kind: str | TransformKind,
    ranges: TransformRanges,
    rng: np.random.Generator,
    footprint: Footprint | None = None,
) -> TransformInstance:
    """Draw theta uniformly from the kind's admissible set.

    For translation, a ``footprint`` of the image to be moved narrows the
    rectangle so the whole foreground stays on the canvas.
    """
    kind = as_kind(kind)
    if kind is TransformKind.NONE:
        return NO_TRANSFORM
    if not ranges.defines(kind):
        raise ConfigError(f"transform ranges do not define {kind.value}")
    if kind is TransformKind.VIEWPOINT:
        return TransformInstance(kind, ranges.viewpoint[int(rng.integers(len(ranges.viewpoint)))])
    if kind is TransformKind.TRANSLATION:
        (x_lo, x_hi), (y_lo, y_hi) = ranges.translation_center_px
        if footprint is not None:
            cx, cy = footprint.centroid
            dx0, dx1, dy0, dy1 = footprint.shift_limits()
            x_lo, x_hi = max(x_lo, cx + dx0), min(x_hi, cx + dx1)
            y_lo, y_hi = max(y_lo, cy + dy0), min(y_hi, cy + dy1)
            if x_lo > x_hi or y_lo > y_hi:
                raise ConfigError("translation rectangle incompatible with the object's footprint")
        return TransformInstance(kind, (float(rng.uniform(x_lo, x_hi)), float(rng.uniform(y_lo, y_hi))))
    lo, hi = getattr(ranges, _RANGE_ATTR[kind])
    return TransformInstance(kind, float(rng.uniform(lo, hi)))


# ---------------------------------------------------------------------------
# application


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] != image.shape[1]:
        raise ShapeError(f"expected a square HxWx3 image, got shape {image.shape}")
    return image


def _bilinear(channel: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Sample a 2D array at continuous coordinates; outside the canvas reads 0."""
    h, w = channel.shape
    fx, fy = sx - 0.5, sy - 0.5
    x0, y0 = np.floor(fx).astype(np.int64), np.floor(fy).astype(np.int64)
    ax, ay = fx - x0, fy - y0
    padded = np.zeros((h + 2, w + 2), dtype=np.float64)
    padded[1:-1, 1:-1] = channel
    x0 = np.clip(x0 + 1, 0, w + 1)
    y0 = np.clip(y0 + 1, 0, h + 1)
    x1 = np.clip(x0 + 1, 0, w + 1)
    y1 = np.clip(y0 + 1, 0, h + 1)
    # anything more than one pixel outside reads pure background
    outside = (fx < -1) | (fx > w) | (fy < -1) | (fy > h)
    val = (
        padded[y0, x0] * (1 - ax) * (1 - ay)
        + padded[y0, x1] * ax * (1 - ay)
        + padded[y1, x0] * (1 - ax) * ay
        + padded[y1, x1] * ax * ay
    )
    val[outside] = 0.0
    return val


def _warp(image: np.ndarray, inverse: np.ndarray) -> np.ndarray:
    """Resample about the canvas center; ``inverse`` maps output offsets to source offsets."""
    size = image.shape[0]
    c = size / 2
    grid = np.arange(size) + 0.5 - c
    ox, oy = np.meshgrid(grid, grid)
    sx = inverse[0, 0] * ox + inverse[0, 1] * oy + c
    sy = inverse[1, 0] * ox + inverse[1, 1] * oy + c
    if np.array_equal(image[..., 0], image[..., 1]) and np.array_equal(image[..., 0], image[..., 2]):
        one = np.clip(np.rint(_bilinear(image[..., 0].astype(np.float64), sx, sy)), 0, 255)
        return np.repeat(one.astype(np.uint8)[:, :, None], 3, axis=2)
    chans = [np.clip(np.rint(_bilinear(image[..., k].astype(np.float64), sx, sy)), 0, 255) for k in range(3)]
    return np.stack(chans, axis=2).astype(np.uint8)


def _rotate(image: np.ndarray, deg: float) -> np.ndarray:
    if deg % 360.0 == 0.0:
        return image.copy()
    t = math.radians(deg)
    # inverse rotation conjugated by the y flip (screen y points down)
    cos, sin = math.cos(t), math.sin(t)
    inverse = np.array([[cos, -sin], [sin, cos]])
    return _warp(image, inverse)


def _scale(image: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1.0:
        return image.copy()
    bbox = foreground_bbox(image)
    if bbox is not None and factor > 1.0:
        c = image.shape[0] / 2
        c0, c1, r0, r1 = bbox
        edges = np.array([c0, c1 + 1, r0, r1 + 1], dtype=np.float64)
        scaled = c + (edges - c) * factor
        if scaled.min() < 0 or scaled.max() > image.shape[0]:
            raise OutOfCanvasError(f"scale {factor:.3f} pushes the object off the canvas")
    return _warp(image, np.eye(2) / factor)


def _translate(image: np.ndarray, target: tuple[float, float]) -> np.ndarray:
    fp = Footprint.of(image)
    if fp is None:
        return image.copy()
    dx = int(np.rint(target[0] - fp.centroid[0]))
    dy = int(np.rint(target[1] - fp.centroid[1]))
    lo_x, hi_x, lo_y, hi_y = fp.shift_limits()
    if not (lo_x <= dx <= hi_x and lo_y <= dy <= hi_y):
        raise OutOfCanvasError(f"translation to {target} pushes the object off the canvas")
    if dx == 0 and dy == 0:
        return image.copy()
    return _shift(image, dx, dy)


def _brightness(image: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1.0:
        return image.copy()
    return np.clip(np.rint(image.astype(np.float64) * factor), 0, 255).astype(np.uint8)


def _contrast(image: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1.0:
        return image.copy()
    mask = foreground_mask(image)
    if not mask.any():
        return image.copy()
    out = image.astype(np.float64)
    mu = out[mask].mean(axis=0)
    out[mask] = (out[mask] - mu) * factor + mu
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def apply_2d(image: np.ndarray, instance: TransformInstance) -> np.ndarray:
    """Apply a non-viewpoint transformation to a uint8 HxWx3 image.

    Geometric operations (rotation, scale) resample bilinearly with black
    fill. Translation moves the foreground centroid to theta by a whole-pixel
    shift. Contrast pivots on the per-channel foreground mean and leaves the
    background black.
    """
    image = _check_image(image)
    kind = instance.kind
    if kind is TransformKind.NONE:
        return image.copy()
    if kind is TransformKind.VIEWPOINT:
        raise ConfigError("viewpoint is realized by the render camera, not in 2D")
    if kind is TransformKind.ROTATION:
        return _rotate(image, float(instance.theta))
    if kind is TransformKind.SCALE:
        return _scale(image, float(instance.theta))
    if kind is TransformKind.TRANSLATION:
        return _translate(image, instance.theta)
    if kind is TransformKind.BRIGHTNESS:
        return _brightness(image, float(instance.theta))
    return _contrast(image, float(instance.theta))


def default_theta_grid(
    kind: str | TransformKind,
    ranges: TransformRanges | None = None,
    n: int = 9,
    footprints: Sequence[Footprint] = (),
    translation_side: int = 5,
) -> list[Any]:
    """Evenly spaced theta values spanning a kind's range and containing its baseline.

    Translation yields a ``translation_side`` x ``translation_side`` grid of
    centers feasible for every given footprint; viewpoint yields the whole
    camera grid.
    """
    kind = as_kind(kind)
    ranges = ranges or TransformRanges()
    if kind is TransformKind.NONE:
        return [None]
    if kind is TransformKind.VIEWPOINT:
        return list(ranges.viewpoint)
    if kind is TransformKind.TRANSLATION:
        (x_lo, x_hi), (y_lo, y_hi) = ranges.translation_center_px
        c = IMAGE_SIZE / 2
        half = min(c - x_lo, x_hi - c, c - y_lo, y_hi - c)
        for fp in footprints:
            dx0, dx1, dy0, dy1 = fp.shift_limits()
            cx, cy = fp.centroid
            # centroids sit within half a pixel of the center after centering
            half = min(half, cx + dx1 - c, c - (cx + dx0), cy + dy1 - c, c - (cy + dy0))
        half = max(0.0, math.floor(half))
        axis = np.linspace(c - half, c + half, translation_side)
        return [(float(x), float(y)) for y in axis for x in axis]
    lo, hi = getattr(ranges, _RANGE_ATTR[kind])
    base = baseline_instance(kind).theta
    values = set(np.linspace(lo, hi, n).tolist())
    if lo <= base <= hi:
        values.add(float(base))
    return sorted(values)
