"""Geometric face normalization and augmentation transforms.

Coordinates are (x, y) in pixels with the origin at the top-left pixel
centre.  Similarity transforms are computed as complex pairs ``(a, t)``
acting as ``z -> a*z + t`` with ``z = x + 1j*y``; an aligned face records
the source-to-output map as a 2x3 affine matrix so flips compose too.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError

LEFT_EYE_TARGET = (0.30, 0.35)
RIGHT_EYE_TARGET = (0.70, 0.35)
JITTER_SHIFT_FRACTION = 0.02
JITTER_MAX_SCALE = 1.02
LUMA = np.array([0.299, 0.587, 0.114])
# integer per-mille weights: exact sums, so white maps to exactly 1.0
_LUMA_MILLE = np.array([299, 587, 114])


@dataclass
class RawImage:
    pixels: np.ndarray  # uint8, (H, W) or (H, W, 3)
    source_id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 3 and px.shape[2] == 1:
            px = px[:, :, 0]
        if px.ndim not in (2, 3) or (px.ndim == 3 and px.shape[2] != 3):
            raise ValueError(f"expected (H, W) or (H, W, 3) pixels, got {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("empty image")
        self.pixels = px

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else 3

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class EyePair:
    left: tuple[float, float]
    right: tuple[float, float]

    def validate(self, width: int | None = None, height: int | None = None) -> None:
        if not self.left[0] < self.right[0]:
            raise AlignmentError(f"left eye must be left of right eye: {self.left} vs {self.right}")
        if width is not None and height is not None:
            for x, y in (self.left, self.right):
                if not (0 <= x <= width - 1 and 0 <= y <= height - 1):
                    raise AlignmentError(f"eye ({x}, {y}) outside {width}x{height} image")

    @property
    def distance(self) -> float:
        return float(np.hypot(self.right[0] - self.left[0], self.right[1] - self.left[1]))


@dataclass
class AlignedFace:
    pixels: np.ndarray  # float64 (side, side) in [0, 1]
    source_id: str = ""
    transform: np.ndarray = field(default_factory=lambda: np.eye(2, 3))
    ops: tuple[str, ...] = field(default_factory=tuple)

    @property
    def side(self) -> int:
        return self.pixels.shape[0]

    @property
    def key(self) -> str:
        return self.source_id + "".join(f"#{op}" for op in self.ops)

    def map_point(self, x: float, y: float) -> tuple[float, float]:
        px, py = self.transform @ np.array([x, y, 1.0])
        return float(px), float(py)


def _affine(a: complex, t: complex) -> np.ndarray:
    return np.array([[a.real, -a.imag, t.real], [a.imag, a.real, t.imag]])


def _compose(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    return outer[:, :2] @ inner + np.array([[0, 0, outer[0, 2]], [0, 0, outer[1, 2]]])


def canonical_eyes(side: int) -> EyePair:
    return EyePair(
        (LEFT_EYE_TARGET[0] * side, LEFT_EYE_TARGET[1] * side),
        (RIGHT_EYE_TARGET[0] * side, RIGHT_EYE_TARGET[1] * side),
    )


def to_grayscale(img: RawImage) -> np.ndarray:
    px = np.asarray(img.pixels)
    if px.ndim == 3:
        return np.clip((px.astype(np.int64) @ _LUMA_MILLE) / 255000.0, 0.0, 1.0)
    return np.clip(px.astype(np.float64) / 255.0, 0.0, 1.0)


def similarity_from_eyes(eyes: EyePair, side: int) -> tuple[complex, complex]:
    """Transform sending the source eyes onto the canonical targets."""
    target = canonical_eyes(side)
    src_l, src_r = complex(*eyes.left), complex(*eyes.right)
    dst_l, dst_r = complex(*target.left), complex(*target.right)
    if abs(src_r - src_l) < 2.0:
        raise AlignmentError(f"degenerate eyes: inter-ocular distance {abs(src_r - src_l):.3f} px < 2 px")
    a = (dst_r - dst_l) / (src_r - src_l)
    t = dst_l - a * src_l
    return a, t


def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``img`` at float coordinates; outside the image reads as 0."""
    h, w = img.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    out = np.zeros(xs.shape, dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = np.zeros(xs.shape, dtype=np.float64)
            vals[ok] = img[yi[ok], xi[ok]]
            out += wx * wy * vals
    return out


def warp_similarity(img: np.ndarray, a: complex, t: complex, side: int) -> np.ndarray:
    """Output pixel z' reads the source at (z' - t) / a."""
    ys, xs = np.mgrid[0:side, 0:side].astype(np.float64)
    src = (xs + 1j * ys - t) / a
    return np.clip(bilinear_sample(img, src.real, src.imag), 0.0, 1.0)


def align(img: RawImage, eyes: EyePair, side: int = 200) -> AlignedFace:
    """Rotate to level eyes, scale to the fixed eye distance, crop to side x side."""
    if side < 8:
        raise AlignmentError(f"side must be >= 8, got {side}")
    eyes.validate(img.width, img.height)
    a, t = similarity_from_eyes(eyes, side)
    gray = to_grayscale(img)
    if a == 1 and t == 0:
        out = np.zeros((side, side))
        h, w = min(side, gray.shape[0]), min(side, gray.shape[1])
        out[:h, :w] = gray[:h, :w]
    else:
        out = warp_similarity(gray, a, t, side)
    return AlignedFace(out, img.source_id, _affine(a, t))


def hflip(face: AlignedFace) -> AlignedFace:
    mirror = np.array([[-1.0, 0.0, face.side - 1.0], [0.0, 1.0, 0.0]])
    return AlignedFace(
        face.pixels[:, ::-1].copy(), face.source_id, _compose(mirror, face.transform), face.ops + ("flip",)
    )


def jitter(
    face: AlignedFace,
    rng: np.random.Generator,
    max_shift: float | None = None,
    max_scale: float = JITTER_MAX_SCALE,
) -> AlignedFace:
    """Random translation (within a disc of radius max_shift) and scale about the centre."""
    side = face.side
    if max_shift is None:
        max_shift = JITTER_SHIFT_FRACTION * side
    if max_shift < 0 or max_shift > 0.05 * side + 1e-12:
        raise ValueError(f"max_shift must lie in [0, {0.05 * side}]")
    if not 1.0 <= max_scale <= 1.05:
        raise ValueError("max_scale must lie in [1, 1.05]")
    radius = max_shift * np.sqrt(rng.random())
    angle = 2 * np.pi * rng.random()
    scale = float(np.exp((2 * rng.random() - 1) * np.log(max_scale)))
    shift = complex(radius * np.cos(angle), radius * np.sin(angle))
    tag = f"jit({shift.real:.4f},{shift.imag:.4f},{scale:.5f})"
    if shift == 0 and scale == 1.0:
        return AlignedFace(face.pixels.copy(), face.source_id, face.transform.copy(), face.ops + (tag,))
    c = complex((side - 1) / 2, (side - 1) / 2)
    # z' = scale*(z - c) + c + shift
    a, t = scale, c - scale * c + shift
    pixels = warp_similarity(face.pixels, a, t, side)
    return AlignedFace(pixels, face.source_id, _compose(_affine(a, t), face.transform), face.ops + (tag,))
