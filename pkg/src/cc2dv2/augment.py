"""Training triples for the self-supervised stage: (full image, point, augmented patch)."""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .data import ImageSample


@dataclass(frozen=True)
class AugmentConfig:
    max_rotation: float = 15.0
    brightness: float = 0.2
    contrast: tuple[float, float] = (0.8, 1.25)
    gamma: tuple[float, float] = (0.8, 1.25)
    margin: int | None = None  # default: patch_size // 4

    def __post_init__(self):
        if not 0 <= self.max_rotation <= 180:
            raise ValueError(f"max_rotation must be in [0, 180], got {self.max_rotation}")
        if self.brightness < 0:
            raise ValueError("brightness range must be non-negative")
        for name in ("contrast", "gamma"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} range must satisfy 0 < lo <= hi, got {(lo, hi)}")


@dataclass(frozen=True)
class TransformLog:
    crop_offset: tuple[int, int]  # (ox, oy) of the patch in the full image
    angle: float  # degrees, counter-clockwise on screen
    center: tuple[float, float]  # rotation center in patch coordinates
    brightness: float = 0.0
    contrast: float = 1.0
    gamma: float = 1.0

    def matrix(self) -> np.ndarray:
        return cv2.getRotationMatrix2D(self.center, self.angle, 1.0)

    def forward(self, point) -> np.ndarray:
        """Full-image point -> augmented-patch point."""
        p = np.asarray(point, dtype=np.float64) - np.asarray(self.crop_offset, dtype=np.float64)
        m = self.matrix()
        return m[:, :2] @ p + m[:, 2]

    def inverse(self, point) -> np.ndarray:
        """Augmented-patch point -> full-image point."""
        m = self.matrix()
        p = np.linalg.solve(m[:, :2], np.asarray(point, dtype=np.float64) - m[:, 2])
        return p + np.asarray(self.crop_offset, dtype=np.float64)


@dataclass
class PatchSample:
    patch: np.ndarray  # (Hp, Wp) float32
    anchor: np.ndarray  # (x_p, y_p)
    source_point: np.ndarray  # (x_r, y_r) in the full image
    transform_log: TransformLog

    def __post_init__(self):
        hp, wp = self.patch.shape
        x, y = self.anchor
        if not (0 <= x < wp and 0 <= y < hp):
            raise ValueError(f"anchor {tuple(self.anchor)} outside {wp}x{hp} patch")


def rotation_center(shape) -> tuple[float, float]:
    h, w = shape[:2]
    return (w - 1) / 2.0, (h - 1) / 2.0


def apply_rotation(patch: np.ndarray, point, angle_degrees: float):
    """Rotate ``patch`` about its center; returns the new patch and the moved point.

    Bilinear resampling with reflected borders. Positive angles turn the
    content counter-clockwise as displayed (y axis pointing down).
    """
    patch = np.asarray(patch, dtype=np.float32)
    point = np.asarray(point, dtype=np.float64)
    if angle_degrees == 0:
        return patch.copy(), point.copy()
    h, w = patch.shape
    m = cv2.getRotationMatrix2D(rotation_center(patch.shape), float(angle_degrees), 1.0)
    out = cv2.warpAffine(patch, m, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT_101)
    return out, m[:, :2] @ point + m[:, 2]


def apply_color_jitter(patch: np.ndarray, brightness_delta: float = 0.0,
                       contrast_scale: float = 1.0, gamma: float = 1.0) -> np.ndarray:
    out = (np.asarray(patch, dtype=np.float32) - 0.5) * contrast_scale + 0.5 + brightness_delta
    out = np.clip(out, 0.0, 1.0)
    if gamma != 1.0:
        out = out ** gamma
    return out.astype(np.float32)


def sample_training_pair(sample: ImageSample, rng: np.random.Generator, patch_size,
                         config: AugmentConfig = AugmentConfig()):
    """Draw one (image, point, patch) triple from ``sample``.

    The point is uniform over positions that leave ``margin`` pixels to the
    patch border; the crop offset is then uniform among crops that keep it
    there.
    """
    img = sample.pixels
    h, w = img.shape
    hp, wp = patch_size
    if hp > h or wp > w:
        raise ValueError(f"patch {wp}x{hp} larger than image {w}x{h}")
    margin = min(hp, wp) // 4 if config.margin is None else int(config.margin)
    if 2 * margin >= min(hp, wp):
        raise ValueError(f"margin {margin} leaves no room inside a {wp}x{hp} patch")

    x = int(rng.integers(margin, w - margin))
    y = int(rng.integers(margin, h - margin))
    ox = int(rng.integers(max(0, x - (wp - 1 - margin)), min(w - wp, x - margin) + 1))
    oy = int(rng.integers(max(0, y - (hp - 1 - margin)), min(h - hp, y - margin) + 1))
    patch = img[oy:oy + hp, ox:ox + wp]

    angle = float(rng.uniform(-config.max_rotation, config.max_rotation))
    b = float(rng.uniform(-config.brightness, config.brightness))
    c = float(rng.uniform(*config.contrast))
    g = float(rng.uniform(*config.gamma))

    patch, anchor = apply_rotation(patch, (x - ox, y - oy), angle)
    patch = apply_color_jitter(patch, b, c, g)
    log = TransformLog((ox, oy), angle, rotation_center(patch.shape), b, c, g)
    source = np.array([x, y], dtype=np.float64)
    return img, source, PatchSample(patch, anchor, source, log)


def extra_points(pair: PatchSample, rng: np.random.Generator, count: int, margin: int):
    """``count`` more (source, anchor) pairs inside an already augmented patch.

    Sources are integer full-image positions uniform over the crop minus
    ``margin``; anchors follow through the logged rotation.
    """
    hp, wp = pair.patch.shape
    ox, oy = pair.transform_log.crop_offset
    xs = rng.integers(margin, wp - margin, size=count) + ox
    ys = rng.integers(margin, hp - margin, size=count) + oy
    sources = np.column_stack([xs, ys]).astype(np.float64)
    m = pair.transform_log.matrix()
    anchors = (sources - np.array([ox, oy])) @ m[:, :2].T + m[:, 2]
    return sources, anchors
