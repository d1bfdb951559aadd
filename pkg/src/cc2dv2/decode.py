"""Inference for the self-supervised stage: template matching by cascaded cosine
similarity and coarse-to-fine decoding into landmark coordinates."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from .data import DatasetSplit, ImageSample, PSEUDO_LABEL_DIR, write_label_set
from .encoder import AnchorFeatures, EncoderPair, FeaturePyramid, embed, extract_anchor, level_shape
from .rdb import similarity_map, window_origin

PRODUCT = "product"
WINDOWED = "windowed"


@dataclass
class SimilarityCascade:
    levels: list[np.ndarray]  # level 0 finest
    landmark: int = 0
    image_id: str = ""


@dataclass
class PseudoLabelSet:
    coords: dict[str, np.ndarray] = field(default_factory=dict)  # id -> (K, 2)
    confidence: dict[str, np.ndarray] = field(default_factory=dict)  # id -> (K,)

    def __len__(self):
        return len(self.coords)


def template_anchors(encoders: EncoderPair | None, template: ImageSample,
                     patch_size: Sequence[int]) -> list[AnchorFeatures]:
    """Anchor features of every template landmark, embedded by the patch encoder."""
    if encoders is None:
        raise ValueError("template_anchors needs trained encoders (no checkpoint loaded)")
    hp, wp = patch_size
    out = []
    for x, y in template.landmarks:
        ox, oy = window_origin((int(np.floor(x)), int(np.floor(y))), template.size, (wp, hp))
        patch = template.pixels[oy:oy + hp, ox:ox + wp]
        pyramid = embed(encoders.patch, patch)
        out.append(extract_anchor(pyramid, (x - ox, y - oy)))
    return out


def similarity_cascade(anchor: AnchorFeatures, query: FeaturePyramid, epsilon: float = 1e-8,
                       landmark: int = 0, image_id: str = "") -> SimilarityCascade:
    if len(anchor.vectors) != query.num_levels:
        raise ValueError(f"anchor has {len(anchor.vectors)} levels, query pyramid {query.num_levels}")
    levels = [similarity_map(v, f, epsilon) for v, f in zip(anchor.vectors, query.levels)]
    return SimilarityCascade(levels, landmark, image_id)


def _argmax2d(grid: np.ndarray) -> tuple[int, int]:
    # np.argmax returns the first maximum in row-major order
    idx = int(np.argmax(grid))
    y, x = divmod(idx, grid.shape[1])
    return x, y


def upsample_level(grid: np.ndarray, level: int, shape) -> np.ndarray:
    """Bilinear upsampling by ``2**level`` (pixel-center aligned), cropped to ``shape``."""
    if level == 0:
        return np.asarray(grid, dtype=np.float64)[: shape[0], : shape[1]]
    f = 2 ** level
    h, w = grid.shape
    up = cv2.resize(np.asarray(grid, dtype=np.float64), (w * f, h * f), interpolation=cv2.INTER_LINEAR)
    return up[: shape[0], : shape[1]]


def fused_map(cascade: SimilarityCascade) -> np.ndarray:
    if not cascade.levels:
        raise ValueError("empty similarity cascade")
    shape = cascade.levels[0].shape
    out = np.ones(shape, dtype=np.float64)
    for i, lv in enumerate(cascade.levels):
        if lv.shape != level_shape(shape, i):
            raise ValueError(f"level {i} has shape {lv.shape}, expected {level_shape(shape, i)}")
        out *= upsample_level(np.clip(lv, 0.0, 1.0), i, shape)
    return out


def fuse_and_decode(cascade: SimilarityCascade, mode: str = PRODUCT, radius: int = 2):
    """Decode one landmark; returns ``((x, y), confidence)``.

    ``product``: clamp each level to [0, 1], upsample to the finest grid,
    multiply, take the argmax. ``windowed``: argmax at the coarsest level,
    then search a ``(2r+1)^2`` window at each finer level around the
    previous estimate. Ties go to the first pixel in row-major order.
    """
    if not cascade.levels:
        raise ValueError("empty similarity cascade")
    if mode == PRODUCT:
        fused = fused_map(cascade)
        x, y = _argmax2d(fused)
        return np.array([x, y], dtype=np.float64), float(fused[y, x])
    if mode != WINDOWED:
        raise ValueError(f"unknown decode mode {mode!r}")
    levels = [np.clip(lv, 0.0, 1.0) for lv in cascade.levels]
    top = len(levels) - 1
    x, y = _argmax2d(levels[top])
    conf = float(levels[top][y, x])
    for i in range(top - 1, -1, -1):
        g = levels[i]
        h, w = g.shape
        cx, cy = 2 * x, 2 * y
        x0, x1 = max(cx - radius, 0), min(cx + radius + 1, w)
        y0, y1 = max(cy - radius, 0), min(cy + radius + 1, h)
        dx, dy = _argmax2d(g[y0:y1, x0:x1])
        x, y = x0 + dx, y0 + dy
        conf *= float(g[y, x])
    return np.array([x, y], dtype=np.float64), conf


def predict_image(encoders: EncoderPair, anchors: list[AnchorFeatures], image: ImageSample,
                  mode: str = PRODUCT, radius: int = 2, epsilon: float = 1e-8):
    """Landmarks (K, 2) and confidences (K,) for one query image."""
    query = embed(encoders.image, image.pixels)
    pts, conf = [], []
    for k, anchor in enumerate(anchors):
        cascade = similarity_cascade(anchor, query, epsilon, k, image.id)
        p, c = fuse_and_decode(cascade, mode, radius)
        pts.append(p)
        conf.append(c)
    return np.array(pts).reshape(-1, 2), np.array(conf)


def generate_pseudo_labels(encoders: EncoderPair, template: ImageSample, images: Sequence[ImageSample],
                           patch_size: Sequence[int], mode: str = PRODUCT, radius: int = 2,
                           epsilon: float = 1e-8) -> PseudoLabelSet:
    anchors = template_anchors(encoders, template, patch_size)
    out = PseudoLabelSet()
    for img in images:
        try:
            pts, conf = predict_image(encoders, anchors, img, mode, radius, epsilon)
        except Exception as e:
            raise RuntimeError(f"pseudo-labelling failed for image {img.id!r}: {e}") from e
        out.coords[img.id] = pts
        out.confidence[img.id] = conf
    return out


def write_pseudo_labels(root, labels: PseudoLabelSet, split: DatasetSplit,
                        subdir: str = PSEUDO_LABEL_DIR) -> Path:
    out = write_label_set(root, labels.coords, split, subdir)
    with open(out / "confidence.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image_id", "landmark", "confidence"])
        for sid in labels.coords:
            for k, c in enumerate(labels.confidence.get(sid, [])):
                w.writerow([sid, k, repr(float(c))])
    return out


def heat_png(grid: np.ndarray) -> np.ndarray:
    """8-bit false-color rendering of a [0, 1] map."""
    g = np.clip(np.asarray(grid, dtype=np.float64), 0.0, 1.0)
    return cv2.applyColorMap(np.round(g * 255).astype(np.uint8), cv2.COLORMAP_JET)
