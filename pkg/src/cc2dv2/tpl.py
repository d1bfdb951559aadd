"""Second stage: a heatmap + offset detector trained on pseudo-labels."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import seeding
from .augment import AugmentConfig, apply_color_jitter, rotation_center
from .data import ImageSample, check_in_bounds
from .encoder import read_checkpoint, save_checkpoint
from .ssl import TrainingDiverged

log = logging.getLogger(__name__)

TPL_MAGIC = "cc2dv2-tpl-v1"


@dataclass
class DetectionTargets:
    heatmap: np.ndarray  # (K, H, W) in {0, 1}
    offsets: np.ndarray  # (K, 2, H, W), (dx, dy) / R inside the disk, 0 outside
    mask: np.ndarray  # (K, H, W) bool

    def as_outputs(self) -> np.ndarray:
        """Pack into the detector's (3K, H, W) channel layout."""
        k, h, w = self.heatmap.shape
        out = np.empty((k, 3, h, w), dtype=np.float64)
        out[:, 0] = self.heatmap
        out[:, 1:] = self.offsets
        return out.reshape(3 * k, h, w)


def build_targets(landmarks, size: Sequence[int], radius: float) -> DetectionTargets:
    """Binary disks of ``radius`` px around each landmark plus normalized offsets to it."""
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    h, w = int(size[0]), int(size[1])
    pts = np.asarray(landmarks, dtype=np.float64).reshape(-1, 2)
    check_in_bounds(pts, (h, w), "target landmarks")
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx = pts[:, 0, None, None] - xs[None]
    dy = pts[:, 1, None, None] - ys[None]
    mask = dx * dx + dy * dy <= radius * radius
    offsets = np.stack([dx, dy], axis=1) / radius * mask[:, None]
    return DetectionTargets(mask.astype(np.float64), offsets, mask)


def decode_tpl(outputs: np.ndarray, radius: float) -> np.ndarray:
    """(3K, H, W) detector outputs -> (K, 2) landmarks.

    Per landmark: argmax of the heatmap channel (first in row-major order on
    ties) plus its offset vector, clipped to unit length, times ``radius``.
    """
    out = np.asarray(outputs, dtype=np.float64)
    if out.ndim != 3 or out.shape[0] % 3:
        raise ValueError(f"expected (3K, H, W) outputs, got {out.shape}")
    k = out.shape[0] // 3
    out = out.reshape(k, 3, *out.shape[1:])
    w = out.shape[-1]
    pts = np.empty((k, 2))
    for j in range(k):
        y, x = divmod(int(np.argmax(out[j, 0])), w)
        off = out[j, 1:, y, x]
        norm = float(np.hypot(off[0], off[1]))
        if norm > 1.0:
            off = off / norm
        pts[j] = (x + off[0] * radius, y + off[1] * radius)
    return pts


def _double_conv(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Encoder-decoder with skip connections; ``3 * num_landmarks`` output channels."""

    def __init__(self, num_landmarks: int, base_width: int = 32, depth: int = 4):
        super().__init__()
        widths = [base_width * 2 ** i for i in range(depth)]
        self.down = nn.ModuleList()
        cin = 1
        for w in widths:
            self.down.append(_double_conv(cin, w))
            cin = w
        self.up = nn.ModuleList(_double_conv(widths[i] + widths[i + 1], widths[i])
                                for i in reversed(range(depth - 1)))
        self.head = nn.Conv2d(widths[0], 3 * num_landmarks, 1)

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.down):
            if i:
                x = F.max_pool2d(x, 2, ceil_mode=True)
            x = block(x)
            skips.append(x)
        for block, skip in zip(self.up, reversed(skips[:-1])):
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = block(torch.cat([skip, x], 1))
        return self.head(x)


@dataclass(frozen=True)
class TPLConfig:
    radius: float = 20.0
    base_width: int = 32
    depth: int = 4
    epochs: int = 900
    batch_size: int = 8
    lr: float = 3e-4
    lr_decay: float = 0.1
    decay_fraction: float = 1 / 3
    stride: int = 1  # the network sees the image downsampled by this factor
    augment: bool = True  # random rotation and intensity jitter per epoch

    def validate(self) -> None:
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.radius / self.stride < 1:
            raise ValueError(f"radius {self.radius} is below one pixel at stride {self.stride}")
        if self.base_width < 1 or self.depth < 1:
            raise ValueError("base_width and depth must be >= 1")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1 and lr > 0")
        if not 0 < self.lr_decay <= 1 or not 0 < self.decay_fraction <= 1:
            raise ValueError("lr_decay and decay_fraction must be in (0, 1]")


def reduced_size(size: Sequence[int], stride: int) -> tuple[int, int]:
    return -(-int(size[0]) // stride), -(-int(size[1]) // stride)


def to_reduced(points, stride: int, size: Sequence[int]) -> np.ndarray:
    """Full-resolution points -> pixel-center aligned points on the reduced grid."""
    pts = (np.asarray(points, dtype=np.float64).reshape(-1, 2) + 0.5) / stride - 0.5
    h, w = reduced_size(size, stride)
    # the half-pixel shift can push border points just outside the grid
    return np.clip(pts, 0.0, np.nextafter(np.array([w, h], dtype=np.float64), 0))


def from_reduced(points, stride: int) -> np.ndarray:
    return (np.asarray(points, dtype=np.float64) + 0.5) * stride - 0.5


def reduce_image(pixels: np.ndarray, stride: int) -> np.ndarray:
    img = np.asarray(pixels, dtype=np.float32)
    if stride == 1:
        return img
    h, w = reduced_size(img.shape, stride)
    return cv2.resize(img, (w, h), interpolation=cv2.INTER_AREA)


@dataclass
class Detector:
    model: UNet
    num_landmarks: int
    config: TPLConfig
    history: list[dict] = field(default_factory=list)

    def outputs(self, image: np.ndarray) -> np.ndarray:
        self.model.eval()
        with torch.no_grad():
            x = torch.from_numpy(reduce_image(image, self.config.stride))
            out = self.model(x[None, None])[0]
        return out.numpy().reshape(self.num_landmarks, 3, *out.shape[-2:])

    def predict(self, image: np.ndarray) -> np.ndarray:
        """(K, 2) landmarks in the full-resolution image."""
        out = self.outputs(image)
        s = self.config.stride
        return from_reduced(decode_tpl(out.reshape(-1, *out.shape[-2:]), self.config.radius / s), s)


def detection_loss(outputs: torch.Tensor, heatmap: torch.Tensor, offsets: torch.Tensor,
                   mask: torch.Tensor) -> torch.Tensor:
    """Class-balanced BCE on heatmap logits plus L1 on offsets inside the disks, weighted 1:1.

    Disk pixels are a small fraction of the map, so positives are weighted by
    the batch's negative/positive ratio; otherwise an all-background output is
    already a near-optimal solution.
    """
    b, c, h, w = outputs.shape
    out = outputs.reshape(b, c // 3, 3, h, w)
    pos = heatmap.sum()
    pos_weight = (heatmap.numel() - pos) / pos.clamp_min(1.0)
    bce = F.binary_cross_entropy_with_logits(out[:, :, 0], heatmap, pos_weight=pos_weight)
    m = mask[:, :, None].expand(-1, -1, 2, -1, -1)
    l1 = (out[:, :, 1:] - offsets).abs()[m].mean() if m.any() else out.sum() * 0
    return bce + l1


def _augment(img: np.ndarray, pts: np.ndarray, rng: np.random.Generator, aug: AugmentConfig = AugmentConfig()):
    """Rotate the image and its points about the center, then jitter intensities."""
    h, w = img.shape
    angle = float(rng.uniform(-aug.max_rotation, aug.max_rotation))
    m = cv2.getRotationMatrix2D(rotation_center(img.shape), angle, 1.0)
    img = cv2.warpAffine(img, m, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT_101)
    pts = pts @ m[:, :2].T + m[:, 2]
    pts = np.clip(pts, 0.0, np.nextafter(np.array([w, h], dtype=np.float64), 0))
    img = apply_color_jitter(img, float(rng.uniform(-aug.brightness, aug.brightness)),
                             float(rng.uniform(*aug.contrast)), float(rng.uniform(*aug.gamma)))
    return img, pts


def train_tpl(images: Sequence[ImageSample], labels: dict[str, np.ndarray],
              config: TPLConfig = TPLConfig(), seed: int = 0, progress=None) -> Detector:
    """Fit the detector to ``labels`` (image id -> (K, 2) resized-space points)."""
    config.validate()
    missing = [s.id for s in images if s.id not in labels]
    if missing:
        raise ValueError(f"no labels for images {missing}")
    if not images:
        raise ValueError("no training images")
    k = len(labels[images[0].id])
    seeding.seed_torch(seed, "tpl-init")
    model = UNet(k, config.base_width, config.depth)
    det = Detector(model, k, config)
    if config.epochs == 0:
        model.eval()
        return det

    st = config.stride
    pixels = [reduce_image(s.pixels, st) for s in images]
    points = [to_reduced(labels[s.id], st, s.size) for s in images]
    aug_rng = seeding.generator(seed, "tpl-augment")

    def batch(idx):
        tg, xs = [], []
        for i in idx:
            img, pts = pixels[i], points[i]
            if config.augment:
                img, pts = _augment(img, pts, aug_rng)
            xs.append(img)
            tg.append(build_targets(pts, img.shape, config.radius / st))
        return (torch.from_numpy(np.stack(xs)[:, None]),
                torch.from_numpy(np.stack([t.heatmap for t in tg]).astype(np.float32)),
                torch.from_numpy(np.stack([t.offsets for t in tg]).astype(np.float32)),
                torch.from_numpy(np.stack([t.mask for t in tg])))

    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    step = max(1, int(round(config.epochs * config.decay_fraction)))
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=step, gamma=config.lr_decay)
    order_rng = seeding.generator(seed, "tpl-order")
    model.train()
    for epoch in range(config.epochs):
        order = order_rng.permutation(len(images))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            x, heat, offs, mask = batch(idx)
            loss = detection_loss(model(x), heat, offs, mask)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite TPL loss at epoch {epoch}, images {[images[i].id for i in idx]}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        sched.step()
        rec = {"epoch": epoch, "loss": total / count}
        det.history.append(rec)
        if progress is not None:
            progress(rec)
    model.eval()
    return det


def save_detector(path, det: Detector) -> None:
    hp = {"num_landmarks": det.num_landmarks, **asdict(det.config)}
    save_checkpoint(path, TPL_MAGIC, hp, det.model, {"history": det.history})


def load_detector(path) -> Detector:
    payload = read_checkpoint(path, TPL_MAGIC)
    hp = dict(payload["hparams"])
    k = hp.pop("num_landmarks")
    cfg = TPLConfig(**hp)
    model = UNet(k, cfg.base_width, cfg.depth)
    model.load_state_dict(payload["state"])
    model.eval()
    return Detector(model, k, cfg, list(payload.get("extra", {}).get("history", [])))
