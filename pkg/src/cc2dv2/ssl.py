"""Self-supervised training of the encoder pair."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import seeding
from .augment import AugmentConfig, extra_points, sample_training_pair
from .data import DatasetSplit
from .encoder import EncoderConfig, EncoderPair, level_shape
from .rdb import LossConfig, batch_ssl_loss

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, dump_path: str | None = None):
        self.dump_path = dump_path
        super().__init__(message if dump_path is None else f"{message} (batch dumped to {dump_path})")


@dataclass(frozen=True)
class SSLConfig:
    patch_size: tuple[int, int] = (192, 192)
    loss: LossConfig = LossConfig()
    encoder: EncoderConfig = EncoderConfig()
    augment: AugmentConfig = AugmentConfig()
    epochs: int = 300
    batch_size: int = 8
    lr: float = 1e-3
    lr_decay: float = 0.5
    decay_fraction: float = 0.1  # decay every this fraction of total epochs
    points_per_patch: int = 1

    def validate(self, image_size) -> None:
        """Raise ``ValueError`` if this config cannot run on ``image_size`` (H, W)."""
        if self.loss.levels != self.encoder.levels:
            raise ValueError(f"loss levels {self.loss.levels} != encoder levels {self.encoder.levels}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1 and lr > 0")
        if self.points_per_patch < 1:
            raise ValueError("points_per_patch must be >= 1")
        if not 0 < self.lr_decay <= 1 or not 0 < self.decay_fraction <= 1:
            raise ValueError("lr_decay and decay_fraction must be in (0, 1]")
        hp, wp = self.patch_size
        h, w = image_size
        if hp > h or wp > w:
            raise ValueError(f"patch {wp}x{hp} larger than image {w}x{h}")
        m, n = self.loss.matrix_size
        for i in range(self.loss.levels):
            lh, lw = level_shape(image_size, i)
            if m > lw or n > lh:
                raise ValueError(
                    f"level {i} of a {w}x{h} image is {lw}x{lh}, smaller than the {m}x{n} interest matrix"
                )


@dataclass
class SSLResult:
    encoders: EncoderPair
    history: list[dict] = field(default_factory=list)


def _decay_every(config: SSLConfig) -> int:
    return max(1, int(round(config.epochs * config.decay_fraction)))


def _dump_batch(path, images, patches, points, anchors, ids) -> str:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, images=images, patches=patches, points=points, anchors=anchors, ids=np.array(ids))
    return str(path)


def train_ssl(dataset: DatasetSplit, config: SSLConfig = SSLConfig(), seed: int = 0,
              dump_dir=None, progress=None) -> SSLResult:
    """Train the image/patch encoders on the template + unlabeled pool.

    One epoch visits every training image once as the full image, in a
    seeded shuffled order, ``batch_size`` images per optimizer step.
    ``progress`` is an optional callable receiving each epoch record.
    """
    pool = dataset.train
    config.validate(pool[0].size)
    seeding.seed_torch(seed, "init")
    encoders = EncoderPair(config.encoder)
    encoders.train()
    opt = torch.optim.Adam(encoders.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=_decay_every(config), gamma=config.lr_decay)
    order_rng = seeding.generator(seed, "order")
    aug_rng = seeding.generator(seed, "augment")

    history = []
    for epoch in range(config.epochs):
        order = order_rng.permutation(len(pool))
        totals, levels, count = 0.0, np.zeros(config.loss.levels), 0
        for start in range(0, len(order), config.batch_size):
            items = [pool[j] for j in order[start:start + config.batch_size]]
            triples = [sample_training_pair(s, aug_rng, config.patch_size, config.augment) for s in items]
            images = np.stack([t[0] for t in triples])[:, None]
            patches = np.stack([t[2].patch for t in triples])[:, None]
            points = [t[1][None] for t in triples]
            anchors = [t[2].anchor[None] for t in triples]
            owners = list(range(len(triples)))
            if config.points_per_patch > 1:
                margin = min(config.patch_size) // 4 if config.augment.margin is None else config.augment.margin
                for j, t in enumerate(triples):
                    src, anc = extra_points(t[2], aug_rng, config.points_per_patch - 1, margin)
                    points.append(src)
                    anchors.append(anc)
                    owners.extend([j] * len(src))
            points = np.concatenate(points).astype(np.int64)
            anchors = np.concatenate(anchors)

            feats_r = encoders.image(torch.from_numpy(images))
            feats_p = encoders.patch(torch.from_numpy(patches))
            total, per_level = batch_ssl_loss(feats_r, feats_p, points, anchors, config.loss, owners)
            if not torch.isfinite(total):
                path = None
                if dump_dir is not None:
                    path = _dump_batch(Path(dump_dir) / f"diverged_epoch{epoch}_step{start}.npz",
                                       images, patches, points, anchors, [s.id for s in items])
                raise TrainingDiverged(
                    f"non-finite SSL loss at epoch {epoch}, images {[s.id for s in items]}", path
                )
            opt.zero_grad()
            total.backward()
            opt.step()
            k = len(items)
            totals += float(total.detach()) * k
            levels += per_level.detach().numpy() * k
            count += k
        sched.step()
        rec = {"epoch": epoch, "loss_total": totals / count}
        for i, v in enumerate(levels / count):
            rec[f"loss_level_{i}"] = float(v)
        history.append(rec)
        if progress is not None:
            progress(rec)
        log.debug("ssl epoch %d loss %.4f", epoch, rec["loss_total"])
    encoders.eval()
    return SSLResult(encoders, history)


def write_loss_csv(path, history: list[dict], levels: int) -> None:
    cols = ["epoch", "loss_total"] + [f"loss_level_{i}" for i in range(levels)]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for rec in history:
            w.writerow([rec["epoch"]] + [repr(float(rec[c])) for c in cols[1:]])
