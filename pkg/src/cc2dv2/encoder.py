"""Multi-scale feature extractors for full images and patches."""

from __future__ import annotations

import io
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

SSL_MAGIC = "cc2dv2-ssl-v1"


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    levels: int = 5
    widths: tuple[int, ...] = (32, 64, 128, 128, 128)
    embed_dim: int = 64
    mirror_init: bool = True

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not 1 <= self.levels <= 8:
            raise ValueError(f"levels must be in [1, 8], got {self.levels}")
        if len(self.widths) < self.levels:
            raise ValueError(f"need {self.levels} widths, got {len(self.widths)}")
        if self.embed_dim < 1 or min(self.widths) < 1:
            raise ValueError("widths and embed_dim must be positive")


def level_shape(size, level: int) -> tuple[int, int]:
    h, w = size
    f = 2 ** level
    return -(-h // f), -(-w // f)


def _block(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class PyramidEncoder(nn.Module):
    """Stride-2 convolutional trunk with a top-down merge and a 1x1 head per level.

    Level ``i`` has spatial size ``ceil(H / 2**i) x ceil(W / 2**i)`` and
    ``embed_dim`` channels. Outputs are not normalized.
    """

    def __init__(self, config: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.config = config
        widths = config.widths[: config.levels]
        stages, cin = [], 1
        for i, w in enumerate(widths):
            stages.append(_block(cin, w, 1 if i == 0 else 2))
            cin = w
        self.stages = nn.ModuleList(stages)
        self.lateral = nn.ModuleList(nn.Conv2d(w, config.embed_dim, 1) for w in widths)
        self.heads = nn.ModuleList(nn.Conv2d(config.embed_dim, config.embed_dim, 1) for _ in widths)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        out = [None] * len(feats)
        merged = None
        for i in reversed(range(len(feats))):
            lat = self.lateral[i](feats[i])
            if merged is not None:
                up = F.interpolate(merged, scale_factor=2, mode="nearest")
                lat = lat + up[..., : lat.shape[-2], : lat.shape[-1]]
            merged = lat
            out[i] = self.heads[i](merged)
        return out


class EncoderPair(nn.Module):
    """Independent image (E_r) and patch (E_p) encoders with identical architecture."""

    def __init__(self, config: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.config = config
        self.image = PyramidEncoder(config)
        self.patch = PyramidEncoder(config)
        if config.mirror_init:
            self.patch.load_state_dict(self.image.state_dict())


@dataclass
class FeaturePyramid:
    levels: list[np.ndarray]  # level i: (C, ceil(H/2^i), ceil(W/2^i))
    input_size: tuple[int, int]

    @property
    def num_levels(self) -> int:
        return len(self.levels)


@dataclass
class AnchorFeatures:
    vectors: list[np.ndarray]  # level i: (C,)
    coords: list[tuple[int, int]]  # level i: (x, y) in that level's grid


def embed(encoder: PyramidEncoder, image: np.ndarray) -> FeaturePyramid:
    """Run ``encoder`` in inference mode on a single (H, W) image."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            levels = encoder(torch.from_numpy(img)[None, None])
    finally:
        encoder.train(was_training)
    return FeaturePyramid([lv[0].numpy() for lv in levels], img.shape)


def anchor_coords(anchor, level: int) -> tuple[int, int]:
    f = 2 ** level
    return int(np.floor(anchor[0] / f)), int(np.floor(anchor[1] / f))


def extract_anchor(pyramid: FeaturePyramid, anchor) -> AnchorFeatures:
    h, w = pyramid.input_size
    x, y = float(anchor[0]), float(anchor[1])
    if not (0 <= x < w and 0 <= y < h):
        raise ValueError(f"anchor {(x, y)} outside {w}x{h} input")
    vectors, coords = [], []
    for i, lv in enumerate(pyramid.levels):
        cx, cy = anchor_coords((x, y), i)
        vectors.append(lv[:, cy, cx].copy())
        coords.append((cx, cy))
    return AnchorFeatures(vectors, coords)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, magic: str, hparams: dict, module: nn.Module, extra: dict | None = None) -> None:
    payload = {
        "magic": magic,
        "hparams": hparams,
        "state": {k: v.detach().clone() for k, v in module.state_dict().items()},
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path, magic: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:  # torch raises a variety of unpickling errors
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from None
    if not isinstance(payload, dict) or payload.get("magic") != magic:
        found = payload.get("magic") if isinstance(payload, dict) else None
        raise CheckpointError(f"{path}: expected format {magic!r}, found {found!r}")
    return payload


def save_encoders(path, encoders: EncoderPair, extra: dict | None = None) -> None:
    save_checkpoint(path, SSL_MAGIC, asdict(encoders.config), encoders, extra)


def load_encoders(path) -> EncoderPair:
    payload = read_checkpoint(path, SSL_MAGIC)
    hp = payload["hparams"]
    pair = EncoderPair(EncoderConfig(hp["levels"], tuple(hp["widths"]), hp["embed_dim"], hp.get("mirror_init", True)))
    pair.load_state_dict(payload["state"])
    pair.eval()
    return pair
