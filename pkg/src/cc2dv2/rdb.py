"""Self-supervised objective: cosine similarity, interest window, relative distance bias,
temperature softmax cross-entropy and its analytic gradient.

Window arrays are indexed ``[n, m]`` (row, column); a window of size
``(M, N)`` therefore has array shape ``(N, M)`` and its target is the
``(m_t, n_t)`` = (column, row) pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

CLIP_SCALED = "scaled"  # b = clip(alpha * d, 0, beta)
CLIP_LITERAL = "literal"  # b = alpha * clip(d, 0, beta)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.1
    beta: float = 0.7
    tau: float = 10.0
    matrix_size: tuple[int, int] = (19, 19)  # (M, N)
    levels: int = 5
    epsilon: float = 1e-8
    clip_mode: str = CLIP_SCALED

    def __post_init__(self):
        object.__setattr__(self, "matrix_size", tuple(int(v) for v in self.matrix_size))
        # alpha == 0 is allowed: it is the unbiased baseline objective
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.beta <= 0 or self.tau <= 0 or self.epsilon <= 0:
            raise ValueError("beta, tau and epsilon must be positive")
        m, n = self.matrix_size
        if m < 1 or n < 1 or m % 2 == 0 or n % 2 == 0:
            raise ValueError(f"matrix_size must be odd and positive, got {self.matrix_size}")
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.clip_mode not in (CLIP_SCALED, CLIP_LITERAL):
            raise ValueError(f"clip_mode must be {CLIP_SCALED!r} or {CLIP_LITERAL!r}")


@dataclass
class InterestMatrix:
    values: np.ndarray  # (N, M)
    target: tuple[int, int]  # (m_t, n_t)
    level: int = 0
    window_origin: tuple[int, int] = (0, 0)  # (x, y) of values[0, 0] in the full map

    @property
    def size(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[0]


@dataclass
class BiasedMatrix:
    w: np.ndarray
    b: np.ndarray
    d: np.ndarray
    target: tuple[int, int]

    @property
    def s(self) -> np.ndarray:
        return self.w - self.b


def similarity_map(anchor: np.ndarray, feature_map: np.ndarray, epsilon: float = 1e-8) -> np.ndarray:
    """Cosine similarity between a (C,) anchor and every pixel of a (C, h, w) map."""
    anchor = np.asarray(anchor, dtype=np.float64)
    fmap = np.asarray(feature_map, dtype=np.float64)
    if anchor.ndim != 1 or fmap.ndim != 3 or anchor.shape[0] != fmap.shape[0]:
        raise ValueError(f"channel mismatch: anchor {anchor.shape} vs feature map {fmap.shape}")
    dot = np.tensordot(anchor, fmap, axes=(0, 0))
    na = max(float(np.linalg.norm(anchor)), epsilon)
    nf = np.maximum(np.linalg.norm(fmap, axis=0), epsilon)
    return np.clip(dot / (na * nf), -1.0, 1.0)


def window_origin(center, grid_size, window_size) -> tuple[int, int]:
    """Top-left of a window centered on ``center``, shifted (never shrunk) to fit the grid."""
    cx, cy = center
    h, w = grid_size
    m, n = window_size
    if m > w or n > h:
        raise ValueError(f"grid {w}x{h} smaller than {m}x{n} window")
    ox = min(max(int(cx) - m // 2, 0), w - m)
    oy = min(max(int(cy) - n // 2, 0), h - n)
    return ox, oy


def crop_interest(similarity: np.ndarray, center, size=(19, 19), level: int = 0) -> InterestMatrix:
    """Crop the ``(M, N)`` window around the integer ``center`` = (x, y)."""
    s = np.asarray(similarity)
    h, w = s.shape
    cx, cy = int(center[0]), int(center[1])
    if not (0 <= cx < w and 0 <= cy < h):
        raise ValueError(f"center {(cx, cy)} outside {w}x{h} grid")
    ox, oy = window_origin((cx, cy), (h, w), size)
    m, n = size
    return InterestMatrix(s[oy:oy + n, ox:ox + m].copy(), (cx - ox, cy - oy), level, (ox, oy))


def distance_map(target, size) -> np.ndarray:
    mt, nt = target
    m, n = size
    if not (0 <= mt < m and 0 <= nt < n):
        raise ValueError(f"target {tuple(target)} outside {m}x{n} window")
    nn_, mm = np.mgrid[0:n, 0:m]
    return np.sqrt((mm - mt) ** 2.0 + (nn_ - nt) ** 2.0)


def relative_bias(d, alpha: float, beta: float, clip_mode: str = CLIP_SCALED):
    if clip_mode == CLIP_SCALED:
        return np.clip(alpha * np.asarray(d, dtype=np.float64), 0.0, beta)
    if clip_mode == CLIP_LITERAL:
        return alpha * np.clip(np.asarray(d, dtype=np.float64), 0.0, beta)
    raise ValueError(f"unknown clip_mode {clip_mode!r}")


def apply_rdb(interest: InterestMatrix, d: np.ndarray, alpha: float, beta: float,
              clip_mode: str = CLIP_SCALED) -> BiasedMatrix:
    s = np.asarray(interest.values, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if s.shape != d.shape:
        raise ValueError(f"shape mismatch: similarities {s.shape} vs distances {d.shape}")
    b = relative_bias(d, alpha, beta, clip_mode)
    return BiasedMatrix(s + b, b, d, interest.target)


def _log_softmax(w: np.ndarray, tau: float):
    z = np.asarray(w, dtype=np.float64) * tau
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite scores")
    z = z - z.max()
    lse = np.log(np.exp(z).sum())
    return z - lse


def ce_layer_loss(biased: BiasedMatrix, tau: float):
    """Cross-entropy of the temperature softmax at the target; returns (loss, q)."""
    logq = _log_softmax(biased.w, tau)
    mt, nt = biased.target
    return float(-logq[nt, mt]), np.exp(logq)


def ssl_total_loss(level_losses) -> float:
    return float(sum(level_losses))


def analytic_gradient(biased: BiasedMatrix, tau: float) -> np.ndarray:
    """d(loss)/d(similarity): tau * q for negatives, tau * (q_t - 1) at the target."""
    logq = _log_softmax(biased.w, tau)
    g = tau * np.exp(logq)
    mt, nt = biased.target
    g[nt, mt] -= tau
    return g


def layer_loss(similarity: np.ndarray, center, config: LossConfig, level: int = 0):
    """Per-level loss from a full similarity map; the reference path for one sample."""
    interest = crop_interest(similarity, center, config.matrix_size, level)
    d = distance_map(interest.target, config.matrix_size)
    biased = apply_rdb(interest, d, config.alpha, config.beta, config.clip_mode)
    loss, _ = ce_layer_loss(biased, config.tau)
    return loss, biased


# ---------------------------------------------------------------------------
# Batched torch objective used for training
# ---------------------------------------------------------------------------


def _bias_tensor(targets: np.ndarray, config: LossConfig, dtype) -> torch.Tensor:
    m, n = config.matrix_size
    nn_, mm = np.mgrid[0:n, 0:m]
    d = np.sqrt((mm[None] - targets[:, 0, None, None]) ** 2.0 + (nn_[None] - targets[:, 1, None, None]) ** 2.0)
    return torch.as_tensor(relative_bias(d, config.alpha, config.beta, config.clip_mode), dtype=dtype)


def batch_ssl_loss(image_feats: list[torch.Tensor], patch_feats: list[torch.Tensor],
                   points: np.ndarray, anchors: np.ndarray, config: LossConfig, items=None):
    """Summed per-level loss, averaged over (point, anchor) pairs.

    ``points`` are (P, 2) integer full-image positions and ``anchors`` (P, 2)
    patch positions; pair ``j`` belongs to batch item ``items[j]`` (default:
    pair ``j`` is item ``j``). Returns ``(total, per_level)`` with
    ``per_level`` a (L,) tensor.
    """
    m, n = config.matrix_size
    points = np.asarray(points)
    anchors = np.asarray(anchors, dtype=np.float64)
    bsz = points.shape[0]
    rows = torch.arange(bsz) if items is None else torch.as_tensor(np.asarray(items, dtype=np.int64))
    per_level = []
    for i, (fr, fp) in enumerate(zip(image_feats, patch_feats)):
        f = 2 ** i
        ax = np.floor(anchors[:, 0] / f).astype(np.int64)
        ay = np.floor(anchors[:, 1] / f).astype(np.int64)
        fa = fp[rows, :, torch.as_tensor(ay), torch.as_tensor(ax)]  # (B, C)
        h, w = fr.shape[-2:]
        cx = np.floor(points[:, 0] / f).astype(np.int64)
        cy = np.floor(points[:, 1] / f).astype(np.int64)
        origins = np.array([window_origin((x, y), (h, w), (m, n)) for x, y in zip(cx, cy)])
        targets = np.column_stack([cx - origins[:, 0], cy - origins[:, 1]])
        ys = torch.as_tensor(origins[:, 1, None] + np.arange(n)[None])  # (B, N)
        xs = torch.as_tensor(origins[:, 0, None] + np.arange(m)[None])  # (B, M)
        win = fr[rows[:, None, None], :, ys[:, :, None], xs[:, None, :]]  # (B, N, M, C)
        dot = (win * fa[:, None, None, :]).sum(-1)
        na = fa.norm(dim=-1).clamp_min(config.epsilon)
        nw = win.norm(dim=-1).clamp_min(config.epsilon)
        s = dot / (na[:, None, None] * nw)
        w_ = s + _bias_tensor(targets, config, s.dtype)
        logits = (w_ * config.tau).reshape(bsz, -1)
        tidx = torch.as_tensor(targets[:, 1] * m + targets[:, 0])
        per_level.append(F.cross_entropy(logits, tidx))
    per_level = torch.stack(per_level)
    return per_level.sum(), per_level
