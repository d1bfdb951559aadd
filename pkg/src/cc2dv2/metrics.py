"""Mean radial error and successful detection rate in native millimeters."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import rescale_coords

CEPH_RADII = (2.0, 2.5, 3.0, 4.0, 6.0, 8.0)
LIMB_RADII = (4.0, 8.0, 12.0)


@dataclass
class MetricsReport:
    mre_mm: float
    sdr: dict[float, float]  # radius (mm) -> percentage; success means error <= radius
    per_landmark: list[float] = field(default_factory=list)
    n_images: int = 0
    n_landmarks: int = 0

    def to_dict(self) -> dict:
        return {
            "mre_mm": self.mre_mm,
            "sdr": {repr(float(r)): v for r, v in sorted(self.sdr.items())},
            "per_landmark": list(self.per_landmark),
            "n_images": self.n_images,
            "n_landmarks": self.n_landmarks,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            mre_mm=float(d["mre_mm"]),
            sdr={float(r): float(v) for r, v in d["sdr"].items()},
            per_landmark=[float(v) for v in d.get("per_landmark", [])],
            n_images=int(d.get("n_images", 0)),
            n_landmarks=int(d.get("n_landmarks", 0)),
        )

    def to_json(self) -> str:
        # repr-based float serialization round-trips exactly
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls.from_json(Path(path).read_text())


def radial_errors(preds, gts, native_size: Sequence[int], resized_size: Sequence[int],
                  spacing_mm: Sequence[float]) -> np.ndarray:
    """Per-point radial error in mm after mapping both point sets to native pixels."""
    p = np.asarray(preds, dtype=np.float64).reshape(-1, 2)
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 2)
    if p.shape != g.shape:
        raise ValueError(f"cardinality mismatch: {len(p)} predictions vs {len(g)} ground truths")
    delta = rescale_coords(p, resized_size, native_size) - rescale_coords(g, resized_size, native_size)
    delta *= np.asarray(spacing_mm, dtype=np.float64)
    return np.hypot(delta[:, 0], delta[:, 1])


def summarize(errors, radii_mm: Sequence[float] = CEPH_RADII, per_landmark=None,
              n_images: int = 0, n_landmarks: int = 0) -> MetricsReport:
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size == 0:
        raise ValueError("no errors to summarize")
    if np.any(e < 0) or not np.all(np.isfinite(e)):
        raise ValueError("errors must be finite and non-negative")
    sdr = {float(r): 100.0 * np.count_nonzero(e <= r) / e.size for r in radii_mm}
    return MetricsReport(
        mre_mm=float(e.mean()),
        sdr=sdr,
        per_landmark=[] if per_landmark is None else [float(v) for v in per_landmark],
        n_images=n_images,
        n_landmarks=n_landmarks,
    )


def evaluate(predictions: dict[str, np.ndarray], samples, radii_mm: Sequence[float] = CEPH_RADII,
             spacing_override=None) -> MetricsReport:
    """Report over ``samples`` (ImageSample) given predictions keyed by sample id.

    ``spacing_override`` replaces each sample's spacing, e.g. ``(1, 1)`` to
    measure errors in native pixels.
    """
    rows = []
    for s in samples:
        if s.id not in predictions:
            raise KeyError(f"no prediction for image {s.id!r}")
        spacing = s.spacing_mm if spacing_override is None else spacing_override
        rows.append(radial_errors(predictions[s.id], s.landmarks, s.native_size, s.size, spacing))
    if not rows:
        raise ValueError("no samples to evaluate")
    errs = np.stack(rows)  # (images, K)
    return summarize(errs.ravel(), radii_mm, errs.mean(axis=0), errs.shape[0], errs.shape[1])


def write_reports_csv(path, rows: list[dict], radii_mm: Sequence[float]) -> None:
    """One CSV row per run: the row's own keys first, then MRE and SDR columns."""
    lead = [k for k in rows[0] if k not in ("report",)] if rows else []
    cols = lead + ["mre_mm"] + [f"sdr_{float(r)!r}" for r in radii_mm]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for row in rows:
            rep = row.get("report")
            vals = [row[k] for k in lead]
            if rep is None:
                vals += [""] * (1 + len(radii_mm))
            else:
                vals += [repr(float(rep.mre_mm))] + [repr(float(rep.sdr.get(float(r), float("nan")))) for r in radii_mm]
            w.writerow(vals)
