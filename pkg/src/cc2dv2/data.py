"""Datasets: loading annotated images, synthetic generation, coordinate transforms.

Coordinates are ``(x, y)`` = (column, row) with the origin at the top-left
pixel and sub-pixel values allowed. Every module in the package uses this
convention.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import numpy as np

IMAGE_DIR = "images"
ANNOTATION_DIR = "annotations"
PSEUDO_LABEL_DIR = "pseudo_labels"
META_FILE = "meta.json"


class DatasetError(ValueError):
    """Raised for malformed dataset directories; carries the offending path."""

    def __init__(self, message: str, path: str | os.PathLike | None = None):
        self.path = None if path is None else str(path)
        super().__init__(message if path is None else f"{message}: {path}")


@dataclass
class ImageSample:
    id: str
    pixels: np.ndarray  # (H, W) float32 in [0, 1]
    landmarks: np.ndarray  # (K, 2) float64, resized space
    native_size: tuple[int, int]  # (H0, W0)
    spacing_mm: tuple[float, float]  # (sx, sy) per native pixel

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        self.landmarks = np.asarray(self.landmarks, dtype=np.float64).reshape(-1, 2)
        self.native_size = (int(self.native_size[0]), int(self.native_size[1]))
        self.spacing_mm = (float(self.spacing_mm[0]), float(self.spacing_mm[1]))
        if self.pixels.ndim != 2:
            raise ValueError(f"{self.id}: pixels must be a 2-D grid, got {self.pixels.shape}")
        if min(self.spacing_mm) <= 0:
            raise ValueError(f"{self.id}: spacing_mm must be positive, got {self.spacing_mm}")
        if min(self.native_size) <= 0:
            raise ValueError(f"{self.id}: native_size must be positive, got {self.native_size}")
        check_in_bounds(self.landmarks, self.size, what=self.id)

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    @property
    def num_landmarks(self) -> int:
        return len(self.landmarks)


@dataclass
class DatasetSplit:
    template: ImageSample
    unlabeled: list[ImageSample] = field(default_factory=list)
    test: list[ImageSample] = field(default_factory=list)

    def __post_init__(self):
        ids = [s.id for s in self.samples()]
        if len(ids) != len(set(ids)):
            raise ValueError("sample ids must be unique across splits")
        k = self.template.num_landmarks
        for s in self.samples():
            if s.num_landmarks != k:
                raise ValueError(f"{s.id}: {s.num_landmarks} landmarks, template has {k}")

    def samples(self) -> list[ImageSample]:
        return [self.template, *self.unlabeled, *self.test]

    @property
    def train(self) -> list[ImageSample]:
        """Template plus unlabeled images; the pool the SSL stage trains on."""
        return [self.template, *self.unlabeled]

    @property
    def num_landmarks(self) -> int:
        return self.template.num_landmarks

    def find(self, sample_id: str) -> ImageSample:
        for s in self.samples():
            if s.id == sample_id:
                return s
        raise KeyError(sample_id)


def check_in_bounds(points: np.ndarray, size: tuple[int, int], what: str = "points") -> None:
    h, w = size
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(pts)):
        raise ValueError(f"{what}: non-finite landmark coordinate")
    bad = (pts[:, 0] < 0) | (pts[:, 0] >= w) | (pts[:, 1] < 0) | (pts[:, 1] >= h)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"{what}: landmark {i} at {tuple(pts[i])} outside {w}x{h} (WxH)")


def rescale_coords(points, from_size: Sequence[int], to_size: Sequence[int]) -> np.ndarray:
    """Scale ``(x, y)`` points between two ``(H, W)`` grids, per axis and linearly."""
    fh, fw = from_size
    th, tw = to_size
    if min(fh, fw, th, tw) <= 0:
        raise ValueError(f"sizes must be positive, got {tuple(from_size)} -> {tuple(to_size)}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return pts * np.array([tw / fw, th / fh])


def normalize_intensity(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.float32)
    return ((img - lo) / (hi - lo)).astype(np.float32)


def resize_image(img: np.ndarray, size: Sequence[int]) -> np.ndarray:
    h, w = size
    if img.shape == (h, w):
        return np.asarray(img, dtype=np.float32)
    out = cv2.resize(np.asarray(img, dtype=np.float32), (int(w), int(h)), interpolation=cv2.INTER_LINEAR)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Annotation files
# ---------------------------------------------------------------------------


def read_annotations(path: str | os.PathLike) -> np.ndarray:
    pts = []
    try:
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != 2:
                    raise DatasetError(f"line {lineno}: expected 'x y', got {line!r}", path)
                try:
                    pts.append((float(parts[0]), float(parts[1])))
                except ValueError:
                    raise DatasetError(f"line {lineno}: non-numeric coordinate {line!r}", path) from None
    except OSError as e:
        raise DatasetError(f"cannot read annotation ({e.strerror})", path) from None
    return np.array(pts, dtype=np.float64).reshape(-1, 2)


def write_annotations(path: str | os.PathLike, points) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for x, y in pts:
            f.write(f"{float(x)!r} {float(y)!r}\n")


def read_image(path: str | os.PathLike) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise DatasetError("unreadable image", path)
    if img.ndim == 3:
        img = cv2.cvtColor(img[..., :3], cv2.COLOR_BGR2GRAY)
    return img


# ---------------------------------------------------------------------------
# Loading and saving
# ---------------------------------------------------------------------------


def _spacing_for(meta: dict, sample_id: str, meta_path: Path) -> tuple[float, float]:
    entry = meta.get("images", {}).get(sample_id, {})
    spacing = entry.get("spacing_mm", meta.get("spacing_mm"))
    if spacing is None or len(spacing) != 2:
        raise DatasetError(f"no spacing_mm for image {sample_id!r}", meta_path)
    return float(spacing[0]), float(spacing[1])


def load_sample(root: Path, sample_id: str, target_size: Sequence[int], spacing_mm, *,
                annotation_dir: str = ANNOTATION_DIR) -> ImageSample:
    img_path = root / IMAGE_DIR / f"{sample_id}.png"
    ann_path = root / annotation_dir / f"{sample_id}.txt"
    if not img_path.exists():
        raise DatasetError("missing image", img_path)
    if not ann_path.exists():
        raise DatasetError("missing annotation", ann_path)
    raw = read_image(img_path)
    native = raw.shape[:2]
    pts = read_annotations(ann_path)
    try:
        check_in_bounds(pts, native, what="native annotation")
    except ValueError as e:
        raise DatasetError(str(e), ann_path) from None
    pixels = resize_image(normalize_intensity(raw), target_size)
    return ImageSample(
        id=sample_id,
        pixels=pixels,
        landmarks=rescale_coords(pts, native, target_size),
        native_size=native,
        spacing_mm=spacing_mm,
    )


def load_dataset(root: str | os.PathLike, target_size: Sequence[int]) -> DatasetSplit:
    """Load ``root`` (images/, annotations/, meta.json) resized to ``target_size`` (H, W)."""
    root = Path(root)
    meta_path = root / META_FILE
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError:
        raise DatasetError("missing meta.json", meta_path) from None
    except json.JSONDecodeError as e:
        raise DatasetError(f"invalid JSON ({e.msg})", meta_path) from None
    splits = meta.get("splits")
    if not splits or "template" not in splits:
        raise DatasetError("meta.json needs splits.template", meta_path)

    def load(sid):
        return load_sample(root, sid, target_size, _spacing_for(meta, sid, meta_path))

    template = load(splits["template"])
    unlabeled = [load(s) for s in splits.get("unlabeled", [])]
    test = [load(s) for s in splits.get("test", [])]
    k = template.num_landmarks
    for s in [*unlabeled, *test]:
        if s.num_landmarks != k:
            raise DatasetError(
                f"{s.num_landmarks} landmarks, template {template.id!r} has {k}",
                root / ANNOTATION_DIR / f"{s.id}.txt",
            )
    return DatasetSplit(template=template, unlabeled=unlabeled, test=test)


def save_dataset(split: DatasetSplit, root: str | os.PathLike) -> None:
    """Write ``split`` in the on-disk layout read by :func:`load_dataset`.

    Images are written at their native size as 16-bit PNG; a sample whose
    pixel grid differs from its native size is resized back first.
    """
    root = Path(root)
    (root / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    (root / ANNOTATION_DIR).mkdir(parents=True, exist_ok=True)
    images = {}
    for s in split.samples():
        img = resize_image(s.pixels, s.native_size)
        img16 = np.round(np.clip(img, 0, 1) * 65535).astype(np.uint16)
        cv2.imwrite(str(root / IMAGE_DIR / f"{s.id}.png"), img16)
        write_annotations(root / ANNOTATION_DIR / f"{s.id}.txt",
                          rescale_coords(s.landmarks, s.size, s.native_size))
        images[s.id] = {"spacing_mm": list(s.spacing_mm)}
    meta = {
        "images": images,
        "splits": {
            "template": split.template.id,
            "unlabeled": [s.id for s in split.unlabeled],
            "test": [s.id for s in split.test],
        },
    }
    (root / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def write_label_set(root: str | os.PathLike, labels: dict[str, np.ndarray],
                    split: DatasetSplit, subdir: str = PSEUDO_LABEL_DIR) -> Path:
    """Write resized-space labels as native-space annotation files under ``root/subdir``."""
    out = Path(root) / subdir
    out.mkdir(parents=True, exist_ok=True)
    for sid, pts in labels.items():
        s = split.find(sid)
        write_annotations(out / f"{sid}.txt", rescale_coords(pts, s.size, s.native_size))
    return out


def read_label_set(directory: str | os.PathLike, split: DatasetSplit,
                   ids: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    """Read native-space annotation files back into resized space."""
    directory = Path(directory)
    if ids is None:
        ids = sorted(p.stem for p in directory.glob("*.txt"))
    out = {}
    for sid in ids:
        s = split.find(sid)
        path = directory / f"{sid}.txt"
        if not path.exists():
            raise DatasetError("missing label file", path)
        pts = read_annotations(path)
        if len(pts) != split.num_landmarks:
            raise DatasetError(f"{len(pts)} landmarks, expected {split.num_landmarks}", path)
        out[sid] = rescale_coords(pts, s.native_size, s.size)
    return out


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Anatomy:
    """Procedural scene evaluated analytically at arbitrary canonical coordinates."""

    background: np.ndarray  # (3,) plane coefficients a + b*x + c*y
    ellipses: np.ndarray  # (n, 7) cx, cy, rx, ry, theta, amplitude, ring(1)/filled(0)
    segments: np.ndarray  # (n, 6) x0, y0, x1, y1, width, amplitude
    blobs: np.ndarray  # (n, 4) cx, cy, sigma, amplitude
    texture: np.ndarray  # (H, W) fine texture on the canonical grid

    def render(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        a, b, c = self.background
        out = a + b * x + c * y
        out = out + cv2.remap(self.texture, x.astype(np.float32), y.astype(np.float32),
                              cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT_101)
        for cx, cy, rx, ry, th, amp, ring in self.ellipses:
            ct, st = np.cos(th), np.sin(th)
            u = ((x - cx) * ct + (y - cy) * st) / rx
            v = (-(x - cx) * st + (y - cy) * ct) / ry
            r = np.sqrt(u * u + v * v)
            # edge width ~2 px regardless of ellipse size
            scale = 0.5 * (rx + ry)
            if ring:
                out = out + amp * np.exp(-(((r - 1.0) * scale / 2.0) ** 2))
            else:
                out = out + amp / (1.0 + np.exp(-(1.0 - r) * scale / 1.5))
        for x0, y0, x1, y1, wd, amp in self.segments:
            dx, dy = x1 - x0, y1 - y0
            t = np.clip(((x - x0) * dx + (y - y0) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
            d2 = (x - x0 - t * dx) ** 2 + (y - y0 - t * dy) ** 2
            out = out + amp * np.exp(-d2 / (wd * wd))
        for cx, cy, sg, amp in self.blobs:
            out = out + amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * sg * sg))
        return out


def _make_anatomy(rng: np.random.Generator, size: tuple[int, int], landmarks: np.ndarray) -> _Anatomy:
    h, w = size
    s = min(h, w) / 192.0
    n_ell, n_seg, n_blob = 10, 10, 24
    ell = np.column_stack([
        rng.uniform(0, w, n_ell), rng.uniform(0, h, n_ell),
        rng.uniform(12, 48, n_ell) * s, rng.uniform(12, 48, n_ell) * s,
        rng.uniform(0, np.pi, n_ell), rng.uniform(0.15, 0.45, n_ell) * rng.choice([-1, 1], n_ell),
        rng.integers(0, 2, n_ell),
    ])
    segs = []
    for _ in range(n_seg):
        x0, y0 = rng.uniform(0, w), rng.uniform(0, h)
        ang, length = rng.uniform(0, 2 * np.pi), rng.uniform(20, 70) * s
        segs.append((x0, y0, x0 + length * np.cos(ang), y0 + length * np.sin(ang),
                     rng.uniform(1.5, 3.5) * s, rng.uniform(0.2, 0.5)))
    # each landmark sits on a junction of two or three short ridges
    for lx, ly in landmarks:
        n_arms = rng.integers(2, 4)
        base = rng.uniform(0, 2 * np.pi)
        for k in range(n_arms):
            ang = base + k * 2 * np.pi / n_arms + rng.uniform(-0.5, 0.5)
            length = rng.uniform(12, 30) * s
            segs.append((lx, ly, lx + length * np.cos(ang), ly + length * np.sin(ang),
                         rng.uniform(1.5, 2.5) * s, rng.uniform(0.4, 0.7)))
    blobs = np.column_stack([
        rng.uniform(0, w, n_blob), rng.uniform(0, h, n_blob),
        rng.uniform(2, 6, n_blob) * s, rng.uniform(0.1, 0.4, n_blob) * rng.choice([-1, 1], n_blob),
    ])
    background = np.array([0.3, rng.uniform(-0.3, 0.3) / w, rng.uniform(-0.3, 0.3) / h])
    texture = np.zeros((h, w), dtype=np.float32)
    for sigma, amp in ((1.5 * s, 0.05), (4.0 * s, 0.08)):
        noise = cv2.GaussianBlur(rng.normal(size=(h, w)).astype(np.float32), (0, 0), sigma)
        texture += amp * noise / max(float(noise.std()), 1e-12)
    return _Anatomy(background, ell, np.array(segs), blobs, texture)


@dataclass(frozen=True)
class _Deformation:
    """Smooth backward displacement: sample pixel ``p`` shows canonical point ``p + u(p)``."""

    centers: np.ndarray  # (n, 2)
    amps: np.ndarray  # (n, 2)
    sigma: float

    def __call__(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ux = np.zeros_like(x, dtype=np.float64)
        uy = np.zeros_like(y, dtype=np.float64)
        for (cx, cy), (ax, ay) in zip(self.centers, self.amps):
            g = np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * self.sigma ** 2))
            ux = ux + ax * g
            uy = uy + ay * g
        return ux, uy

    def locate(self, canonical: np.ndarray, tol: float = 1e-10, max_iter: int = 500) -> np.ndarray:
        """Sample-space points whose canonical image is ``canonical`` (fixed-point inversion)."""
        p = np.asarray(canonical, dtype=np.float64)
        x = p.copy()
        for _ in range(max_iter):
            ux, uy = self(x[:, 0], x[:, 1])
            nxt = p - np.column_stack([ux, uy])
            if np.max(np.abs(nxt - x)) < tol:
                return nxt
            x = nxt
        raise RuntimeError("deformation inversion did not converge")


def _make_deformation(rng: np.random.Generator, size: tuple[int, int], max_disp: float) -> _Deformation:
    h, w = size
    n = 6
    centers = np.column_stack([rng.uniform(0, w, n), rng.uniform(0, h, n)])
    amps = rng.normal(size=(n, 2))
    field = _Deformation(centers, amps, sigma=min(h, w) / 4.0)
    if max_disp <= 0:
        return _Deformation(centers, np.zeros_like(amps), field.sigma)
    ys, xs = np.mgrid[0:h:4, 0:w:4].astype(np.float64)
    ux, uy = field(xs, ys)
    peak = float(np.sqrt(ux * ux + uy * uy).max())
    target = rng.uniform(0.5, 1.0) * max_disp
    return _Deformation(centers, amps * (target / max(peak, 1e-12)), field.sigma)


def _sample_landmarks(rng, k: int, size, margin: float, min_sep: float) -> np.ndarray:
    h, w = size
    lo_x, hi_x = margin, w - 1 - margin
    lo_y, hi_y = margin, h - 1 - margin
    if hi_x < lo_x or hi_y < lo_y:
        raise ValueError(f"no room for landmarks: margin {margin:.1f} px in a {w}x{h} image")
    pts: list[tuple[float, float]] = []
    for _ in range(200 * k):
        p = (rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y))
        if all((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 >= min_sep ** 2 for q in pts):
            pts.append(p)
            if len(pts) == k:
                return np.array(pts)
    raise ValueError(
        f"cannot place {k} landmarks {min_sep:.1f} px apart inside margin {margin:.1f} of {w}x{h}"
    )


def generate_synthetic(
    seed: int,
    count: int,
    num_landmarks: int,
    size: Sequence[int] = (192, 192),
    *,
    n_test: int = 0,
    margin: float | None = None,
    max_displacement: float | None = None,
    spacing_mm: tuple[float, float] = (0.1, 0.1),
    min_separation: float | None = None,
) -> DatasetSplit:
    """Deterministic synthetic split: ``count`` training images plus ``n_test`` test images.

    All images are smooth random warps of one procedural scene with a
    per-image intensity perturbation. Landmarks are carried through each
    warp exactly. Sample 0 is the template and uses the identity warp.

    ``margin`` (default ``min(H, W) / 4``, i.e. half a patch of half the
    image side) is the minimum distance of any landmark from the border;
    ``max_displacement`` defaults to 8 px at 192 px scale.
    """
    if count < 2:
        raise ValueError(f"count must be >= 2, got {count}")
    if num_landmarks < 1:
        raise ValueError(f"num_landmarks must be >= 1, got {num_landmarks}")
    h, w = int(size[0]), int(size[1])
    scale = min(h, w) / 192.0
    margin = min(h, w) / 4.0 if margin is None else float(margin)
    max_disp = 8.0 * scale if max_displacement is None else float(max_displacement)
    min_sep = 16.0 * scale if min_separation is None else float(min_separation)

    root = np.random.SeedSequence(seed)
    scene_ss, *sample_ss = root.spawn(1 + count + n_test)
    scene_rng = np.random.default_rng(scene_ss)
    canon = _sample_landmarks(scene_rng, num_landmarks, (h, w), margin + 1.1 * max_disp + 1.0, min_sep)
    anatomy = _make_anatomy(scene_rng, (h, w), canon)

    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    samples = []
    for i, ss in enumerate(sample_ss):
        rng = np.random.default_rng(ss)
        deform = _make_deformation(rng, (h, w), 0.0 if i == 0 else max_disp)
        ux, uy = deform(xs, ys)
        img = anatomy.render(xs + ux, ys + uy)
        gain = rng.uniform(0.85, 1.15)
        offset = rng.uniform(-0.05, 0.05)
        gamma = rng.uniform(0.85, 1.2)
        img = np.clip(img * gain + offset, 0.0, 1.0) ** gamma
        img = img + rng.normal(0.0, 0.02, size=img.shape)
        pts = deform.locate(canon)
        samples.append(ImageSample(
            id=f"{i:03d}",
            pixels=np.clip(img, 0.0, 1.0),
            landmarks=pts,
            native_size=(h, w),
            spacing_mm=spacing_mm,
        ))
    return DatasetSplit(template=samples[0], unlabeled=samples[1:count], test=samples[count:])
