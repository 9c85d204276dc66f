"""Annotation manifests, training crops and synthetic dot scenes.

The canonical annotation record is one JSON object per line::

    {"image": "relative/path.png", "points": [[x, y], ...], "split": "train"}

``split`` is optional and defaults to ``"train"``.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .groundtruth import CrowdSample, check_points, point_pixels, render_density, scale_density

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
IMAGE_MEAN = np.array([0.485, 0.456, 0.406])
IMAGE_STD = np.array([0.229, 0.224, 0.225])
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class ManifestError(ValueError):
    pass


def standardize(image: np.ndarray) -> np.ndarray:
    """[0, 1] H x W x 3 image -> 3 x H x W float32 network input."""
    img = (np.asarray(image, dtype=np.float64) - IMAGE_MEAN) / IMAGE_STD
    return np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_image(path, image) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


@dataclass
class SampleRef:
    image: Path
    points: np.ndarray
    split: str
    height: int
    width: int

    @property
    def count(self) -> int:
        return len(self.points)

    def load(self) -> CrowdSample:
        return CrowdSample(load_image(self.image), self.points, name=str(self.image))


@dataclass
class DatasetManifest:
    samples: list[SampleRef] = field(default_factory=list)

    def split(self, name: str) -> list[SampleRef]:
        return [s for s in self.samples if s.split == name]

    def split_counts(self) -> dict[str, int]:
        return dict(Counter(s.split for s in self.samples))

    def load_samples(self, split: str | None = None) -> list[CrowdSample]:
        refs = self.samples if split is None else self.split(split)
        return [r.load() for r in refs]


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    root = path.parent
    samples = []
    seen = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            image = root / rec["image"]
            points = np.asarray(rec.get("points", []), dtype=np.float64).reshape(-1, 2)
            split = rec.get("split", "train")
        except (ValueError, KeyError, TypeError) as exc:
            raise ManifestError(f"{path}:{lineno}: malformed record ({exc})") from exc
        if split not in SPLITS:
            raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
        if not image.exists():
            raise ManifestError(f"{path}:{lineno}: image not found: {image}")
        key = image.resolve()
        if key in seen and seen[key] != split:
            raise ManifestError(f"{path}:{lineno}: {rec['image']} already listed under split {seen[key]!r}")
        seen[key] = split
        with Image.open(image) as im:
            width, height = im.size
        try:
            check_points(points, height, width, label=f"record {rec['image']!r}")
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from exc
        samples.append(SampleRef(image, points, split, height, width))
    manifest = DatasetManifest(samples)
    log.info("loaded %s: %s", path, manifest.split_counts() or "no samples")
    return manifest


def write_manifest(path, records) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


def read_point_table(path) -> np.ndarray:
    """Two-column (x, y) numeric table, comma or whitespace separated."""
    text = Path(path).read_text()
    delimiter = "," if "," in text else None
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split(delimiter)
        try:
            rows.append([float(fields[0]), float(fields[1])])
        except (ValueError, IndexError):
            if rows:
                raise ValueError(f"{path}: unparseable row {line!r}")
            continue  # header line
    return np.asarray(rows, dtype=np.float64).reshape(-1, 2)


def import_point_tables(image_dir, points_dir, out_path, split="train") -> int:
    """Pair images with same-stem point tables and write a manifest."""
    image_dir, points_dir, out_path = Path(image_dir), Path(points_dir), Path(out_path)
    records = []
    for img in sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        table = next((points_dir / (img.stem + ext) for ext in (".txt", ".csv")
                      if (points_dir / (img.stem + ext)).exists()), None)
        if table is None:
            log.warning("no point table for %s, skipped", img.name)
            continue
        rel = Path(img).resolve().relative_to(out_path.parent.resolve()) \
            if img.resolve().is_relative_to(out_path.parent.resolve()) else img.resolve()
        records.append({"image": str(rel), "points": read_point_table(table).tolist(), "split": split})
    write_manifest(out_path, records)
    return len(records)


def _reflect_points(points, size, padded, axis):
    """Mirror images of ``points`` that land in the reflect-padded margin."""
    if padded <= size:
        return np.empty((0, 2))
    mirrored = points.copy()
    mirrored[:, axis] = 2 * (size - 1) - points[:, axis]
    keep = (mirrored[:, axis] >= size) & (mirrored[:, axis] < padded)
    return mirrored[keep]


def pad_sample(image, points, crop):
    """Reflect-pad bottom/right up to ``crop`` and mirror the labels with it."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    while image.shape[0] < crop or image.shape[1] < crop:
        h, w = image.shape[:2]
        # a reflect margin must be shorter than the axis it mirrors
        ph, pw = min(max(0, crop - h), h - 1), min(max(0, crop - w), w - 1)
        if ph == 0 and pw == 0:
            raise ValueError(f"cannot reflect-pad a {h}x{w} image")
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="reflect")
        points = np.concatenate([points, _reflect_points(points, w, w + pw, 0)])
        points = np.concatenate([points, _reflect_points(points, h, h + ph, 1)])
    return image, points


def crop_sample(image, points, x0, y0, crop, flip=False):
    """Crop an image and relabel from the points whose pixel falls inside."""
    h, w = image.shape[:2]
    rows, cols = point_pixels(points, h, w)
    inside = (rows >= y0) & (rows < y0 + crop) & (cols >= x0) & (cols < x0 + crop)
    pts = np.column_stack([cols[inside] - x0, rows[inside] - y0]).astype(np.float64)
    img = image[y0:y0 + crop, x0:x0 + crop]
    if flip:
        img = img[:, ::-1]
        pts[:, 0] = (crop - 1) - pts[:, 0]
    return img, pts


@dataclass
class TrainingBatch:
    images: np.ndarray  # (B, 3, crop, crop) standardized
    density: np.ndarray  # (B, 1, crop, crop) scaled to [-1, 1]
    counts: np.ndarray  # (B,)
    points: list


def training_batch(samples, batch_size=8, crop=256, rng=None, flip_prob=0.5) -> TrainingBatch:
    """Random crops with horizontal flips; density rendered after cropping."""
    if not samples:
        raise ValueError("training split is empty")
    rng = np.random.default_rng(rng)
    images, dens, counts, pts_out = [], [], [], []
    for _ in range(batch_size):
        s = samples[rng.integers(len(samples))]
        image, points = pad_sample(s.image, s.points, crop)
        h, w = image.shape[:2]
        x0 = int(rng.integers(w - crop + 1))
        y0 = int(rng.integers(h - crop + 1))
        flip = bool(rng.random() < flip_prob)
        img, pts = crop_sample(image, points, x0, y0, crop, flip)
        images.append(standardize(img))
        dens.append(scale_density(render_density(pts, crop, crop))[None].astype(np.float32))
        counts.append(len(pts))
        pts_out.append(pts)
    return TrainingBatch(np.stack(images), np.stack(dens), np.asarray(counts, dtype=np.float32), pts_out)


# -- synthetic scenes ---------------------------------------------------------

def sample_layout(num_points, height, width, min_separation, rng, max_tries=20):
    """Integer-pixel point layout with pairwise distance >= ``min_separation``."""
    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(max_tries):
        free = np.ones((height, width), dtype=bool)
        pts = []
        for _ in range(num_points):
            idx = np.flatnonzero(free)
            if len(idx) == 0:
                break
            k = idx[rng.integers(len(idx))]
            py, px = divmod(int(k), width)
            pts.append((px, py))
            free &= (xx - px) ** 2 + (yy - py) ** 2 >= min_separation ** 2
        if len(pts) == num_points:
            return np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    raise RuntimeError(
        f"could not place {num_points} points at separation {min_separation} in {height}x{width}"
    )


def synth_scene(num_points, height, width, min_separation, rng, noise=0.02, name="") -> CrowdSample:
    """Dark noisy canvas with a small bright blob at each planted point."""
    rng = np.random.default_rng(rng)
    points = sample_layout(num_points, height, width, min_separation, rng)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    base = rng.uniform(0.05, 0.15, size=3)
    image = np.broadcast_to(base, (height, width, 3)).copy()
    for px, py in points:
        amp = rng.uniform(0.6, 1.0)
        sigma = rng.uniform(0.8, 1.1)
        tint = rng.uniform(0.8, 1.0, size=3)
        r0, r1 = int(max(0, py - 4)), int(min(height, py + 5))
        c0, c1 = int(max(0, px - 4)), int(min(width, px + 5))
        d2 = (xx[r0:r1, c0:c1] - px) ** 2 + (yy[r0:r1, c0:c1] - py) ** 2
        image[r0:r1, c0:c1] += amp * np.exp(-d2 / (2 * sigma ** 2))[..., None] * tint
    image += rng.normal(0.0, noise, size=image.shape)
    return CrowdSample(np.clip(image, 0.0, 1.0), points, name=name)


def synth_dataset(n, height, width, count_range=(10, 80), min_separation=5, seed=0, prefix="scene"):
    rng = np.random.default_rng(seed)
    lo, hi = count_range
    return [
        synth_scene(int(rng.integers(lo, hi + 1)), height, width, min_separation, rng, name=f"{prefix}{i:04d}")
        for i in range(n)
    ]
