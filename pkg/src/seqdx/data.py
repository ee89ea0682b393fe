"""Patient-per-directory datasets, preprocessing, augmentation and shuffling.

Randomness: every stochastic step draws from ``substream(root_seed, name, ...)``,
a numpy Generator keyed by the root seed plus a tuple of names/ints such as
``("augment", epoch, patient_index)``.  Streams are independent of the order
in which they are requested, so results do not depend on how loading is
scheduled.
"""
from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import Tensor

logger = logging.getLogger(__name__)

DISEASES = ("hemorrhage", "ischemia", "fracture", "mass", "edema")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class SplitError(ValueError):
    pass


def substream(seed: int, *key) -> np.random.Generator:
    words = [int(seed) & 0xFFFFFFFF]
    for k in key:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(words))


@dataclass
class PatientRecord:
    patient_id: str
    image_refs: list
    labels: np.ndarray
    images: list | None = field(default=None, repr=False)  # decoded [s, s] arrays in [0, 1]

    @property
    def num_images(self) -> int:
        return len(self.images) if self.images is not None else len(self.image_refs)

    def load(self, image_size: int) -> list:
        """Decoded grayscale images, cached after the first call."""
        if self.images is None:
            self.images = [read_gray(p, image_size) for p in self.image_refs]
        return self.images


@dataclass
class AugmentParams:
    max_rotation_deg: float = 10.0
    crop_scale_min: float = 0.6
    enabled: bool = True

    def validate(self):
        if not 0 <= self.max_rotation_deg < 90:
            raise ValueError("max_rotation_deg must lie in [0, 90)")
        if not 0 < self.crop_scale_min <= 1:
            raise ValueError("crop_scale_min must lie in (0, 1]")


@dataclass
class DatasetSplit:
    train: list
    validation: list


# ---------------------------------------------------------------------------
# ingestion

def read_labels(labels_file, columns=DISEASES) -> dict:
    """``{patient_id: label vector or None}``; None marks a missing diagnostic."""
    path = Path(labels_file)
    if not path.is_file():
        raise FileNotFoundError(f"labels file not found: {path}")
    out = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ("patient_id", *columns) if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        for row in reader:
            pid = row["patient_id"].strip()
            cells = [(row[c] or "").strip() for c in columns]
            if any(c == "" for c in cells):
                out[pid] = None
                continue
            vals = [int(c) for c in cells]
            if any(v not in (0, 1) for v in vals):
                raise ValueError(f"{path}: patient {pid} has non-binary indicator")
            out[pid] = np.array(vals, dtype=np.int64)
    return out


def load_dataset(root, labels_file=None, columns=DISEASES) -> list:
    root = Path(root)
    labels = read_labels(labels_file if labels_file is not None else root / "labels.csv", columns)
    records = []
    for pid in sorted(labels):
        y = labels[pid]
        if y is None:
            logger.info("patient %s has no diagnostic; removed", pid)
            continue
        pdir = root / pid
        if not pdir.is_dir():
            logger.warning("patient %s listed in labels but has no directory; skipped", pid)
            continue
        refs = sorted(p for p in pdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not refs:
            logger.warning("patient %s has no readable images; excluded", pid)
            continue
        records.append(PatientRecord(pid, refs, y))
    return records


def filter_patients(records, max_images: int = 50) -> list:
    """Drop (never truncate) patients with more than ``max_images`` images."""
    if max_images < 1:
        raise ValueError("max_images must be >= 1")
    kept = [r for r in records if r.num_images <= max_images]
    removed = len(records) - len(kept)
    if removed:
        logger.info("removed %d patients with more than %d images", removed, max_images)
    return kept


def read_gray(path, image_size: int | None = None) -> np.ndarray:
    """Load an image as 8-bit luma, resized bilinearly to a square, scaled to [0, 1]."""
    with Image.open(path) as im:
        im = im.convert("L")
        if image_size is not None and im.size != (image_size, image_size):
            im = im.resize((image_size, image_size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float64)
    return arr / 255.0


def gray_to_rgb(image, image_size: int | None = None) -> Tensor:
    """Replicate one [0, 255] grayscale grid into a [3, s, s] tensor in [0, 1]."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale grid, got shape {arr.shape}")
    side = image_size or max(arr.shape)
    if arr.shape != (side, side):
        im = Image.fromarray(arr.astype(np.float32), mode="F").resize((side, side), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float64)
    arr = np.clip(arr / 255.0, 0.0, 1.0)
    return Tensor(np.broadcast_to(arr, (3, side, side)))


def unit_gray_to_rgb(arr: np.ndarray) -> Tensor:
    return Tensor(np.broadcast_to(arr, (3,) + arr.shape))


# ---------------------------------------------------------------------------
# augmentation

def _bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample [C, h, w] ``img`` at float coordinates; outside the frame reads 0."""
    c, h, w = img.shape
    padded = np.zeros((c, h + 2, w + 2), dtype=img.dtype)
    padded[:, 1:-1, 1:-1] = img
    ys = np.clip(ys + 1, 0, h + 1)
    xs = np.clip(xs + 1, 0, w + 1)
    y0 = np.minimum(np.floor(ys).astype(int), h)
    x0 = np.minimum(np.floor(xs).astype(int), w)
    dy, dx = ys - y0, xs - x0
    top = padded[:, y0, x0] * (1 - dx) + padded[:, y0, x0 + 1] * dx
    bot = padded[:, y0 + 1, x0] * (1 - dx) + padded[:, y0 + 1, x0 + 1] * dx
    return top * (1 - dy) + bot * dy


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    _, h, w = img.shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    t = math.radians(degrees)
    cos, sin = math.cos(t), math.sin(t)
    # inverse map: output pixel -> source location
    ys = cos * (yy - cy) - sin * (xx - cx) + cy
    xs = sin * (yy - cy) + cos * (xx - cx) + cx
    return _bilinear(img, ys, xs)


def resized_crop(img: np.ndarray, top: float, left: float, side: float) -> np.ndarray:
    _, h, w = img.shape
    scale_y, scale_x = side / h, side / w
    ys = top + (np.arange(h) + 0.5) * scale_y - 0.5
    xs = left + (np.arange(w) + 0.5) * scale_x - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return _bilinear(img, yy, xx)


def augment_array(img: np.ndarray, params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    if not params.enabled:
        return img
    angle = rng.uniform(-params.max_rotation_deg, params.max_rotation_deg)
    area = rng.uniform(params.crop_scale_min, 1.0)
    _, h, w = img.shape
    side = math.sqrt(area) * min(h, w)
    top = rng.uniform(0, h - side)
    left = rng.uniform(0, w - side)
    out = img
    if angle != 0:
        out = rotate(out, angle)
    if side != min(h, w) or top or left:
        out = resized_crop(out, top, left, side)
    return np.clip(out, 0.0, 1.0)


def augment(image: Tensor, params: AugmentParams, rng: np.random.Generator) -> Tensor:
    """Random rotation then random resized crop; shape is preserved."""
    if not params.enabled:
        return image
    out = augment_array(image.data.astype(np.float64), params, rng)
    return Tensor(out)


# ---------------------------------------------------------------------------
# splitting and shuffling

def split_train_val(records, val_fraction: float = 0.1, seed: int = 0) -> DatasetSplit:
    if not 0 < val_fraction < 1:
        raise SplitError("val_fraction must lie in (0, 1)")
    records = list(records)
    if len(records) < 2:
        raise SplitError("need at least two patients to split")
    ids = [r.patient_id for r in records]
    if len(set(ids)) != len(ids):
        raise SplitError("duplicate patient ids")
    order = substream(seed, "split").permutation(len(records))
    n_val = min(max(1, round(val_fraction * len(records))), len(records) - 1)
    val = [records[i] for i in order[:n_val]]
    train = [records[i] for i in order[n_val:]]
    return DatasetSplit(train, val)


def epoch_shuffle(records, rng: np.random.Generator) -> list:
    """Random patient order, then an independent random image order per patient."""
    out = []
    for i in rng.permutation(len(records)):
        rec = records[int(i)]
        perm = rng.permutation(rec.num_images)
        out.append((rec, [int(j) for j in perm]))
    return out
