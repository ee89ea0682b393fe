"""Synthetic patients: variable-length image sets where positives carry a blob
in only some of their images, so no per-image label can be inferred."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .data import DISEASES, PatientRecord, substream

# per-disease prevalence of a head CT cohort, in DISEASES order
CLINICAL_PREVALENCE = (0.2830, 0.1120, 0.0715, 0.0187, 0.1540)

# (radius_px, intensity) per disease in multi-label mode
DISEASE_SIGNATURES = ((2, 1.0), (4, 0.45), (1, 0.8), (6, 0.3), (3, 0.65))


@dataclass
class SynthConfig:
    num_patients: int = 250
    image_size: int = 32
    min_images: int = 3
    max_images: int = 12
    prevalence: tuple = (0.3,)
    blob_radius_px: int = 3
    blob_intensity: float = 0.8
    noise_sigma: float = 0.02
    affected_fraction_range: tuple = (0.2, 0.6)

    def validate(self):
        if self.num_patients < 1 or self.image_size < 1:
            raise ValueError("num_patients and image_size must be positive")
        if not 1 <= self.min_images <= self.max_images <= 50:
            raise ValueError("need 1 <= min_images <= max_images <= 50")
        if len(self.prevalence) not in (1, 5):
            raise ValueError("prevalence must have 1 or 5 entries")
        if any(not 0 <= p < 1 for p in self.prevalence):
            raise ValueError("prevalence entries must lie in [0, 1)")
        lo, hi = self.affected_fraction_range
        if not 0 < lo <= hi <= 1:
            raise ValueError("affected_fraction_range must satisfy 0 < lo <= hi <= 1")
        if self.noise_sigma < 0 or not 0 < self.blob_intensity <= 1 or self.blob_radius_px < 1:
            raise ValueError("invalid blob or noise parameters")

    @property
    def num_outputs(self) -> int:
        return len(self.prevalence)

    def signature(self, disease: int) -> tuple:
        if self.num_outputs == 1:
            return self.blob_radius_px, self.blob_intensity
        return DISEASE_SIGNATURES[disease]


@dataclass
class Blob:
    image_index: int
    x: int
    y: int
    disease: int = 0


@dataclass
class SynthPatient:
    record: PatientRecord
    blobs: list = field(default_factory=list)
    clean: list = field(default_factory=list)  # images before noise, for oracle tests


def blob_profile(size: int, cx: int, cy: int, radius: int, intensity: float) -> np.ndarray:
    """Gaussian bump (sigma = radius/2) truncated to a disk of ``radius``."""
    yy, xx = np.mgrid[0:size, 0:size]
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    sigma = radius / 2
    prof = intensity * np.exp(-d2 / (2 * sigma * sigma))
    prof[d2 > radius * radius] = 0.0
    return prof


def generate_patient(config: SynthConfig, rng: np.random.Generator, patient_id: str = "p0000") -> SynthPatient:
    s = config.image_size
    n = int(rng.integers(config.min_images, config.max_images + 1))
    labels = (rng.random(config.num_outputs) < np.asarray(config.prevalence)).astype(np.int64)
    clean = [np.zeros((s, s)) for _ in range(n)]
    blobs = []
    for d in np.flatnonzero(labels):
        radius, intensity = config.signature(int(d))
        frac = rng.uniform(*config.affected_fraction_range)
        k = max(1, min(n, math.ceil(frac * n - 1e-9)))
        if n >= 2 and config.affected_fraction_range[1] < 1:
            k = min(k, n - 1)  # keep at least one clean image
        chosen = sorted(int(i) for i in rng.choice(n, size=k, replace=False))
        lo, hi = radius, s - 1 - radius
        for i in chosen:
            cx, cy = (int(v) for v in rng.integers(lo, hi + 1, size=2))
            clean[i] = clean[i] + blob_profile(s, cx, cy, radius, intensity)
            blobs.append(Blob(i, cx, cy, int(d)))
    images = []
    for img in clean:
        noisy = img + rng.normal(0.0, config.noise_sigma, img.shape) if config.noise_sigma > 0 else img
        images.append(np.clip(noisy, 0.0, 1.0))
    refs = [f"img_{i:03d}.png" for i in range(n)]
    record = PatientRecord(patient_id, refs, labels, images=images)
    return SynthPatient(record, blobs, [np.clip(c, 0.0, 1.0) for c in clean])


def patient_id(index: int) -> str:
    return f"p{index:04d}"


def generate_patients(config: SynthConfig, seed: int) -> list:
    config.validate()
    return [generate_patient(config, substream(seed, "synth", i), patient_id(i))
            for i in range(config.num_patients)]


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def generate_dataset(config: SynthConfig, seed: int, out_dir=None):
    """Generate patients and, if ``out_dir`` is given, write the dataset layout.

    Returns ``(records, manifest_rows)``.  Written datasets hold 8-bit PNGs, so
    records carry images re-read at that quantization.
    """
    patients = generate_patients(config, seed)
    manifest = [(p.record.patient_id, b.image_index, b.x, b.y, DISEASES[b.disease])
                for p in patients for b in p.blobs]
    records = [p.record for p in patients]
    if out_dir is not None:
        write_dataset(patients, config, out_dir)
        for p in patients:
            p.record.images = [quantize(img) / 255.0 for img in p.record.images]
    return records, manifest


def write_dataset(patients, config: SynthConfig, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "labels.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", *DISEASES])
        for p in patients:
            y = [int(v) for v in p.record.labels]
            if config.num_outputs == 1:
                # single-disease data only fills the hemorrhage column
                y = y + [0, 0, 0, 0]
            w.writerow([p.record.patient_id, *y])
    with (out / "manifest.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "image_index", "blob_x", "blob_y", "disease"])
        for p in patients:
            for b in p.blobs:
                w.writerow([p.record.patient_id, b.image_index, b.x, b.y, DISEASES[b.disease]])
    for p in patients:
        pdir = out / p.record.patient_id
        pdir.mkdir(exist_ok=True)
        paths = []
        for name, img in zip(p.record.image_refs, p.record.images):
            path = pdir / name
            Image.fromarray(quantize(img), mode="L").save(path, format="PNG")
            paths.append(path)
        p.record.image_refs = paths


def read_manifest(path) -> list:
    with Path(path).open(newline="") as fh:
        return [(r["patient_id"], int(r["image_index"]), int(r["blob_x"]), int(r["blob_y"]),
                 r["disease"]) for r in csv.DictReader(fh)]


def blob_detector(images, threshold: float = 0.4) -> int:
    """Hand-written oracle: 3x3 box-filter each image, threshold its max, OR over images."""
    for img in images:
        a = np.asarray(img, dtype=np.float64)
        p = np.pad(a, 1)
        box = sum(p[i:i + a.shape[0], j:j + a.shape[1]] for i in range(3) for j in range(3)) / 9
        if box.max() > threshold:
            return 1
    return 0
