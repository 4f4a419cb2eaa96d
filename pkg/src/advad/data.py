"""Desk-scale datasets: a deterministic synthetic generator and a PNG loader.

Synthetic images carry their class in channel statistics that survive the
built-in CNN's global average pooling: a class-specific sinusoidal texture
(orientation and frequency) plus a colored blob whose channel mix is also
class-specific. Blob position varies per class too, which gives CAM something
spatial to localize, but position alone is never the only class signal.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imagecore import ImageTensor, ValueRange, quantize_8bit, read_png

NOISE_SIGMA = 10.0  # byte units


@dataclass(frozen=True)
class Dataset:
    samples: list          # [(ImageTensor[BYTE, integer-valued], label), ...]
    num_classes: int
    provenance: str        # "synthetic" | "directory"

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def image_shape(self) -> tuple:
        return self.samples[0][0].shape


def gen_synthetic(num_classes: int, per_class: int, size: int = 32,
                  seed: int = 0) -> Dataset:
    """Deterministic labeled image set; same seed, same bits."""
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    if per_class < 1:
        raise ValueError(f"per_class must be positive, got {per_class}")
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, num_classes, per_class, size]))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    samples = []
    # Amplitudes are deliberately small: global pooling averages the pixel
    # noise away, so accuracy keeps a wide margin even for a faint signal,
    # while the class margins stay crossable within a ~8/255 pixel budget.
    for k in range(num_classes):
        theta = np.pi * k / num_classes
        cycles = 3.0 + 2.0 * k
        phase = 2 * np.pi * k / max(num_classes, 1)
        tex = 4.0 * np.sin(
            2 * np.pi * cycles / size * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        # blob center on a ring; channel mix rotates with the class
        ang = 2 * np.pi * k / num_classes
        cy = size / 2 + 0.3 * size * np.sin(ang)
        cx = size / 2 + 0.3 * size * np.cos(ang)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (size / 8.0) ** 2))
        color = np.array([np.cos(ang), np.sin(ang), np.cos(2 * ang)]) * 0.5 + 0.5
        base = 128.0 + tex[:, :, None] + 12.0 * blob[:, :, None] * color[None, None, :]
        for _ in range(per_class):
            img = base + rng.normal(0.0, NOISE_SIGMA, size=(size, size, 3))
            tensor = quantize_8bit(ImageTensor(img, ValueRange.BYTE))
            samples.append((tensor, k))
    return Dataset(samples=samples, num_classes=num_classes, provenance="synthetic")


def load_png_dir(path) -> Dataset:
    """Load ``<path>/<label>/<name>.png`` with deterministic ordering
    (label directory name, then filename). All images must share one shape."""
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"{root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ValueError(f"{root}: no class subdirectories")
    samples = []
    shape = None
    for label, d in enumerate(class_dirs):
        files = sorted(d.glob("*.png"))
        if not files:
            raise ValueError(f"{d}: class directory holds no .png files")
        for f in files:
            img = read_png(f)
            if shape is None:
                shape = img.shape
            elif img.shape != shape:
                raise ValueError(f"{f}: shape {img.shape} differs from {shape}")
            samples.append((img, label))
    return Dataset(samples=samples, num_classes=len(class_dirs), provenance="directory")


def train_test_split(dataset: Dataset, test_fraction: float = 0.2,
                     seed: int = 0) -> tuple[Dataset, Dataset, dict]:
    """Seeded shuffle split; the returned dict records it for reproducibility."""
    n = len(dataset.samples)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    rng = np.random.default_rng(np.random.SeedSequence([seed, n]))
    perm = rng.permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    train = Dataset([dataset.samples[i] for i in train_idx], dataset.num_classes,
                    dataset.provenance)
    test = Dataset([dataset.samples[i] for i in test_idx], dataset.num_classes,
                   dataset.provenance)
    split = {"seed": seed, "test_fraction": test_fraction,
             "train_indices": train_idx.tolist(), "test_indices": test_idx.tolist()}
    return train, test, split


def manifest(dataset: Dataset) -> dict:
    """Per-sample content hashes, for pinning a run to its exact inputs."""
    entries = []
    for i, (img, label) in enumerate(dataset.samples):
        digest = hashlib.sha256(img.data.astype(np.uint8).tobytes()).hexdigest()
        entries.append({"index": i, "label": label, "sha256": digest})
    return {"provenance": dataset.provenance, "num_classes": dataset.num_classes,
            "count": len(dataset.samples), "samples": entries}
