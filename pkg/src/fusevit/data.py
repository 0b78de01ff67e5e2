"""Synthetic ultra-fine-grained image sets, augmentation, and disk layout.

Every class shares one smooth global background; classes differ only in the
micro-texture painted into a handful of class-assigned signal cells (the
image is divided into a 4x4 grid of cells). Per-image Gaussian noise is the
only intra-class variation, so at noise 0 all images of a class are
identical, which makes the easy variant separable by construction.

Images are single-channel HxWx1 float32 arrays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ftz
from .errors import ConfigError

SIGNAL_GRID = 4  # signal cells live on a SIGNAL_GRID x SIGNAL_GRID lattice


@dataclass
class SynthSpec:
    """Parameters of one synthetic dataset."""

    num_classes: int = 5
    train_per_class: int = 8
    test_per_class: int = 4
    image_size: int = 32
    signal_patch_count: int = 6
    signal_amplitude: float = 1.0
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("num_classes", "train_per_class", "test_per_class",
                     "image_size", "signal_patch_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.signal_amplitude <= 1.0:
            raise ConfigError(
                f"signal_amplitude must be in (0, 1], got {self.signal_amplitude}")
        if not np.isfinite(self.noise_std) or self.noise_std < 0:
            raise ConfigError(f"noise_std must be finite and >= 0, got {self.noise_std}")
        if self.signal_patch_count > SIGNAL_GRID * SIGNAL_GRID:
            raise ConfigError(
                f"signal_patch_count {self.signal_patch_count} exceeds the "
                f"{SIGNAL_GRID * SIGNAL_GRID} available cells")
        if self.image_size < SIGNAL_GRID:
            raise ConfigError(f"image_size must be at least {SIGNAL_GRID}")


@dataclass
class ImageSet:
    """A batch of labeled images: (n, H, W, 1) float32 plus int labels."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class SynthDataset:
    spec: SynthSpec
    train: ImageSet
    test: ImageSet

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes


def _smooth_background(rng: np.random.Generator, size: int) -> np.ndarray:
    # low-resolution noise upsampled bilinearly, scaled into [0, 0.5]
    coarse = rng.uniform(0.0, 1.0, size=(5, 5))
    bg = bilinear_resize(coarse[:, :, None], size, size)[:, :, 0]
    return (0.5 * bg).astype(np.float64)


def generate_synth(spec: SynthSpec) -> SynthDataset:
    """Deterministic dataset build: prototypes per class plus per-image noise."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    size = spec.image_size
    cell = size // SIGNAL_GRID
    background = _smooth_background(rng, size)

    prototypes = np.empty((spec.num_classes, size, size), dtype=np.float64)
    total_cells = SIGNAL_GRID * SIGNAL_GRID
    for c in range(spec.num_classes):
        cells = rng.choice(total_cells, size=spec.signal_patch_count, replace=False)
        proto = background.copy()
        for flat in cells:
            r, q = divmod(int(flat), SIGNAL_GRID)
            texture = rng.uniform(-0.5, 0.5, size=(cell, cell))
            proto[r * cell:(r + 1) * cell, q * cell:(q + 1) * cell] += (
                spec.signal_amplitude * texture)
        prototypes[c] = proto

    def draw(per_class: int) -> ImageSet:
        images = np.empty((spec.num_classes * per_class, size, size, 1),
                          dtype=np.float32)
        labels = np.empty(spec.num_classes * per_class, dtype=np.int64)
        i = 0
        for c in range(spec.num_classes):
            for _ in range(per_class):
                img = prototypes[c]
                if spec.noise_std > 0:
                    img = img + rng.normal(0.0, spec.noise_std, size=(size, size))
                images[i, :, :, 0] = img.astype(np.float32)
                labels[i] = c
                i += 1
        return ImageSet(images=images, labels=labels)

    return SynthDataset(spec=spec, train=draw(spec.train_per_class),
                        test=draw(spec.test_per_class))


# ---- augmentation ------------------------------------------------------------


@dataclass
class AugmentConfig:
    flip: bool = True
    crop_size: int = 32
    resize_to: int = 32

    def __post_init__(self):
        if self.crop_size < 1 or self.resize_to < 1:
            raise ConfigError("crop_size and resize_to must be positive")
        if self.crop_size > self.resize_to:
            raise ConfigError(
                f"crop {self.crop_size} larger than resized image {self.resize_to}")


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain bilinear resampling of an HxWxC array (half-pixel centers)."""
    h, w, _ = image.shape
    if (h, w) == (out_h, out_w):
        return image.astype(np.float32, copy=True)
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bottom = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return (top * (1 - wy) + bottom * wy).astype(np.float32)


def augment(image: np.ndarray, cfg: AugmentConfig,
            rng: np.random.Generator | None = None, train: bool = True) -> np.ndarray:
    """Resize, crop (random in training, centered otherwise), maybe flip.

    Training mode needs an RNG; evaluation mode is fully deterministic.
    """
    if train and rng is None:
        raise ConfigError("training-mode augmentation needs an RNG")
    resized = bilinear_resize(image, cfg.resize_to, cfg.resize_to)
    span = cfg.resize_to - cfg.crop_size
    if train:
        oy = int(rng.integers(0, span + 1))
        ox = int(rng.integers(0, span + 1))
    else:
        oy = ox = span // 2
    out = resized[oy:oy + cfg.crop_size, ox:ox + cfg.crop_size, :]
    if train and cfg.flip and rng.random() < 0.5:
        out = out[:, ::-1, :]
    return np.ascontiguousarray(out)


def flip_horizontal(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[:, ::-1, :])


# ---- disk format --------------------------------------------------------------


def save_dataset(dataset: SynthDataset, directory) -> None:
    """Manifest JSON plus one FTZ file per image.

    Each manifest item records file, label, and split ("train"/"test").
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    items = []
    for split_name, split in (("train", dataset.train), ("test", dataset.test)):
        for i in range(len(split)):
            filename = f"{split_name}_{i:05d}.ftz"
            ftz.write(directory / filename, split.images[i])
            items.append({"file": filename, "label": int(split.labels[i]),
                          "split": split_name})
    manifest = {"classes": dataset.num_classes,
                "spec": dataset.spec.__dict__,
                "items": items}
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(directory) -> SynthDataset:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    spec = SynthSpec(**manifest["spec"])
    splits: dict[str, tuple[list, list]] = {"train": ([], []), "test": ([], [])}
    for item in manifest["items"]:
        split = item.get("split", "train")
        if split not in splits:
            raise ConfigError(f"unknown split {split!r} in manifest")
        images, labels = splits[split]
        images.append(ftz.read(directory / item["file"]).astype(np.float32))
        labels.append(int(item["label"]))

    def pack(split: str) -> ImageSet:
        images, labels = splits[split]
        return ImageSet(images=np.stack(images) if images else
                        np.empty((0, spec.image_size, spec.image_size, 1), np.float32),
                        labels=np.asarray(labels, dtype=np.int64))

    return SynthDataset(spec=spec, train=pack("train"), test=pack("test"))
