"""Dataset manifests, retina preprocessing, augmentation, synthetic fundus images.

The preprocessing order is fixed: crop/resize, histogram equalization,
standardization, then (training split only) augmentation. Intensities stay on
the 0-255 scale until standardization.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import sgt

PIPELINE_ORDER = ("crop_resize", "hist_equalize", "standardize", "augment")
SYNTH_PREFIX = "synth:"
BACKGROUND_THRESHOLD = 10  # luminance, out of 255


class DataError(ValueError):
    pass


# ---------------------------------------------------------------- manifest


@dataclass
class Record:
    source: str
    label: int
    split: str

    @property
    def is_synthetic(self):
        return self.source.startswith(SYNTH_PREFIX)

    @property
    def synth_seed(self):
        return int(self.source[len(SYNTH_PREFIX):])


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def indices(self, name):
        return [i for i, r in enumerate(self.records) if r.split == name]

    def class_counts(self, split, num_classes):
        counts = np.zeros(num_classes, dtype=np.int64)
        for r in self.split(split):
            counts[r.label] += 1
        return counts

    def validate(self, num_classes, balanced_test=False):
        errs = []
        for i, r in enumerate(self.records):
            if not 0 <= r.label < num_classes:
                errs.append(f"row {i}: label {r.label} outside [0, {num_classes - 1}]")
            if r.split not in ("train", "test"):
                errs.append(f"row {i}: split {r.split!r} is not train/test")
        if balanced_test:
            counts = self.class_counts("test", num_classes)
            if len(set(counts.tolist())) > 1:
                errs.append(f"test split is not balanced: {counts.tolist()}")
        if errs:
            raise DataError("; ".join(errs))
        return self

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["source", "label", "split"])
            for r in self.records:
                out.writerow([r.source, r.label, r.split])

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        try:
            return cls([Record(row["source"], int(row["label"]), row["split"].strip()) for row in rows])
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"malformed manifest {path}: {exc}") from None


# ---------------------------------------------------------------- preprocessing


def luminance(img):
    img = np.asarray(img, dtype=float)
    if img.ndim == 2 or img.shape[2] == 1:
        return img.reshape(img.shape[:2])
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


def foreground_box(img, threshold=BACKGROUND_THRESHOLD):
    """Inclusive (top, bottom, left, right) box of pixels brighter than ``threshold``."""
    mask = luminance(img) > threshold
    if not mask.any():
        raise DataError("image is entirely background; nothing to crop")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return rows[0], rows[-1], cols[0], cols[-1]


def resize_bilinear(img, height, width):
    """Corner-aligned bilinear resampling; same-size input is returned unchanged."""
    img = np.asarray(img, dtype=float)
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        return img.copy()
    ys = np.linspace(0, h - 1, height)
    xs = np.linspace(0, w - 1, width)
    grid = np.meshgrid(ys, xs, indexing="ij")
    return np.stack(
        [ndimage.map_coordinates(img[..., c], grid, order=1, mode="nearest") for c in range(img.shape[2])],
        axis=-1,
    )


def crop_resize(img, target, threshold=BACKGROUND_THRESHOLD):
    img = np.asarray(img)
    if img.size == 0:
        raise DataError("empty image")
    if img.ndim == 2:
        img = img[..., None]
    top, bottom, left, right = foreground_box(img, threshold)
    return resize_bilinear(img[top : bottom + 1, left : right + 1], target, target)


def hist_equalize(img):
    """Per-channel classical equalization on 256 integer levels.

    A channel with a single level has a degenerate CDF and maps to 0.
    """
    q = np.clip(np.rint(np.asarray(img, dtype=float)), 0, 255).astype(np.int64)
    flat = q.reshape(-1, q.shape[-1]) if q.ndim == 3 else q.reshape(-1, 1)
    out = np.empty(flat.shape, dtype=float)
    npix = flat.shape[0]
    for c in range(flat.shape[1]):
        cdf = np.cumsum(np.bincount(flat[:, c], minlength=256))
        cdf_min = cdf[cdf > 0][0]
        if npix == cdf_min:
            lut = np.zeros(256)
        else:
            lut = np.rint(255.0 * (cdf - cdf_min) / (npix - cdf_min)).clip(0, 255)
        out[:, c] = lut[flat[:, c]]
    return out.reshape(q.shape)


@dataclass
class PreprocessStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.std = np.asarray(self.std, dtype=float)
        if (self.std <= 0).any():
            raise DataError(f"channel std must be > 0, got {self.std.tolist()}")

    @classmethod
    def from_images(cls, images):
        """Per-channel mean/std over every pixel of the given (training) images."""
        stack = np.asarray(images, dtype=float)
        axes = tuple(range(stack.ndim - 1))
        return cls(stack.mean(axis=axes), stack.std(axis=axes))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["channel", "mean", "std"])
            for c, (m, s) in enumerate(zip(self.mean, self.std)):
                out.writerow([c, repr(float(m)), repr(float(s))])

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([float(r["mean"]) for r in rows], [float(r["std"]) for r in rows])


def standardize(img, stats):
    return (np.asarray(img, dtype=float) - stats.mean) / stats.std


@dataclass
class AugmentPolicy:
    rotation: float = 10.0
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5

    def __post_init__(self):
        for name in ("hflip_prob", "vflip_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise DataError(f"{name} must lie in [0, 1], got {p}")
        if self.rotation < 0:
            raise DataError("rotation range must be >= 0")


def rotate(img, degrees):
    if degrees == 0:
        return np.array(img, copy=True)
    return ndimage.rotate(img, degrees, axes=(1, 0), reshape=False, order=1, mode="constant", cval=0.0)


def augment(img, policy, rng):
    """Random rotation in ±``policy.rotation`` degrees plus independent flips.

    Three draws are consumed per call whatever the policy, so the stream
    position depends only on how many images were augmented.
    """
    angle = rng.uniform(-policy.rotation, policy.rotation)
    hflip = rng.random() < policy.hflip_prob
    vflip = rng.random() < policy.vflip_prob
    out = rotate(img, angle) if policy.rotation else np.array(img, copy=True)
    if hflip:
        out = out[:, ::-1]
    if vflip:
        out = out[::-1]
    return np.ascontiguousarray(out)


def stream(seed, *keys):
    """Counter-based generator keyed by ``(seed, *keys)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


# ---------------------------------------------------------------- synthetic images


def synth_image(seed, label, size=64, num_classes=5):
    """A fundus-like disk on black whose lesion count and radius grow with ``label``."""
    rng = np.random.default_rng([int(seed), int(label)])
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    radius = rng.uniform(0.36, 0.44) * size
    cy, cx = size / 2 + rng.uniform(-0.05, 0.05, size=2) * size
    r = np.hypot(yy - cy, xx - cx)
    disk = r <= radius
    falloff = 1.0 - 0.35 * (r / radius) ** 2
    base = np.array([0.78, 0.36, 0.16]) * rng.uniform(0.9, 1.1, size=3)
    img = falloff[..., None] * base
    severity = label / max(num_classes - 1, 1)
    n_dots = int(round(12 * severity)) + (int(rng.integers(0, 2)) if label else 0)
    dot_r = (0.025 + 0.05 * severity) * size
    for _ in range(n_dots):
        rho = radius * 0.75 * np.sqrt(rng.random())
        phi = rng.uniform(0, 2 * np.pi)
        dy, dx = cy + rho * np.sin(phi), cx + rho * np.cos(phi)
        spot = np.hypot(yy - dy, xx - dx) <= dot_r * rng.uniform(0.8, 1.2)
        img[spot] = np.array([1.0, 0.92, 0.45])
    img = img + rng.normal(0, 0.03, size=img.shape)
    img[~disk] = 0.0
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def synth_manifest(classes=5, train_per_class=200, test_per_class=50, seed=0):
    """Balanced manifest of synthetic records; seeds derive from ``seed``."""
    if classes < 2:
        raise DataError("need at least two classes")
    ss = np.random.SeedSequence(int(seed))
    seeds = ss.generate_state(classes * (train_per_class + test_per_class), dtype=np.uint32)
    records = []
    i = 0
    for split, per in (("train", train_per_class), ("test", test_per_class)):
        for k in range(classes):
            for _ in range(per):
                records.append(Record(f"{SYNTH_PREFIX}{seeds[i]}", k, split))
                i += 1
    return DatasetManifest(records)


def synth_dataset(classes=5, per_class=200, size=64, seed=0):
    """``(manifest, images uint8 N×size×size×3)`` for a training-only synthetic set."""
    manifest = synth_manifest(classes, per_class, 0, seed)
    images = np.stack([synth_image(r.synth_seed, r.label, size, classes) for r in manifest.records])
    return manifest, images


def load_source(record, size, num_classes):
    if record.is_synthetic:
        return synth_image(record.synth_seed, record.label, size, num_classes)
    from PIL import Image

    with Image.open(record.source) as im:
        return np.asarray(im.convert("RGB"))


# ---------------------------------------------------------------- cache


@dataclass
class ImageSet:
    """Preprocessed images (N×H×W×C float) with integer labels."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


def missing_sources(manifest):
    return [r.source for r in manifest.records if not r.is_synthetic and not Path(r.source).exists()]


def prepare_cache(manifest, cache_dir, size=64, num_classes=5, threshold=BACKGROUND_THRESHOLD):
    """Run crop/resize → equalize → standardize over the manifest and write the cache.

    Standardization statistics come from the training split only. Returns the stats.
    """
    cache_dir = Path(cache_dir)
    (cache_dir / "images").mkdir(parents=True, exist_ok=True)
    equalized = [hist_equalize(crop_resize(load_source(r, size, num_classes), size, threshold)) for r in manifest.records]
    train_idx = manifest.indices("train")
    if not train_idx:
        raise DataError("manifest has no training records")
    stats = PreprocessStats.from_images([equalized[i] for i in train_idx])
    for i, img in enumerate(equalized):
        sgt.save(cache_dir / "images" / f"{i:06d}.sgt", standardize(img, stats).astype(np.float32))
    manifest.write_csv(cache_dir / "manifest.csv")
    stats.write_csv(cache_dir / "stats.csv")
    return stats


def load_cache(cache_dir, split, dtype=np.float32):
    cache_dir = Path(cache_dir)
    manifest = DatasetManifest.read_csv(cache_dir / "manifest.csv")
    idx = manifest.indices(split)
    if not idx:
        return ImageSet(np.zeros((0, 1, 1, 1), dtype=dtype), np.zeros(0, dtype=np.int64))
    images = np.stack([sgt.load(cache_dir / "images" / f"{i:06d}.sgt") for i in idx]).astype(dtype)
    labels = np.array([manifest.records[i].label for i in idx], dtype=np.int64)
    return ImageSet(images, labels)
