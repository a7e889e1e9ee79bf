"""Dataset ingestion, deterministic splitting, resizing, and augmentation.

Images are single-channel 2-D float grids with values in [0, 1]. Splits are
stratified on the original class labels; sub-class relabeling happens later
and never touches val/test samples.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from clogcd.errors import DataError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass
class ImageSample:
    id: str
    pixels: np.ndarray  # (H, W), values in [0, 1]
    original_label: int
    split: str | None = None


@dataclass
class LabeledDataset:
    samples: list[ImageSample]
    class_count: int
    class_names: list[str]

    def __post_init__(self):
        if not self.samples:
            raise DataError("dataset has no samples")
        seen = set()
        per_class = [0] * self.class_count
        for s in self.samples:
            if s.id in seen:
                raise DataError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)
            if not 0 <= s.original_label < self.class_count:
                raise DataError(f"sample {s.id!r} has label {s.original_label} "
                                f"outside [0, {self.class_count})")
            per_class[s.original_label] += 1
        for c, n in enumerate(per_class):
            if n == 0:
                raise DataError(f"class {self.class_names[c]!r} has no samples")

    def of_split(self, split: str) -> list[ImageSample]:
        return [s for s in self.samples if s.split == split]

    def arrays(self, split: str):
        """Stack one split into (ids, images (N, H, W), labels (N,))."""
        samples = self.of_split(split)
        ids = [s.id for s in samples]
        if not samples:
            return ids, np.zeros((0, 0, 0)), np.zeros(0, dtype=np.int64)
        images = np.stack([s.pixels for s in samples])
        labels = np.array([s.original_label for s in samples], dtype=np.int64)
        return ids, images, labels


@dataclass
class SplitRatios:
    train: float = 0.7
    val: float = 0.2
    test: float = 0.1

    def __post_init__(self):
        for name in SPLITS:
            if getattr(self, name) <= 0:
                raise DataError(f"split ratio {name} must be positive")
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise DataError("split ratios must sum to 1")


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def load_image_folder(path: str | Path) -> LabeledDataset:
    """Load `<root>/<class_name>/*.png`, classes ordered lexicographically.

    Pixels are converted to gray and normalized to [0, 1].
    """
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise DataError(f"no class subdirectories under {root}")
    samples = []
    class_names = []
    for label, class_dir in enumerate(class_dirs):
        class_names.append(class_dir.name)
        files = sorted(class_dir.glob("*.png"))
        if not files:
            raise DataError(f"class directory has no PNG images: {class_dir}")
        for f in files:
            try:
                with Image.open(f) as img:
                    gray = img.convert("L")
                    pixels = np.asarray(gray, dtype=np.float64) / 255.0
            except Exception as exc:
                raise DataError(f"unreadable image {f}: {exc}") from exc
            samples.append(ImageSample(id=f"{class_dir.name}/{f.name}",
                                       pixels=pixels, original_label=label))
    return LabeledDataset(samples, len(class_dirs), class_names)


@dataclass
class ModeSpec:
    """One blob mode of a synthetic class: center in unit coordinates."""
    center: tuple[float, float]  # (row, col) fractions in [0, 1]
    count: int
    radius: float = 0.12  # gaussian blob sigma as a fraction of image height


@dataclass
class SyntheticClassSpec:
    name: str
    modes: list[ModeSpec] = field(default_factory=list)


def generate_synthetic(class_specs: list[SyntheticClassSpec], image_size: tuple[int, int],
                       noise_std: float, seed: int) -> LabeledDataset:
    """Deterministic blob dataset: one gaussian bump per mode plus pixel noise.

    Class sizes are exactly as requested, so imbalance is under the caller's
    control. With noise_std = 0 every sample of a mode is bit-identical.
    """
    if noise_std < 0:
        raise DataError("noise_std must be >= 0")
    h, w = image_size
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:h, 0:w]
    samples = []
    for label, cspec in enumerate(class_specs):
        if not cspec.modes or sum(m.count for m in cspec.modes) < 1:
            raise DataError(f"synthetic class {cspec.name!r} has no samples")
        for mode_idx, mode in enumerate(cspec.modes):
            if mode.count < 1:
                raise DataError(f"mode {mode_idx} of class {cspec.name!r} has count < 1")
            cy, cx = mode.center[0] * (h - 1), mode.center[1] * (w - 1)
            sigma = max(mode.radius * h, 1e-6)
            blob = np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * sigma ** 2))
            for i in range(mode.count):
                pixels = blob.copy()
                if noise_std > 0:
                    pixels = pixels + rng.normal(0.0, noise_std, size=(h, w))
                samples.append(ImageSample(
                    id=f"{cspec.name}/m{mode_idx}/s{i:04d}",
                    pixels=np.clip(pixels, 0.0, 1.0),
                    original_label=label,
                ))
    return LabeledDataset(samples, len(class_specs), [c.name for c in class_specs])


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def split_dataset(ds: LabeledDataset, ratios: SplitRatios, seed: int) -> LabeledDataset:
    """Stratified split; val/test counts are floored, the remainder trains.

    Deterministic: samples are ordered by id before the seeded shuffle, so
    assignment does not depend on ingestion order.
    """
    by_class: list[list[ImageSample]] = [[] for _ in range(ds.class_count)]
    for s in ds.samples:
        by_class[s.original_label].append(s)
    for label, members in enumerate(by_class):
        members.sort(key=lambda s: s.id)
        n = len(members)
        n_val = math.floor(n * ratios.val)
        n_test = math.floor(n * ratios.test)
        n_train = n - n_val - n_test
        if n_train < 1:
            raise DataError(f"class {ds.class_names[label]!r} too small to stratify "
                            f"({n} samples)")
        if n_val == 0 or n_test == 0:
            log.warning("class %r too small for all splits: train=%d val=%d test=%d",
                        ds.class_names[label], n_train, n_val, n_test)
        order = np.random.default_rng([seed, label]).permutation(n)
        for pos, idx in enumerate(order):
            if pos < n_test:
                members[idx].split = "test"
            elif pos < n_test + n_val:
                members[idx].split = "val"
            else:
                members[idx].split = "train"
    return ds


# ---------------------------------------------------------------------------
# resizing
# ---------------------------------------------------------------------------

def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with sample centers at (i + 0.5) * scale - 0.5.

    Source coordinates are clamped to the grid, so outputs stay inside the
    input's value range.
    """
    if out_h < 1 or out_w < 1:
        raise DataError(f"target size must be positive, got {out_h}x{out_w}")
    in_h, in_w = img.shape
    if in_h == out_h and in_w == out_w:
        return img.copy()

    def axis_coords(n_in, n_out):
        scale = n_in / n_out
        src = (np.arange(n_out) + 0.5) * scale - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    y0, y1, fy = axis_coords(in_h, out_h)
    x0, x1, fx = axis_coords(in_w, out_w)
    top = img[np.ix_(y0, x0)] * (1 - fx) + img[np.ix_(y0, x1)] * fx
    bottom = img[np.ix_(y1, x0)] * (1 - fx) + img[np.ix_(y1, x1)] * fx
    return top * (1 - fy[:, None]) + bottom * fy[:, None]


def resize_dataset(ds: LabeledDataset, out_h: int, out_w: int) -> LabeledDataset:
    for s in ds.samples:
        s.pixels = resize_bilinear(s.pixels, out_h, out_w)
    return ds


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

AUGMENT_OPS = ("flip", "rotate", "shift")
ROTATE_MAX_DEG = 15.0
SHIFT_MAX_FRAC = 0.10


def _rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the center via inverse mapping, bilinear, zero fill."""
    h, w = img.shape
    theta = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w]
    dy, dx = ys - cy, xs - cx
    src_y = cy + np.cos(theta) * dy - np.sin(theta) * dx
    src_x = cx + np.sin(theta) * dy + np.cos(theta) * dx
    y0 = np.floor(src_y).astype(int)
    x0 = np.floor(src_x).astype(int)
    fy, fx = src_y - y0, src_x - x0
    out = np.zeros_like(img)
    for oy, ox, wgt in ((y0, x0, (1 - fy) * (1 - fx)), (y0, x0 + 1, (1 - fy) * fx),
                        (y0 + 1, x0, fy * (1 - fx)), (y0 + 1, x0 + 1, fy * fx)):
        valid = (oy >= 0) & (oy < h) & (ox >= 0) & (ox < w)
        out[valid] += wgt[valid] * img[oy[valid], ox[valid]]
    return out


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(img)
    h, w = img.shape
    ys_src = slice(max(0, -dy), min(h, h - dy))
    xs_src = slice(max(0, -dx), min(w, w - dx))
    ys_dst = slice(max(0, dy), min(h, h + dy))
    xs_dst = slice(max(0, dx), min(w, w + dx))
    out[ys_dst, xs_dst] = img[ys_src, xs_src]
    return out


def augment(train_samples: list[ImageSample], policy: list[str], seed: int,
            copies: int = 1) -> list[ImageSample]:
    """Originals plus `copies` transformed copies per sample per policy op.

    Flip is the deterministic horizontal mirror; rotation draws an angle in
    [-15, 15] degrees and shift an offset within 10% of each dimension, both
    from the seeded stream. Only train samples may be augmented.
    """
    for op in policy:
        if op not in AUGMENT_OPS:
            raise DataError(f"unknown augmentation op {op!r}; valid: {AUGMENT_OPS}")
    for s in train_samples:
        if s.split != "train":
            raise DataError(f"augmentation requested on non-train sample {s.id!r} "
                            f"(split={s.split})")
    out = list(train_samples)
    ordered = sorted(train_samples, key=lambda s: s.id)
    for op in policy:
        for s in ordered:
            rng = np.random.default_rng([seed, hash_id(s.id), AUGMENT_OPS.index(op)])
            for c in range(copies):
                if op == "flip":
                    pixels = np.fliplr(s.pixels).copy()
                elif op == "rotate":
                    pixels = _rotate(s.pixels, rng.uniform(-ROTATE_MAX_DEG, ROTATE_MAX_DEG))
                else:
                    h, w = s.pixels.shape
                    max_dy = max(1, int(h * SHIFT_MAX_FRAC))
                    max_dx = max(1, int(w * SHIFT_MAX_FRAC))
                    pixels = _shift(s.pixels, int(rng.integers(-max_dy, max_dy + 1)),
                                    int(rng.integers(-max_dx, max_dx + 1)))
                out.append(ImageSample(id=f"{s.id}#{op}{c}", pixels=pixels,
                                       original_label=s.original_label, split="train"))
    return out


def hash_id(sample_id: str) -> int:
    """Stable 63-bit hash of a sample id (builtin hash is salted per process)."""
    acc = 1469598103934665603  # FNV-1a
    for byte in sample_id.encode("utf-8"):
        acc = ((acc ^ byte) * 1099511628211) & 0x7FFFFFFFFFFFFFFF
    return acc
