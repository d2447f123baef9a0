"""Shared data model (samples, per-pixel maps) and dataset directory I/O.

Dataset layout on disk:

    <root>/<split>/images/<id>.png   8-bit RGB
    <root>/<split>/masks/<id>.png    8-bit grayscale, 0 = background, 255 = foreground

Splits: source_train, source_val, target_train, target_test. The masks
directory is optional (target splits are unlabeled during adaptation).
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

SPLITS = ("source_train", "source_val", "target_train", "target_test")
_IMAGE_EXTS = (".png", ".jpg")


class DatasetError(Exception):
    """Missing directory, malformed file, or violated sample invariant."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ImageSample:
    """One image with an optional binary ground-truth mask.

    image is H×W×3 float32 in [0, 1]; mask (when present) is H×W uint8 in {0, 1}
    with 1 = foreground.
    """

    sample_id: str
    image: np.ndarray
    mask: np.ndarray | None
    domain_tag: str

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float32)
        if img.ndim != 3 or img.shape[2] != 3:
            raise DatasetError(f"sample '{self.sample_id}': image must be H×W×3, got {img.shape}")
        if not np.isfinite(img).all() or img.min() < 0.0 or img.max() > 1.0:
            raise DatasetError(f"sample '{self.sample_id}': image values must be finite and in [0, 1]")
        object.__setattr__(self, "image", _freeze(img))
        if self.mask is not None:
            mask = np.asarray(self.mask)
            if mask.shape != img.shape[:2]:
                raise DatasetError(
                    f"sample '{self.sample_id}': image/mask shape mismatch {img.shape[:2]} vs {mask.shape}"
                )
            if not np.isin(mask, (0, 1)).all():
                raise DatasetError(f"sample '{self.sample_id}': mask values must be in {{0, 1}}")
            object.__setattr__(self, "mask", _freeze(mask.astype(np.uint8)))
        if self.domain_tag not in ("source", "target"):
            raise DatasetError(f"sample '{self.sample_id}': bad domain_tag '{self.domain_tag}'")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def without_mask(self) -> "ImageSample":
        return replace(self, mask=None)


def _check_map(values: np.ndarray, ndim: int, name: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != ndim:
        raise DatasetError(f"{name}: expected {ndim}-dim array, got shape {values.shape}")
    if not np.isfinite(values).all():
        raise DatasetError(f"{name}: values must be finite")
    return _freeze(values)


@dataclass(frozen=True)
class LogitMap:
    """H×W×C pre-softmax scores."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _check_map(self.values, 3, "LogitMap"))

    @property
    def num_classes(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class ProbabilityMap:
    """H×W×C per-pixel class distributions (each pixel sums to 1)."""

    values: np.ndarray

    def __post_init__(self):
        values = _check_map(self.values, 3, "ProbabilityMap")
        if values.min() < 0.0:
            raise DatasetError("ProbabilityMap: negative probability")
        sums = values.sum(axis=2)
        if np.abs(sums - 1.0).max() > 1e-5:
            raise DatasetError("ProbabilityMap: pixel distributions must sum to 1 within 1e-5")
        object.__setattr__(self, "values", values)

    @property
    def num_classes(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class FeatureMap:
    """H×W×K per-pixel feature vectors."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _check_map(self.values, 3, "FeatureMap"))

    @property
    def num_channels(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class EntropyMap:
    """H×W normalized per-pixel entropy, values in [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        values = _check_map(self.values, 2, "EntropyMap")
        if values.min() < -1e-9 or values.max() > 1.0 + 1e-9:
            raise DatasetError("EntropyMap: values must lie in [0, 1]")
        object.__setattr__(self, "values", _freeze(np.clip(values, 0.0, 1.0)))


def softmax_array(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along one axis."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(logits).all():
        raise DatasetError("softmax: logits must be finite")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=axis, keepdims=True)


def softmax_map(logits: LogitMap) -> ProbabilityMap:
    """Per-pixel softmax over the class channels."""
    return ProbabilityMap(softmax_array(logits.values, axis=2))


def load_image_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float32) / 255.0


def load_mask(path: Path, sample_id: str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    bad = ~np.isin(arr, (0, 255))
    if bad.any():
        raise DatasetError(f"sample '{sample_id}': mask pixels must be 0 or 255, found {np.unique(arr[bad])[:4]}")
    return (arr == 255).astype(np.uint8)


def save_image_u8(path: Path, arr: np.ndarray) -> None:
    """Write an 8-bit PNG; float inputs in [0, 1] are scaled and rounded."""
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(Path(path))


def load_dataset(root: Path, split: str) -> list[ImageSample]:
    """Load one split, sorted by sample_id; masks attached when present."""
    root = Path(root)
    split_dir = root / split
    images_dir = split_dir / "images"
    if not images_dir.is_dir():
        raise DatasetError(f"missing images directory: {images_dir}")
    masks_dir = split_dir / "masks"
    domain = "source" if split.startswith("source") else "target"

    paths = sorted(
        (p for p in images_dir.iterdir() if p.suffix.lower() in _IMAGE_EXTS),
        key=lambda p: p.stem,
    )
    if not paths:
        raise DatasetError(f"no images found in {images_dir}")
    seen: set[str] = set()
    samples = []
    for path in paths:
        sample_id = path.stem
        if sample_id in seen:
            raise DatasetError(f"duplicated sample_id '{sample_id}' in {images_dir}")
        seen.add(sample_id)
        image = load_image_rgb(path)
        mask = None
        if masks_dir.is_dir():
            mask_path = masks_dir / f"{sample_id}.png"
            if mask_path.is_file():
                mask = load_mask(mask_path, sample_id)
        samples.append(ImageSample(sample_id=sample_id, image=image, mask=mask, domain_tag=domain))
    return samples
