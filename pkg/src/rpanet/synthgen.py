"""Synthetic blob-segmentation datasets with a controllable source/target shift.

Each image is 1-3 randomly deformed elliptical blobs on a textured background.
The target style compresses the foreground/background contrast, adds noise and
a gamma change, which is enough to open a double-digit Dice gap for a model
trained on the source style.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .config import ConfigError, config_hash, dataclass_to_dict, dump_json
from .data import SPLITS, save_image_u8

# Radial deformation: modes k=2..4 with amplitude <= 0.25/k keep blob area
# within a few percent of the base ellipse, so disc-area bounds stay valid.
_DEFORM_MODES = (2, 3, 4)
_DEFORM_AMP = 0.25
_MAX_FG_FRACTION = 0.45


@dataclass(frozen=True)
class StyleConfig:
    """Rendering style of one domain."""

    bg_mean: float
    fg_mean: float
    noise_sigma: float
    texture_freq: int = 4
    texture_amp: float = 0.05
    gamma: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.bg_mean <= 1.0 and 0.0 <= self.fg_mean <= 1.0):
            raise ConfigError("style intensity means must lie in [0, 1]")
        if abs(self.fg_mean - self.bg_mean) < 0.1:
            raise ConfigError("fg/bg intensity means must differ by >= 0.1")
        if self.noise_sigma < 0 or self.texture_amp < 0:
            raise ConfigError("noise_sigma and texture_amp must be >= 0")
        if self.texture_freq < 1:
            raise ConfigError("texture_freq must be >= 1")
        if self.gamma <= 0:
            raise ConfigError("gamma must be > 0")


def default_source_style() -> StyleConfig:
    return StyleConfig(bg_mean=0.30, fg_mean=0.70, noise_sigma=0.03, texture_freq=4, texture_amp=0.05, gamma=1.0)


def default_target_style() -> StyleConfig:
    return StyleConfig(bg_mean=0.44, fg_mean=0.56, noise_sigma=0.08, texture_freq=4, texture_amp=0.06, gamma=1.35)


@dataclass(frozen=True)
class SynthConfig:
    n_train: int = 200
    n_eval: int = 100
    image_size: int = 64
    blobs_per_image: tuple[int, int] = (1, 3)
    blob_radius: tuple[float, float] = (5.0, 12.0)
    source_style: StyleConfig = field(default_factory=default_source_style)
    target_style: StyleConfig = field(default_factory=default_target_style)
    seed: int = 0

    def __post_init__(self):
        if self.n_train < 1 or self.n_eval < 1:
            raise ConfigError("n_train and n_eval must be >= 1")
        if self.image_size < 16:
            raise ConfigError("image_size must be >= 16")
        lo, hi = self.blobs_per_image
        if not (1 <= lo <= hi):
            raise ConfigError(f"bad blobs_per_image range {self.blobs_per_image}")
        rlo, rhi = self.blob_radius
        if not (2.0 <= rlo <= rhi):
            raise ConfigError(f"bad blob_radius range {self.blob_radius}")
        # blobs must fit fully inside the image, deformation margin included
        if _blob_margin(rhi) * 2 >= self.image_size:
            raise ConfigError(
                f"blob radius {rhi} too large for image size {self.image_size}"
            )


def _blob_margin(radius: float) -> float:
    return radius * (1.0 + _DEFORM_AMP) + 1.0


def _image_rng(seed: int, split_index: int, image_index: int) -> np.random.Generator:
    # One independent stream per image: parallel generation stays deterministic.
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, split_index, image_index))))


def _render_mask(rng: np.random.Generator, size: int, cfg: SynthConfig) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _attempt in range(32):
        mask = np.zeros((size, size), dtype=bool)
        n_blobs = int(rng.integers(cfg.blobs_per_image[0], cfg.blobs_per_image[1] + 1))
        for _ in range(n_blobs):
            r0 = float(rng.uniform(*cfg.blob_radius))
            margin = _blob_margin(r0)
            cy = float(rng.uniform(margin, size - margin))
            cx = float(rng.uniform(margin, size - margin))
            stretch = float(rng.uniform(0.8, 1.25))  # mild ellipse anisotropy
            amps = [float(rng.uniform(0.0, _DEFORM_AMP / k)) for k in _DEFORM_MODES]
            phases = [float(rng.uniform(0.0, 2.0 * math.pi)) for _ in _DEFORM_MODES]
            dy = (yy - cy) * stretch
            dx = (xx - cx) / stretch
            theta = np.arctan2(dy, dx)
            rho = np.hypot(dy, dx)
            r_theta = r0 * (1.0 + sum(a * np.cos(k * theta + p) for k, a, p in zip(_DEFORM_MODES, amps, phases)))
            mask |= rho <= r_theta
        frac = mask.mean()
        if 0.0 < frac <= _MAX_FG_FRACTION:
            return mask
    raise ConfigError("could not sample a mask with <= 45% foreground; shrink blob_radius or blobs_per_image")


def _texture_field(rng: np.random.Generator, size: int, style: StyleConfig) -> np.ndarray:
    coarse = rng.normal(0.0, 1.0, size=(style.texture_freq + 1, style.texture_freq + 1))
    im = Image.fromarray(coarse.astype(np.float32), mode="F").resize((size, size), Image.BILINEAR)
    return np.asarray(im, dtype=np.float64) * style.texture_amp


def synth_sample(rng: np.random.Generator, cfg: SynthConfig, style: StyleConfig) -> tuple[np.ndarray, np.ndarray]:
    """Render one (image, mask) pair. Mask is exact; only intensities are soft."""
    size = cfg.image_size
    mask = _render_mask(rng, size, cfg)
    texture = _texture_field(rng, size, style)
    bg_shift = float(rng.uniform(-0.02, 0.02))
    fg_shift = float(rng.uniform(-0.02, 0.02))
    tint = rng.uniform(-0.02, 0.02, size=3)

    soft = gaussian_filter(mask.astype(np.float64), sigma=0.7)
    delta = (style.fg_mean + fg_shift) - (style.bg_mean + bg_shift)
    gray = style.bg_mean + bg_shift + texture + delta * soft
    img = gray[:, :, None] + tint[None, None, :]
    img = np.clip(img, 0.0, 1.0) ** style.gamma
    img = img + rng.normal(0.0, style.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask.astype(np.uint8)


def _split_plan(cfg: SynthConfig) -> list[tuple[str, int, StyleConfig]]:
    return [
        ("source_train", cfg.n_train, cfg.source_style),
        ("source_val", cfg.n_eval, cfg.source_style),
        ("target_train", cfg.n_train, cfg.target_style),
        ("target_test", cfg.n_eval, cfg.target_style),
    ]


def generate_dataset(cfg: SynthConfig, out_root: Path) -> dict:
    """Write all four splits under out_root; returns a per-split summary.

    Identical (cfg, seed) produce byte-identical files.
    """
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    summary: dict = {"out_root": str(out_root), "config_hash": config_hash(cfg), "splits": {}}
    for split_index, (split, count, style) in enumerate(_split_plan(cfg)):
        images_dir = out_root / split / "images"
        masks_dir = out_root / split / "masks"
        images_dir.mkdir(parents=True, exist_ok=True)
        masks_dir.mkdir(parents=True, exist_ok=True)
        fg_fracs = []
        for i in range(count):
            rng = _image_rng(cfg.seed, split_index, i)
            img, mask = synth_sample(rng, cfg, style)
            sample_id = f"{split}_{i:04d}"
            save_image_u8(images_dir / f"{sample_id}.png", img)
            save_image_u8(masks_dir / f"{sample_id}.png", mask * 255)
            fg_fracs.append(float(mask.mean()))
        summary["splits"][split] = {"n_images": count, "mean_fg_fraction": float(np.mean(fg_fracs))}
    dump_json(out_root / "synth_config.json", {"config": dataclass_to_dict(cfg), "hash": summary["config_hash"]})
    assert set(summary["splits"]) == set(SPLITS)
    return summary
