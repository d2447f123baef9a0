"""Training-time augmentation: horizontal flip, scale jitter, brightness jitter.

Geometric parts are sampled once per image and applied identically to the
image and to any aligned map (ground-truth mask, stored pseudo-label logits),
so pixel correspondence survives augmentation. Brightness touches the image
only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class AugmentParams:
    hflip: bool
    scale: float
    brightness: float
    offset_y: int
    offset_x: int


def sample_params(
    rng: np.random.Generator,
    height: int,
    width: int,
    *,
    hflip: bool = True,
    scale_jitter: float = 0.1,
    brightness_jitter: float = 0.05,
) -> AugmentParams:
    flip = bool(rng.integers(0, 2)) if hflip else False
    scale = float(rng.uniform(1.0 - scale_jitter, 1.0 + scale_jitter)) if scale_jitter > 0 else 1.0
    brightness = (
        float(rng.uniform(1.0 - brightness_jitter, 1.0 + brightness_jitter)) if brightness_jitter > 0 else 1.0
    )
    new_h = max(8, int(round(height * scale)))
    new_w = max(8, int(round(width * scale)))
    # crop offset when scaled up, pad offset when scaled down
    off_y = int(rng.integers(0, abs(new_h - height) + 1))
    off_x = int(rng.integers(0, abs(new_w - width) + 1))
    return AugmentParams(hflip=flip, scale=scale, brightness=brightness, offset_y=off_y, offset_x=off_x)


def _rescale_to(x: torch.Tensor, height: int, width: int, params: AugmentParams, mode: str) -> torch.Tensor:
    new_h = max(8, int(round(height * params.scale)))
    new_w = max(8, int(round(width * params.scale)))
    if (new_h, new_w) == (height, width):
        return x
    kwargs = {} if mode == "nearest" else {"align_corners": False}
    x = F.interpolate(x.unsqueeze(0), size=(new_h, new_w), mode=mode, **kwargs).squeeze(0)
    if new_h >= height:
        return x[:, params.offset_y : params.offset_y + height, params.offset_x : params.offset_x + width]
    pad_t = params.offset_y
    pad_l = params.offset_x
    pad_b = height - new_h - pad_t
    pad_r = width - new_w - pad_l
    return F.pad(x.unsqueeze(0), (pad_l, pad_r, pad_t, pad_b), mode="reflect").squeeze(0)


def apply_to_map(x: torch.Tensor, params: AugmentParams, *, mode: str = "bilinear") -> torch.Tensor:
    """Geometric transform of a C×H×W map (no photometric change)."""
    _, h, w = x.shape
    x = _rescale_to(x, h, w, params, mode)
    if params.hflip:
        x = torch.flip(x, dims=(-1,))
    return x


def apply_to_image(image: torch.Tensor, params: AugmentParams) -> torch.Tensor:
    """Geometric + brightness transform of a 3×H×W image in [0, 1]."""
    out = apply_to_map(image, params, mode="bilinear")
    if params.brightness != 1.0:
        out = (out * params.brightness).clamp(0.0, 1.0)
    return out


def apply_to_mask(mask: torch.Tensor, params: AugmentParams) -> torch.Tensor:
    """Geometric transform of an H×W integer mask."""
    out = apply_to_map(mask.unsqueeze(0).float(), params, mode="nearest").squeeze(0)
    return out.round().long()
