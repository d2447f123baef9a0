"""Compact encoder-decoder segmentation network with a penultimate feature tap.

The forward pass returns both the per-pixel class logits and the penultimate
decoder activations (the per-pixel embedding used for region centroids), both
at full input resolution. GroupNorm keeps the network deterministic and
batch-size independent, which matters for small batches and for the
finite-difference gradient checks.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import FeatureMap, LogitMap

DEFAULT_ARCH = {
    "widths": [16, 32, 64, 128],
    "feature_channels": 64,
    "num_classes": 2,
    "in_channels": 3,
    "norm_groups": 8,
}


class CheckpointMismatchError(Exception):
    """Checkpoint architecture descriptor does not match the model."""


class NonFiniteActivationError(Exception):
    """A layer produced NaN/Inf activations."""


def _conv_block(cin: int, cout: int, groups: int) -> nn.Sequential:
    g = min(groups, cout)
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.GroupNorm(g, cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.GroupNorm(g, cout),
        nn.ReLU(inplace=True),
    )


class SegNet(nn.Module):
    """4-stage encoder, symmetric decoder, ~0.5M parameters at default widths."""

    def __init__(
        self,
        widths: tuple[int, ...] = (16, 32, 64, 128),
        feature_channels: int = 64,
        num_classes: int = 2,
        in_channels: int = 3,
        norm_groups: int = 8,
    ):
        super().__init__()
        if len(widths) != 4:
            raise ValueError(f"expected 4 encoder widths, got {widths}")
        w1, w2, w3, w4 = widths
        self.widths = tuple(int(w) for w in widths)
        self.feature_channels = int(feature_channels)
        self.num_classes = int(num_classes)
        self.in_channels = int(in_channels)
        self.norm_groups = int(norm_groups)

        self.enc1 = _conv_block(in_channels, w1, norm_groups)
        self.enc2 = _conv_block(w1, w2, norm_groups)
        self.enc3 = _conv_block(w2, w3, norm_groups)
        self.enc4 = _conv_block(w3, w4, norm_groups)
        self.dec3 = _conv_block(w4 + w3, w3, norm_groups)
        self.dec2 = _conv_block(w3 + w2, w2, norm_groups)
        self.dec1 = _conv_block(w2 + w1, feature_channels, norm_groups)
        self.classifier = nn.Conv2d(feature_channels, num_classes, 1)
        self.pool = nn.MaxPool2d(2)

    @property
    def stride(self) -> int:
        return 8

    def arch_descriptor(self) -> dict:
        return {
            "widths": list(self.widths),
            "feature_channels": self.feature_channels,
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "norm_groups": self.norm_groups,
        }

    @staticmethod
    def _up(x: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        return F.interpolate(x, size=like.shape[-2:], mode="bilinear", align_corners=False)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (logits B×C×H×W, features B×K×H×W)."""
        if x.shape[-1] % self.stride or x.shape[-2] % self.stride:
            raise ValueError(f"input H, W must be divisible by {self.stride}, got {tuple(x.shape[-2:])}")
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        e3 = self.enc3(self.pool(e2))
        e4 = self.enc4(self.pool(e3))
        d3 = self.dec3(torch.cat([self._up(e4, e3), e3], dim=1))
        d2 = self.dec2(torch.cat([self._up(d3, e2), e2], dim=1))
        feats = self.dec1(torch.cat([self._up(d2, e1), e1], dim=1))
        logits = self.classifier(feats)
        return logits, feats


def build_model(arch: dict | None = None) -> SegNet:
    arch = dict(DEFAULT_ARCH if arch is None else arch)
    return SegNet(
        widths=tuple(arch["widths"]),
        feature_channels=arch["feature_channels"],
        num_classes=arch["num_classes"],
        in_channels=arch["in_channels"],
        norm_groups=arch["norm_groups"],
    )


@dataclass
class Checkpoint:
    """Weights blob + architecture descriptor + training provenance."""

    state_dict: dict
    arch: dict
    provenance: dict

    def build_model(self) -> SegNet:
        model = build_model(self.arch)
        model.load_state_dict(self.state_dict)
        return model


def save_checkpoint(path: Path, model: SegNet, *, stage: str, epochs: int, config_hash: str, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    provenance = {"stage": stage, "epochs": int(epochs), "config_hash": config_hash}
    if extra:
        provenance.update(extra)
    torch.save(
        {"state_dict": model.state_dict(), "arch": model.arch_descriptor(), "provenance": provenance},
        path,
    )
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    return Checkpoint(state_dict=blob["state_dict"], arch=blob["arch"], provenance=blob["provenance"])


def load_weights(model: SegNet, ckpt: Checkpoint) -> SegNet:
    """Load checkpoint weights into an existing model; descriptors must match."""
    if model.arch_descriptor() != ckpt.arch:
        raise CheckpointMismatchError(
            f"architecture mismatch: model {model.arch_descriptor()} vs checkpoint {ckpt.arch}"
        )
    model.load_state_dict(ckpt.state_dict)
    return model


def init_target_from_source(source_ckpt: Checkpoint | Path, model: SegNet | None = None) -> SegNet:
    """Target model initialized with the source-trained weights."""
    ckpt = source_ckpt if isinstance(source_ckpt, Checkpoint) else load_checkpoint(source_ckpt)
    if model is None:
        return ckpt.build_model()
    return load_weights(model, ckpt)


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """H×W×3 float [0,1] -> 3×H×W float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1), dtype=np.float32))


@torch.no_grad()
def predict(model: SegNet, image: np.ndarray) -> tuple[LogitMap, FeatureMap]:
    """Single-image inference in evaluation mode.

    Raises NonFiniteActivationError naming the first offending layer if any
    activation goes NaN/Inf.
    """
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    bad_layers: list[str] = []
    hooks = []

    def _make_hook(name):
        def hook(_mod, _inp, out):
            tensors = out if isinstance(out, tuple) else (out,)
            if any(isinstance(t, torch.Tensor) and not torch.isfinite(t).all() for t in tensors):
                bad_layers.append(name)

        return hook

    for name, mod in model.named_modules():
        if name and len(list(mod.children())) == 0:
            hooks.append(mod.register_forward_hook(_make_hook(name)))
    was_training = model.training
    model.eval()
    try:
        logits, feats = model(image_to_tensor(image).unsqueeze(0))
    finally:
        for h in hooks:
            h.remove()
        if was_training:
            model.train()
    if bad_layers:
        raise NonFiniteActivationError(f"non-finite activations in layer '{bad_layers[0]}'")
    logits_np = logits[0].permute(1, 2, 0).numpy().astype(np.float64)
    feats_np = feats[0].permute(1, 2, 0).numpy().astype(np.float64)
    return LogitMap(logits_np), FeatureMap(feats_np)


@torch.no_grad()
def batched_logits(model: SegNet, images: torch.Tensor, batch_size: int = 8) -> torch.Tensor:
    """Eval-mode logits for a N×3×H×W stack, computed in chunks."""
    was_training = model.training
    model.eval()
    try:
        outs = [model(images[i : i + batch_size])[0] for i in range(0, len(images), batch_size)]
    finally:
        if was_training:
            model.train()
    return torch.cat(outs, dim=0)
