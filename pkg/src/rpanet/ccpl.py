"""Confidence-calibrated pseudo-labeling.

Soft pseudo-labels are built by fusing the previous-round and current
pre-softmax logits per pixel: both are divided by the joint magnitude
phi(a, b) = sqrt(sum_i a_i^2 + b_i^2) before their softmaxes are averaged,
which flattens overconfident predictions. Training minimizes soft-label
cross-entropy against the fused target.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError
from .data import LogitMap, ProbabilityMap, _check_map


@dataclass(frozen=True)
class CCPLConfig:
    alpha: float = 0.5
    # When True, the store keeps the fused distribution as next round's basis
    # instead of the raw epoch-end logits (comparison variant).
    store_fused: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")


@dataclass(frozen=True)
class SoftPseudoLabel:
    """H×W×C per-pixel training-target distributions."""

    values: np.ndarray

    def __post_init__(self):
        values = _check_map(self.values, 3, "SoftPseudoLabel")
        if values.min() < 0.0 or np.abs(values.sum(axis=2) - 1.0).max() > 1e-5:
            raise ValueError("SoftPseudoLabel: pixel distributions must sum to 1 within 1e-5")
        object.__setattr__(self, "values", values)


def phi_norm(a: np.ndarray, b: np.ndarray) -> float:
    """Joint magnitude sqrt(sum_i (a_i^2 + b_i^2)); 1.0 when both vectors are zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"phi_norm: shape mismatch {a.shape} vs {b.shape}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("phi_norm: inputs must be finite")
    value = float(np.sqrt((a * a).sum() + (b * b).sum()))
    return value if value > 0.0 else 1.0


def _phi_channels(current: torch.Tensor, previous: torch.Tensor) -> torch.Tensor:
    # per-pixel phi over the channel dim; zero -> 1 fallback
    phi = torch.sqrt((current * current + previous * previous).sum(dim=-3, keepdim=True))
    return torch.where(phi > 0, phi, torch.ones_like(phi))


@torch.no_grad()
def fuse_pseudo_labels_t(current: torch.Tensor, previous: torch.Tensor, alpha: float) -> torch.Tensor:
    """Fused soft targets, (..., C, H, W) in, (..., C, H, W) distribution out.

    Detached by construction: the result is a training target.
    """
    if current.shape != previous.shape:
        raise ValueError(f"fuse: shape mismatch {tuple(current.shape)} vs {tuple(previous.shape)}")
    phi = _phi_channels(current, previous)
    cur = torch.softmax(current / phi, dim=-3)
    prev = torch.softmax(previous / phi, dim=-3)
    return alpha * cur + (1.0 - alpha) * prev


def fuse_pseudo_label(current: LogitMap, previous: LogitMap, cfg: CCPLConfig) -> SoftPseudoLabel:
    """Array-typed wrapper around fuse_pseudo_labels_t."""
    if current.values.shape != previous.values.shape:
        raise ValueError(
            f"fuse_pseudo_label: shape mismatch {current.values.shape} vs {previous.values.shape}"
        )
    cur = torch.from_numpy(current.values.transpose(2, 0, 1).copy())
    prev = torch.from_numpy(previous.values.transpose(2, 0, 1).copy())
    fused = fuse_pseudo_labels_t(cur, prev, cfg.alpha)
    return SoftPseudoLabel(fused.numpy().transpose(1, 2, 0))


def soft_cross_entropy_t(pred_probs: torch.Tensor, target: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Mean over pixels of -sum_c target * log(pred), channels at dim -3."""
    if pred_probs.shape != target.shape:
        raise ValueError(f"soft CE: shape mismatch {tuple(pred_probs.shape)} vs {tuple(target.shape)}")
    per_pixel = -(target * pred_probs.clamp_min(eps).log()).sum(dim=-3)
    return per_pixel.mean()


def soft_ce_loss(pred_probs: ProbabilityMap, target: SoftPseudoLabel) -> float:
    pred = torch.from_numpy(pred_probs.values.transpose(2, 0, 1).copy())
    tgt = torch.from_numpy(target.values.transpose(2, 0, 1).copy())
    return float(soft_cross_entropy_t(pred, tgt))


class PseudoLabelStore:
    """Per-sample pre-softmax logits from the previous refinement round.

    Maps sample_id -> H×W×C float32 array; all maps share one shape. The round
    index starts at 1 (store seeded from the source model's predictions).
    """

    def __init__(self, maps: dict[str, np.ndarray], round_index: int = 1):
        if round_index < 1:
            raise ValueError("round_index must be >= 1")
        if not maps:
            raise ValueError("store must hold at least one sample")
        shapes = {m.shape for m in maps.values()}
        if len(shapes) != 1:
            raise ValueError(f"all stored maps must share one shape, got {shapes}")
        shape = next(iter(shapes))
        if len(shape) != 3:
            raise ValueError(f"stored maps must be H×W×C, got {shape}")
        self.round_index = round_index
        self.shape = shape
        self._maps = {k: np.asarray(v, dtype=np.float32) for k, v in maps.items()}

    @property
    def sample_ids(self) -> list[str]:
        return sorted(self._maps)

    def get(self, sample_id: str) -> np.ndarray:
        if sample_id not in self._maps:
            raise KeyError(f"no stored logits for sample '{sample_id}'")
        return self._maps[sample_id]

    def advanced(self, fresh_logits: dict[str, np.ndarray]) -> "PseudoLabelStore":
        """Next-round store; fresh_logits must cover every stored sample."""
        missing = set(self._maps) - set(fresh_logits)
        if missing:
            raise KeyError(f"missing fresh logits for sample(s): {sorted(missing)[:4]}")
        new_maps = {k: np.asarray(fresh_logits[k], dtype=np.float32) for k in self._maps}
        return PseudoLabelStore(new_maps, round_index=self.round_index + 1)

    def save(self, store_dir: Path) -> None:
        store_dir = Path(store_dir)
        store_dir.mkdir(parents=True, exist_ok=True)
        for sample_id, arr in self._maps.items():
            np.save(store_dir / f"{sample_id}.npy", arr)
        manifest = {
            "round": self.round_index,
            "samples": self.sample_ids,
            "shape": list(self.shape),
        }
        (store_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    @classmethod
    def load(cls, store_dir: Path) -> "PseudoLabelStore":
        store_dir = Path(store_dir)
        manifest_path = store_dir / "manifest.json"
        if not manifest_path.is_file():
            raise FileNotFoundError(f"no store manifest at {manifest_path}")
        manifest = json.loads(manifest_path.read_text())
        maps = {sid: np.load(store_dir / f"{sid}.npy") for sid in manifest["samples"]}
        return cls(maps, round_index=manifest["round"])


def advance_round(store: PseudoLabelStore, fresh_logits: dict[str, np.ndarray]) -> PseudoLabelStore:
    return store.advanced(fresh_logits)
