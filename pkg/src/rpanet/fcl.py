"""Foreground-aware contrastive learning over per-image region centroids.

Each image contributes up to one centroid per class: the feature vectors of
all pixels predicted as that class, re-weighted by prediction confidence
(1 - normalized entropy) and divided by the region pixel count. Centroids are
contrasted across images through a per-class FIFO bank: entries of the same
class are positives, entries of the other class negatives.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np
import torch

from .config import ConfigError
from .data import EntropyMap, FeatureMap, ProbabilityMap


@dataclass(frozen=True)
class FCLConfig:
    temperature: float = 0.1
    bank_capacity: int = 256
    min_region_pixels: int = 16
    # When True, regions and confidence weights come from the frozen source
    # model instead of the model being adapted (features always stay live).
    region_stats_from_source: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.bank_capacity < 1:
            raise ConfigError("bank_capacity must be >= 1")
        if self.min_region_pixels < 1:
            raise ConfigError("min_region_pixels must be >= 1")


@dataclass(frozen=True)
class Centroid:
    """Confidence-weighted feature centroid of one predicted region."""

    vector: torch.Tensor
    class_id: int
    source_sample_id: str
    weight_mass: float

    def __post_init__(self):
        if not torch.isfinite(self.vector).all():
            raise ValueError("centroid vector must be finite")
        if self.class_id not in (0, 1):
            raise ValueError(f"bad class_id {self.class_id}")
        if self.weight_mass < 0:
            raise ValueError("weight_mass must be >= 0")


class CentroidBank:
    """Per-class FIFO store of detached, L2-normalized centroids."""

    def __init__(self, capacity: int = 256, num_classes: int = 2):
        if capacity < 1:
            raise ConfigError("bank capacity must be >= 1")
        self.capacity = capacity
        self._queues: dict[int, deque[Centroid]] = {k: deque(maxlen=capacity) for k in range(num_classes)}

    def push(self, centroid: Centroid) -> None:
        vec = l2_normalize(centroid.vector.detach().clone())
        self._queues[centroid.class_id].append(
            Centroid(vec, centroid.class_id, centroid.source_sample_id, centroid.weight_mass)
        )

    def entries(self, class_id: int) -> list[Centroid]:
        return list(self._queues[class_id])

    def vectors(self, class_id: int) -> torch.Tensor | None:
        q = self._queues[class_id]
        if not q:
            return None
        return torch.stack([c.vector for c in q])

    def size(self, class_id: int) -> int:
        return len(self._queues[class_id])

    def __len__(self) -> int:
        return sum(len(q) for q in self._queues.values())


def l2_normalize(v: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return v / v.norm().clamp_min(eps)


def entropy_channels(probs: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Per-pixel Shannon entropy over the channel dim, normalized to [0, 1].

    probs is (..., C, H, W); uses p*log(p) with 0*log(0) = 0.
    """
    num_classes = probs.shape[-3]
    p = probs.clamp_min(eps)
    ent = -(probs * p.log()).sum(dim=-3) / math.log(num_classes)
    return ent.clamp(0.0, 1.0)


def entropy_map(probs: ProbabilityMap) -> EntropyMap:
    probs_t = torch.from_numpy(probs.values.transpose(2, 0, 1).copy())
    return EntropyMap(entropy_channels(probs_t).numpy())


def compute_centroids(
    features: torch.Tensor,
    probs: torch.Tensor,
    entropy: torch.Tensor,
    cfg: FCLConfig,
    sample_id: str,
) -> list[Centroid]:
    """Per-class centroids for one image (features K×H×W, probs C×H×W, entropy H×W).

    Centroid of class k = sum over its predicted region of feature * (1 - entropy),
    divided by the region pixel count. Regions smaller than min_region_pixels
    yield no centroid.
    """
    pred = probs.argmax(dim=0)
    confidence = 1.0 - entropy
    out: list[Centroid] = []
    for k in range(probs.shape[0]):
        region = pred == k
        count = int(region.sum())
        if count < cfg.min_region_pixels:
            continue
        weights = confidence * region
        vector = (features * weights.unsqueeze(0)).sum(dim=(1, 2)) / count
        out.append(Centroid(vector, k, sample_id, float(weights.sum())))
    return out


def region_centroids(
    features: FeatureMap,
    probs: ProbabilityMap,
    entropy: EntropyMap,
    cfg: FCLConfig,
    sample_id: str,
) -> list[Centroid]:
    """Array-typed wrapper around compute_centroids."""
    f = torch.from_numpy(features.values.transpose(2, 0, 1).copy())
    p = torch.from_numpy(probs.values.transpose(2, 0, 1).copy())
    e = torch.from_numpy(entropy.values.copy())
    return compute_centroids(f, p, e, cfg, sample_id)


def fcl_loss(
    batch_centroids: list[Centroid],
    bank: CentroidBank,
    cfg: FCLConfig,
) -> tuple[torch.Tensor, CentroidBank]:
    """Region contrastive loss of a batch of centroids against the bank.

    For an anchor of class k, positives are the bank entries of class k and
    negatives the entries of class 1-k; similarities are cosine (all vectors
    L2-normalized) divided by the temperature. Anchors with no positives
    contribute 0 and are excluded from the mean. Afterwards the batch
    centroids are pushed into the bank, gradient-detached.
    """
    tau = cfg.temperature
    per_anchor: list[torch.Tensor] = []
    for anchor in batch_centroids:
        pos = bank.vectors(anchor.class_id)
        if pos is None:
            continue
        v = l2_normalize(anchor.vector)
        s_pos = pos @ v / tau
        neg = bank.vectors(1 - anchor.class_id)
        if neg is None:
            lse_neg = torch.tensor(float("-inf"), dtype=v.dtype)
        else:
            lse_neg = torch.logsumexp(neg @ v / tau, dim=0)
        # -log(exp(s+) / (exp(s+) + sum exp(s-))) = softplus(lse_neg - s+)
        per_anchor.append(torch.nn.functional.softplus(lse_neg - s_pos).mean())
    if per_anchor:
        loss = torch.stack(per_anchor).mean()
    else:
        loss = torch.tensor(0.0)
    for anchor in batch_centroids:
        bank.push(anchor)
    return loss, bank


def entropy_to_u8(entropy: np.ndarray) -> np.ndarray:
    """Entropy map [0,1] -> 8-bit grayscale (brighter = more uncertain)."""
    return np.clip(np.rint(entropy * 255.0), 0, 255).astype(np.uint8)
