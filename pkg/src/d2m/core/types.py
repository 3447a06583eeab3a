from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class ImageBatch:
    """Labelled images ``pixels[B, C, H, W]`` with integer ``labels[B]``.

    Pixels live in [-1, 1] on ingestion; augmented batches may leave that
    range but must stay finite.
    """

    pixels: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        if self.pixels.ndim != 4:
            raise ValueError(f"pixels must be [B, C, H, W], got shape {tuple(self.pixels.shape)}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.pixels.shape[0]:
            raise ValueError("labels must be a vector matching the batch size")
        if self.pixels.shape[0] < 1:
            raise ValueError("batch must contain at least one item")
        if not torch.isfinite(self.pixels.detach()).all():
            raise ValueError("pixels contain non-finite values")
        if self.labels.dtype != torch.long:
            object.__setattr__(self, "labels", self.labels.long())

    def __len__(self) -> int:
        return int(self.pixels.shape[0])

    def check_labels(self, class_count: int) -> None:
        if self.labels.min() < 0 or self.labels.max() >= class_count:
            raise ValueError(f"labels outside [0, {class_count - 1}]")


@dataclass(frozen=True)
class LatentBatch:
    codes: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self):
        if self.codes.ndim != 2 or self.codes.shape[0] != self.labels.shape[0]:
            raise ValueError("codes must be [B, d] with one label per row")
        if not torch.isfinite(self.codes).all():
            raise ValueError("latent codes contain non-finite values")

    @classmethod
    def sample(cls, labels, latent_dim: int, generator: torch.Generator,
               dtype=torch.float32) -> "LatentBatch":
        labels = torch.as_tensor(labels, dtype=torch.long)
        codes = torch.randn(len(labels), latent_dim, generator=generator, dtype=dtype)
        return cls(codes, labels)


@dataclass
class FeatureStack:
    """Per-block feature maps plus pre-softmax logits from one forward pass."""

    features: list[torch.Tensor]
    logits: torch.Tensor

    def __post_init__(self):
        if len(self.features) < 1:
            raise ValueError("a feature stack needs at least one layer")
        b = self.logits.shape[0]
        if any(f.shape[0] != b for f in self.features):
            raise ValueError("feature batch sizes differ from logits")
