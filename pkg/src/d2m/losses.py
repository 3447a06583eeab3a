"""Embedding matching, prediction matching and the combined distillation objective.

The real branch is always treated as a constant target: real features,
attention vectors and logits are detached before entering any loss.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .core import FeatureStack


def channel_attention(feature: torch.Tensor, p: float = 4.0) -> torch.Tensor:
    """Per-channel spatial power mean of ``|feature|``, L2-normalised per item.

    ``feature`` is ``[B, C, H, W]``; the result is ``[B, C]`` with
    non-negative entries and unit norm (all zeros for an all-zero map).
    """
    if p <= 0:
        raise ValueError(f"attention exponent must be positive, got {p}")
    raw = feature.abs().pow(p).mean(dim=(2, 3))
    norm = raw.norm(dim=1, keepdim=True)
    # a zero row stays zero instead of dividing by zero
    return raw / torch.where(norm > 0, norm, torch.ones_like(norm))


def _matched(feature: torch.Tensor, is_last: bool, p: float) -> torch.Tensor:
    if is_last:
        return feature.flatten(1)
    return channel_attention(feature, p)


def embedding_matching_loss(real: FeatureStack, syn: FeatureStack, p: float = 4.0,
                            labels: torch.Tensor | None = None) -> torch.Tensor:
    """Sum over layers of the squared distance between batch means.

    Layers ``1..L-1`` are compared through their channel attention vectors,
    the final layer through its flattened feature map.  With ``labels``
    (shared by both batches, position by position) the means are taken per
    class and the per-class distances are summed.
    """
    if len(real.features) != len(syn.features):
        raise ValueError(f"layer count mismatch: {len(real.features)} vs {len(syn.features)}")
    if labels is not None:
        labels = torch.as_tensor(labels)
        if labels.shape[0] != real.features[0].shape[0] or labels.shape[0] != syn.features[0].shape[0]:
            raise ValueError("labels must have one entry per item of both batches")
        parts = [embedding_matching_loss(_select(real, m), _select(syn, m), p)
                 for m in (labels == c for c in torch.unique(labels))]
        return torch.stack(parts).sum()
    total = None
    last = len(real.features) - 1
    for l, (fr, fs) in enumerate(zip(real.features, syn.features)):
        if fr.shape[1:] != fs.shape[1:]:
            raise ValueError(f"layer {l}: feature shape {tuple(fr.shape[1:])} vs {tuple(fs.shape[1:])}")
        diff = _matched(fr.detach(), l == last, p).mean(0) - _matched(fs, l == last, p).mean(0)
        term = diff.pow(2).sum()
        total = term if total is None else total + term
    return total


def _select(stack: FeatureStack, mask: torch.Tensor) -> FeatureStack:
    return FeatureStack([f[mask] for f in stack.features], stack.logits[mask])


def prediction_matching_loss(logits_real: torch.Tensor, logits_syn: torch.Tensor, temperature: float = 4.0,
                             t_squared: bool = False) -> torch.Tensor:
    """Summed KL(softmax(real / T) || softmax(syn / T)) over positionally paired rows."""
    if logits_real.shape != logits_syn.shape:
        raise ValueError(f"logit shapes differ: {tuple(logits_real.shape)} vs {tuple(logits_syn.shape)}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    # log_softmax subtracts the row max internally; float64 keeps the
    # near-zero divergences of large T from drowning in float32 rounding
    log_p = F.log_softmax(logits_real.detach().double() / temperature, dim=1)
    log_q = F.log_softmax(logits_syn.double() / temperature, dim=1)
    loss = (log_p.exp() * (log_p - log_q)).sum().to(logits_syn.dtype)
    if t_squared:
        loss = loss * temperature ** 2
    return loss


def total_loss(l_em, l_pm, lam: float):
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return l_em + lam * l_pm
