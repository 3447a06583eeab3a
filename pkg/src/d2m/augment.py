"""Differentiable Siamese augmentation.

All transform parameters are drawn from a ``torch.Generator`` seeded with
``shared_seed``, so two batches of the same size augmented with the same
seed receive identical per-item transforms. Every op is differentiable with
respect to the input pixels; crop and cutout offsets are constants.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .core import AugmentPolicy, ImageBatch


def _uniform(n: int, g: torch.Generator) -> torch.Tensor:
    # float64 draws keep parameters identical across float32 / float64 inputs
    return torch.rand(n, generator=g, dtype=torch.float64)


def color(x, brightness, saturation, contrast):
    """Per-item brightness shift, saturation scale and contrast scale (each ``[B]``)."""
    x = x + brightness.to(x)[:, None, None, None]
    mean = x.mean(dim=1, keepdim=True)
    x = (x - mean) * saturation.to(x)[:, None, None, None] + mean
    mean = x.mean(dim=(1, 2, 3), keepdim=True)
    return (x - mean) * contrast.to(x)[:, None, None, None] + mean


def translate(x, shift_y, shift_x, pad: int):
    """Integer shift with zero fill; ``shift_*`` are ``[B]`` long tensors in [-pad, pad]."""
    b, _, h, w = x.shape
    xp = F.pad(x, (pad, pad, pad, pad))
    iy = torch.arange(h)[None, :] + pad + shift_y[:, None]
    ix = torch.arange(w)[None, :] + pad + shift_x[:, None]
    out = xp[torch.arange(b)[:, None, None], :, iy[:, :, None], ix[:, None, :]]
    return out.permute(0, 3, 1, 2)


def cutout(x, center_y, center_x, size: int):
    _, _, h, w = x.shape
    ys = torch.arange(h)[None, :]
    xs = torch.arange(w)[None, :]
    top = (center_y - size // 2)[:, None]
    left = (center_x - size // 2)[:, None]
    in_y = (ys >= top) & (ys < top + size)
    in_x = (xs >= left) & (xs < left + size)
    mask = ~(in_y[:, :, None] & in_x[:, None, :])
    return x * mask[:, None].to(x)


def flip(x, mask):
    return torch.where(mask[:, None, None, None], x.flip(3), x)


def affine(x, theta):
    """Bilinear resample of ``x`` through per-item 2x3 ``theta`` (normalised coords, border replication)."""
    grid = F.affine_grid(theta.to(x), list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)


def scale_theta(sx, sy):
    theta = torch.zeros(len(sx), 2, 3, dtype=torch.float64)
    theta[:, 0, 0] = sx
    theta[:, 1, 1] = sy
    return theta


def rotate_theta(angle_rad):
    c, s = torch.cos(angle_rad), torch.sin(angle_rad)
    theta = torch.zeros(len(angle_rad), 2, 3, dtype=torch.float64)
    theta[:, 0, 0], theta[:, 0, 1] = c, s
    theta[:, 1, 0], theta[:, 1, 1] = -s, c
    return theta


def sample_params(op: str, shape, policy: AugmentPolicy, g: torch.Generator) -> dict:
    """Transform parameters for one op applied to a batch of ``shape``."""
    b, _, h, w = shape
    if op == "color":
        return {"brightness": (_uniform(b, g) - 0.5) * policy.brightness,
                "saturation": _uniform(b, g) * policy.saturation,
                "contrast": _uniform(b, g) + policy.contrast}
    if op == "crop":
        pad = int(policy.crop_pad * min(h, w) + 0.5)
        return {"pad": pad,
                "shift_y": torch.randint(-pad, pad + 1, (b,), generator=g),
                "shift_x": torch.randint(-pad, pad + 1, (b,), generator=g)}
    if op == "cutout":
        return {"size": int(policy.cutout * min(h, w) + 0.5),
                "center_y": torch.randint(0, h, (b,), generator=g),
                "center_x": torch.randint(0, w, (b,), generator=g)}
    if op == "flip":
        return {"mask": _uniform(b, g) < policy.flip_prob}
    if op == "scale":
        lo = 1.0 / policy.scale
        return {"sx": _uniform(b, g) * (policy.scale - lo) + lo,
                "sy": _uniform(b, g) * (policy.scale - lo) + lo}
    if op == "rotate":
        return {"angle": (_uniform(b, g) - 0.5) * 2 * math.radians(policy.rotate_deg)}
    raise ValueError(f"unknown augmentation {op!r}")


def apply_op(op: str, x: torch.Tensor, params: dict) -> torch.Tensor:
    if op == "color":
        return color(x, params["brightness"], params["saturation"], params["contrast"])
    if op == "crop":
        return translate(x, params["shift_y"], params["shift_x"], params["pad"])
    if op == "cutout":
        return cutout(x, params["center_y"], params["center_x"], params["size"])
    if op == "flip":
        return flip(x, params["mask"])
    if op == "scale":
        return affine(x, scale_theta(params["sx"], params["sy"]))
    if op == "rotate":
        return affine(x, rotate_theta(params["angle"]))
    raise ValueError(f"unknown augmentation {op!r}")


def chosen_ops(policy: AugmentPolicy, g: torch.Generator) -> tuple[str, ...]:
    if not policy.ops:
        raise ValueError("augmentation policy has no enabled ops")
    if policy.compose_all:
        return policy.ops
    return (policy.ops[int(torch.randint(len(policy.ops), (1,), generator=g))],)


def augment_pixels(x: torch.Tensor, policy: AugmentPolicy, shared_seed: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(int(shared_seed))
    for op in chosen_ops(policy, g):
        x = apply_op(op, x, sample_params(op, x.shape, policy, g))
    return x


def dsa_augment(batch: ImageBatch, policy: AugmentPolicy, shared_seed: int) -> ImageBatch:
    """Apply one uniformly drawn op (or all ops with ``compose_all``) to ``batch``."""
    return ImageBatch(augment_pixels(batch.pixels, policy, shared_seed), batch.labels)


def describe(policy: AugmentPolicy) -> dict:
    return {"ops": list(policy.ops), "compose_all": policy.compose_all,
            "brightness": policy.brightness, "saturation": policy.saturation,
            "contrast": policy.contrast, "crop_pad": policy.crop_pad, "cutout": policy.cutout,
            "flip_prob": policy.flip_prob, "scale": policy.scale, "rotate_deg": policy.rotate_deg}
