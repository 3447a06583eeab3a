"""Adversarial pre-training of the conditional generator."""

from __future__ import annotations

import dataclasses
import math
import time
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .augment import augment_pixels
from .core import AugmentPolicy, DistillConfig, GeneratorCheckpoint, PretrainSettings, derive_seed, torch_generator
from .data import Dataset
from .models import generator_to_checkpoint


class TrainingError(RuntimeError):
    pass


def discriminator_loss(disc, real, fake, labels):
    """Negated GAN value for the discriminator: -log D(x|y) - log(1 - D(G(z|y)))."""
    return F.softplus(-disc(real, labels)).mean() + F.softplus(disc(fake, labels)).mean()


def generator_loss(disc, fake, labels):
    """Non-saturating generator loss -log D(G(z|y))."""
    return F.softplus(-disc(fake, labels)).mean()


def discriminator_policy(cfg: DistillConfig) -> AugmentPolicy | None:
    """Augmentation for discriminator inputs: the config's op parameters restricted to ``pretrain.augment_ops``."""
    if not cfg.pretrain.augment or not cfg.pretrain.augment_ops:
        return None
    return dataclasses.replace(cfg.augment, ops=cfg.pretrain.augment_ops, compose_all=False)


def make_optimizer(params, kind: str, lr: float, betas=(0.5, 0.9)):
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr, betas=tuple(betas))
    return torch.optim.SGD(params, lr=lr)


def gan_step(gen, disc, real, labels, codes, opt_g, opt_d, policy: AugmentPolicy | None = None,
             seeds: tuple[int, int, int] = (0, 1, 2)) -> tuple[float, float]:
    """One discriminator update followed by one generator update.

    With a ``policy``, every image the discriminator sees is augmented
    differentiably first; ``seeds`` fix those draws.
    """
    def aug(x, seed):
        return augment_pixels(x, policy, seed) if policy is not None and policy.enabled else x

    with torch.no_grad():
        fake = gen(codes, labels)
    opt_d.zero_grad(set_to_none=True)
    d_loss = discriminator_loss(disc, aug(real, seeds[0]), aug(fake, seeds[1]), labels)
    d_loss.backward()
    opt_d.step()

    for p in disc.parameters():
        p.requires_grad_(False)
    opt_g.zero_grad(set_to_none=True)
    g_loss = generator_loss(disc, aug(gen(codes, labels), seeds[2]), labels)
    g_loss.backward()
    opt_g.step()
    for p in disc.parameters():
        p.requires_grad_(True)
    return d_loss.item(), g_loss.item()


def pretrain_gan(ds: Dataset, gen, disc, epochs: int, rng: np.random.Generator,
                 settings: PretrainSettings | None = None, config_digest: str = "",
                 log: Callable[[dict], None] | None = None,
                 policy: AugmentPolicy | None = None) -> GeneratorCheckpoint:
    """Train ``gen``/``disc`` adversarially for ``epochs`` passes over ``ds``.

    ``policy`` (default: none) augments discriminator inputs, which curbs
    discriminator overfitting on small datasets.  Returns a checkpoint tagged
    ``pretrained``; per-step losses go to ``log``.
    """
    settings = settings or PretrainSettings()
    if tuple(gen.image_shape) != ds.image_shape or gen.class_count != ds.class_count:
        raise ValueError("generator shape does not match the dataset")
    opt_g = make_optimizer(gen.parameters(), settings.optimizer, settings.lr_generator, settings.betas)
    opt_d = make_optimizer(disc.parameters(), settings.optimizer, settings.lr_discriminator, settings.betas)
    gen.train()
    disc.train()
    n = len(ds)
    step = 0
    start = time.perf_counter()
    for epoch in range(epochs):
        order = rng.permutation(n)
        g = torch_generator(rng)
        for lo in range(0, n, settings.batch_size):
            idx = torch.from_numpy(order[lo:lo + settings.batch_size])
            real, labels = ds.images[idx], ds.labels[idx]
            codes = torch.randn(len(idx), gen.latent_dim, generator=g)
            seeds = (derive_seed(rng), derive_seed(rng), derive_seed(rng))
            d_loss, g_loss = gan_step(gen, disc, real, labels, codes, opt_g, opt_d, policy, seeds)
            if not (math.isfinite(d_loss) and math.isfinite(g_loss)):
                raise TrainingError(f"non-finite GAN loss at iteration {step} (d={d_loss}, g={g_loss})")
            if log is not None:
                log({"stage": "pretrain", "epoch": epoch, "step": step, "d_loss": d_loss, "g_loss": g_loss})
            step += 1
    extra = {"pretrain_epochs": epochs, "pretrain_steps": step,
             "pretrain_seconds": time.perf_counter() - start}
    return generator_to_checkpoint(gen, "pretrained", config_digest, extra)
