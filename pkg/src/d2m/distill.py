"""The distillation loop: refine a pretrained generator by embedding and prediction matching."""

from __future__ import annotations

import json
import math
import time
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .augment import augment_pixels
from .core import (DistillConfig, GeneratorCheckpoint, ImageBatch, LatentBatch,
                   ModelPoolSpec, derive_seed, fork_rng, load_checkpoint,
                   save_checkpoint, torch_generator)
from .data import Dataset, draw_labels, sample_real_batch
from .losses import embedding_matching_loss, prediction_matching_loss, total_loss
from .models import (forward_with_features, generator_from_checkpoint,
                     generator_to_checkpoint, sample_model_pool)


class DistillError(RuntimeError):
    pass


_step_calls = 0


def step_calls() -> int:
    """Number of :func:`distill_step` invocations in this process."""
    return _step_calls


def matching_objective(gen, net, latent: LatentBatch, real_pixels: torch.Tensor, cfg: DistillConfig,
                       aug_seed: int):
    """Return ``(L, L_EM, L_PM)`` for one real batch and one latent batch through ``net``."""
    dtype = next(gen.parameters()).dtype
    syn = gen(latent.codes.to(dtype), latent.labels)
    real = real_pixels.to(dtype)
    if cfg.augment.enabled:
        real = augment_pixels(real, cfg.augment, aug_seed)
        syn = augment_pixels(syn, cfg.augment, aug_seed)
    with torch.no_grad():
        feats_real = forward_with_features(net, real)
    feats_syn = forward_with_features(net, syn)
    groups = latent.labels if cfg.em_grouping == "class" else None
    l_em = embedding_matching_loss(feats_real, feats_syn, cfg.attention_exponent, groups)
    l_pm = prediction_matching_loss(feats_real.logits, feats_syn.logits, cfg.temperature, cfg.t_squared)
    return total_loss(l_em, l_pm, cfg.lambda_balance), l_em, l_pm


def make_generator_optimizer(gen, cfg: DistillConfig) -> torch.optim.Optimizer:
    if cfg.generator_optimizer == "adam":
        return torch.optim.Adam(gen.parameters(), lr=cfg.lr_generator, betas=cfg.generator_betas)
    return torch.optim.SGD(gen.parameters(), lr=cfg.lr_generator)


def distill_step(gen, pool: ModelPoolSpec, ds: Dataset, cfg: DistillConfig, rng: np.random.Generator,
                 optimizer: torch.optim.Optimizer | None = None):
    """One iteration: sample a network, match a real and a synthetic batch, update ``gen``.

    Returns ``(record, gen)`` where ``record`` holds ``L_EM``, ``L_PM`` and ``L``.
    """
    global _step_calls
    _step_calls += 1
    start = time.perf_counter()
    if tuple(gen.image_shape) != ds.image_shape or gen.class_count != ds.class_count:
        raise DistillError(f"generator {gen.image_shape}/{gen.class_count} does not match dataset "
                           f"{ds.image_shape}/{ds.class_count}")
    dtype = next(gen.parameters()).dtype
    net = sample_model_pool(pool, rng, ds.image_shape, ds.class_count).to(dtype)
    net.requires_grad_(False)
    net.train()

    labels = draw_labels(ds.class_count, cfg.batch_size, rng)
    real = sample_real_batch(ds, labels, rng)
    latent = LatentBatch.sample(labels, gen.latent_dim, torch_generator(rng))
    aug_seed = derive_seed(rng)

    # sampling mode: normalisation statistics stay those used at generation time
    gen.eval()
    loss, l_em, l_pm = matching_objective(gen, net, latent, real.pixels, cfg, aug_seed)
    if not torch.isfinite(loss):
        raise DistillError(f"non-finite distillation loss (L_EM={l_em.item()}, L_PM={l_pm.item()})")
    if optimizer is None:
        optimizer = make_generator_optimizer(gen, cfg)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.lr_generator > 0:
        optimizer.step()
    record = {"L_EM": l_em.item(), "L_PM": l_pm.item(), "L": loss.item(),
              "arch": net.spec.tag, "seconds": time.perf_counter() - start}
    return record, gen


def steps_per_epoch(ds: Dataset, cfg: DistillConfig) -> int:
    return math.ceil(len(ds) / cfg.batch_size)


def snapshot_paths(path: Path) -> tuple[Path, Path, Path]:
    return path, path.with_suffix(".state.json"), path.with_suffix(".optim.pt")


def distill(ckpt_in: GeneratorCheckpoint, ds: Dataset, cfg: DistillConfig,
            rng: np.random.Generator | None = None, log: Callable[[dict], None] | None = None,
            snapshot: str | Path | None = None, resume: bool = False,
            stop_after: int | None = None) -> GeneratorCheckpoint:
    """Run ``cfg.epochs`` epochs of ``ceil(|T| / B)`` steps and return a ``distilled`` checkpoint.

    Each epoch draws from its own stream, so a run resumed from an epoch
    snapshot reproduces the uninterrupted run exactly.  ``stop_after`` ends
    this invocation once that many epochs are complete (counting resumed
    ones); the returned checkpoint then records the epochs actually run.
    """
    base_seed = derive_seed(rng) if rng is not None else cfg.seed
    pool = cfg.pool_for(ds.image_shape[1])
    gen = generator_from_checkpoint(ckpt_in)
    optimizer = make_generator_optimizer(gen, cfg)
    start_epoch, step, elapsed = 0, 0, 0.0

    snap = Path(snapshot) if snapshot is not None else None
    if snap is not None and resume and snap.exists():
        ckpt_path, state_path, optim_path = snapshot_paths(snap)
        state = json.loads(state_path.read_text())
        if state["base_seed"] != base_seed or state["config_digest"] != cfg.digest():
            raise DistillError("snapshot was written by a different configuration or seed")
        gen = generator_from_checkpoint(load_checkpoint(ckpt_path))
        optimizer = make_generator_optimizer(gen, cfg)
        if optim_path.exists():
            optimizer.load_state_dict(torch.load(optim_path, weights_only=True))
        start_epoch, step, elapsed = state["epoch"], state["step"], state["seconds"]

    per_epoch = steps_per_epoch(ds, cfg)
    last = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(start_epoch, last):
        t0 = time.perf_counter()
        erng = fork_rng(base_seed, f"distill/epoch/{epoch}")
        for _ in range(per_epoch):
            record, gen = distill_step(gen, pool, ds, cfg, erng, optimizer)
            if log is not None:
                log({"step": step, "epoch": epoch, **record})
            step += 1
        elapsed += time.perf_counter() - t0
        if snap is not None:
            ckpt_path, state_path, optim_path = snapshot_paths(snap)
            save_checkpoint(generator_to_checkpoint(gen, "distilled", cfg.digest()), ckpt_path)
            torch.save(optimizer.state_dict(), optim_path)
            state_path.write_text(json.dumps({"epoch": epoch + 1, "step": step, "seconds": elapsed,
                                              "base_seed": base_seed, "config_digest": cfg.digest()}))

    extra = dict(ckpt_in.extra)
    extra.update({"distill_seconds": elapsed, "distill_steps": step, "distill_epochs": max(last, start_epoch),
                  "parent_digest": ckpt_in.digest()})
    return generator_to_checkpoint(gen, "distilled", cfg.digest(), extra)


class Sampler:
    """Draws labelled images from a checkpointed generator."""

    def __init__(self, ckpt: GeneratorCheckpoint):
        self.ckpt = ckpt
        self.gen = generator_from_checkpoint(ckpt).eval()

    def sample(self, labels, rng_or_seed) -> ImageBatch:
        labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
        if labels.numel() and (labels.min() < 0 or labels.max() >= self.ckpt.class_count):
            raise ValueError(f"label outside [0, {self.ckpt.class_count - 1}]")
        rng = rng_or_seed if isinstance(rng_or_seed, np.random.Generator) else fork_rng(rng_or_seed, "generate")
        latent = LatentBatch.sample(labels, self.ckpt.latent_dim, torch_generator(rng))
        with torch.no_grad():
            pixels = self.gen(latent.codes, latent.labels)
        return ImageBatch(pixels, latent.labels)


def generate(ckpt: GeneratorCheckpoint, labels, seed: int) -> ImageBatch:
    """Images for any label list from one checkpoint; deterministic in ``(ckpt, labels, seed)``."""
    return Sampler(ckpt).sample(labels, seed)
