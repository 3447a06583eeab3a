"""Downstream evaluation: classifier training, latency-matched D2M runs, baselines, storage."""

from __future__ import annotations

import logging
import math
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .augment import augment_pixels
from .core import (ArchSpec, AugmentPolicy, EvalProtocol, GeneratorCheckpoint,
                   ImageBatch, default_depth, derive_seed, fork_rng)
from .data import Dataset, balanced_labels, sample_indices
from .distill import Sampler, step_calls
from .models import build_network

log = logging.getLogger(__name__)


class BudgetError(RuntimeError):
    """Generating the synthetic images alone would exceed the time budget."""

    def __init__(self, message: str, images_per_second: float):
        super().__init__(message)
        self.images_per_second = images_per_second


def worker_count() -> int:
    """Parallel trial workers, capped by ``D2M_WORKERS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("D2M_WORKERS", "1")))
    except ValueError:
        return 1


def protocol_arch(protocol: EvalProtocol, ds: Dataset) -> ArchSpec:
    arch = protocol.arch or ArchSpec("convnet", default_depth(ds.image_shape[1]))
    return arch.bind(ds.image_shape, ds.class_count)


@dataclass
class FitResult:
    epochs_run: int
    seconds: float
    truncated: bool


def fit(net: torch.nn.Module, epoch_data: Callable[[int], ImageBatch], epochs: int,
        protocol: EvalProtocol, policy: AugmentPolicy, rng: np.random.Generator,
        deadline: float | None = None, before_epoch: Callable[[int], None] | None = None) -> FitResult:
    """Train ``net`` for ``epochs`` passes; ``epoch_data(e)`` supplies the images for epoch ``e``.

    ``deadline`` is an absolute ``perf_counter`` value.  An epoch is skipped
    when the slowest epoch so far would not finish before it.
    """
    opt = torch.optim.SGD(net.parameters(), lr=protocol.lr, momentum=protocol.momentum,
                          weight_decay=protocol.weight_decay)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=protocol.lr_step, gamma=protocol.lr_decay)
    start = time.perf_counter()
    slowest, run = 0.0, 0
    net.train()
    for epoch in range(epochs):
        t0 = time.perf_counter()
        if deadline is not None and t0 + slowest > deadline:
            return FitResult(run, time.perf_counter() - start, True)
        if before_epoch is not None:
            before_epoch(epoch)
        data = epoch_data(epoch)
        order = torch.from_numpy(rng.permutation(len(data)))
        for lo in range(0, len(order), protocol.batch_size):
            idx = order[lo:lo + protocol.batch_size]
            x, y = data.pixels[idx], data.labels[idx]
            if protocol.augment and policy.enabled:
                x = augment_pixels(x, policy, derive_seed(rng))
            loss = F.cross_entropy(net(x), y)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        sched.step()
        run += 1
        slowest = max(slowest, time.perf_counter() - t0)
    return FitResult(run, time.perf_counter() - start, False)


@torch.no_grad()
def accuracy(net: torch.nn.Module, test: Dataset, batch_size: int = 1024) -> float:
    net.eval()
    correct = 0
    for lo in range(0, len(test), batch_size):
        pred = net(test.images[lo:lo + batch_size]).argmax(1)
        correct += int((pred == test.labels[lo:lo + batch_size]).sum())
    return correct / len(test)


def _check_training_set(images: ImageBatch, class_count: int) -> None:
    images.check_labels(class_count)
    present = set(images.labels.unique().tolist())
    missing = sorted(set(range(class_count)) - present)
    if missing:
        log.warning("classes absent from the training images: %s", missing)


def train_classifier(images: ImageBatch, arch: ArchSpec, protocol: EvalProtocol, test: Dataset,
                     rng: np.random.Generator, policy: AugmentPolicy | None = None,
                     epochs: int | None = None) -> float:
    """Train a freshly initialised ``arch`` on ``images`` and return top-1 test accuracy."""
    if len(images) == 0:
        raise ValueError("empty training set")
    _check_training_set(images, test.class_count)
    arch = arch.bind(test.image_shape, test.class_count)
    net = build_network(arch, rng)
    epochs = protocol.epochs if epochs is None else epochs
    fit(net, lambda _: images, epochs, protocol, policy or AugmentPolicy(), rng)
    return accuracy(net, test)


def random_coreset(ds: Dataset, ipc: int, rng: np.random.Generator) -> ImageBatch:
    """``ipc`` real images per class, drawn uniformly (with replacement only for small classes)."""
    if ipc < 1:
        raise ValueError("ipc must be >= 1")
    idx = torch.from_numpy(sample_indices(ds, ipc, rng))
    return ImageBatch(ds.images[idx], ds.labels[idx])


@dataclass
class Budget:
    seconds: float
    samples: list[float]


def measure_budget(ipc: int, arch: ArchSpec, protocol: EvalProtocol, ds: Dataset,
                   rng: np.random.Generator, policy: AugmentPolicy | None = None) -> Budget:
    """Median wall time of ``protocol.budget_reps`` trainings on random real ``ipc`` subsets.

    One untimed warm-up run precedes the timed ones so lazy initialisation
    does not inflate the first sample.
    """
    if ipc < 1:
        raise ValueError("ipc must be >= 1")
    policy = policy or AugmentPolicy()
    arch = arch.bind(ds.image_shape, ds.class_count)
    samples = []
    for rep in range(protocol.budget_reps + 1):
        r = fork_rng(derive_seed(rng), f"budget/{rep}")
        subset = random_coreset(ds, ipc, r)
        net = build_network(arch, r)
        result = fit(net, lambda _: subset, protocol.epochs, protocol, policy, r)
        if rep > 0:
            samples.append(result.seconds)
    return Budget(statistics.median(samples), samples)


_TRIAL_FIELDS = {"gen_seconds": "gen_seconds", "train_seconds": "train_seconds",
                 "epochs_run": "epochs_run", "truncated": "truncated", "seeds": "seed"}


@dataclass
class EvalReport:
    method: str
    ipc: int
    arch: str
    accuracies: list[float]
    budget_seconds: float | None = None
    gen_seconds: list[float] = field(default_factory=list)
    train_seconds: list[float] = field(default_factory=list)
    epochs_run: list[int] = field(default_factory=list)
    truncated: list[bool] = field(default_factory=list)
    images_per_class: int = 0
    storage: int = 0
    distill_seconds: float | None = None
    distill_steps_during_eval: int = 0
    config_digest: str = ""
    seeds: list[int] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    def within_budget(self, slack: float = 0.05) -> bool:
        if self.budget_seconds is None:
            return True
        return all(g + t <= (1 + slack) * self.budget_seconds
                   for g, t in zip(self.gen_seconds, self.train_seconds))

    def summary(self) -> dict:
        d = asdict(self)
        d.update(kind="summary", mean=self.mean, std=self.std)
        return d

    def to_records(self) -> list[dict]:
        rows = []
        for i, acc in enumerate(self.accuracies):
            row = {"kind": "trial", "method": self.method, "ipc": self.ipc, "arch": self.arch,
                   "trial": i, "accuracy": acc, "config_digest": self.config_digest}
            for key, name in _TRIAL_FIELDS.items():
                values = getattr(self, key)
                if i < len(values):
                    row[name] = values[i]
            rows.append(row)
        return rows + [self.summary()]


def d2m_epochs(protocol: EvalProtocol) -> int:
    """Training epochs left once ``generation_share`` of the budget is reserved."""
    return max(1, math.floor(protocol.epochs * (1.0 - protocol.generation_share)))


def _latency_trial(args) -> tuple[float, float, float, int, bool]:
    ckpt, arch, ipc, protocol, policy, test, seed, budget = args
    torch.set_num_threads(1) if worker_count() > 1 else None
    rng = fork_rng(seed, "trial")
    sampler = Sampler(ckpt)
    chunk_labels = balanced_labels(ckpt.class_count, ipc)
    chunks: list[ImageBatch] = []
    gen_seconds = 0.0
    start = time.perf_counter()
    deadline = start + (1 + protocol.budget_slack) * budget

    def generate_chunk(epoch: int) -> None:
        nonlocal gen_seconds
        if epoch < protocol.generation_multiplier:
            t0 = time.perf_counter()
            chunks.append(sampler.sample(chunk_labels, fork_rng(seed, f"chunk/{epoch}")))
            gen_seconds += time.perf_counter() - t0

    net = build_network(arch, rng)
    result = fit(net, lambda e: chunks[e % len(chunks)], d2m_epochs(protocol), protocol, policy, rng,
                 deadline=deadline, before_epoch=generate_chunk)
    train_seconds = result.seconds - gen_seconds
    return accuracy(net, test), gen_seconds, train_seconds, result.epochs_run, result.truncated


def _map(fn, jobs: list) -> list:
    workers = min(worker_count(), len(jobs))
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(fn, jobs))


def evaluate_latency_matched(ckpt: GeneratorCheckpoint, arch: ArchSpec | None, ipc: int,
                             protocol: EvalProtocol, ds: Dataset, test: Dataset,
                             rng: np.random.Generator, policy: AugmentPolicy | None = None,
                             budget: Budget | None = None) -> EvalReport:
    """Train on generator samples within the wall-clock budget of training on ``ipc`` real images.

    Generation is amortised in chunks of ``ipc`` images per class, one chunk
    before each of the first ``generation_multiplier`` epochs; epoch ``e``
    trains on chunk ``e mod generation_multiplier``.  Training runs for
    :func:`d2m_epochs` epochs, so each epoch costs as much as a real-data
    epoch and the total image count per class is fixed by the protocol.
    """
    if ckpt.stage != "distilled":
        raise ValueError(f"checkpoint stage is {ckpt.stage!r}, expected 'distilled'")
    if (ckpt.class_count, tuple(ckpt.image_shape)) != (ds.class_count, ds.image_shape):
        raise ValueError("checkpoint does not match the dataset")
    policy = policy or AugmentPolicy()
    arch = (arch or protocol_arch(protocol, ds)).bind(ds.image_shape, ds.class_count)
    calls_before = step_calls()
    # drawn unconditionally so trial seeds do not depend on a supplied budget
    budget_seed = derive_seed(rng)
    if budget is None:
        budget = measure_budget(ipc, arch, protocol, ds, fork_rng(budget_seed, "budget"), policy)

    # generation alone must fit: time one chunk and extrapolate
    sampler = Sampler(ckpt)
    t0 = time.perf_counter()
    sampler.sample(balanced_labels(ckpt.class_count, ipc), 0)
    chunk_seconds = time.perf_counter() - t0
    rate = ipc * ckpt.class_count / max(chunk_seconds, 1e-9)
    if chunk_seconds * protocol.generation_multiplier > (1 + protocol.budget_slack) * budget.seconds:
        raise BudgetError(f"generating {protocol.generation_multiplier * ipc} images per class takes "
                          f"~{chunk_seconds * protocol.generation_multiplier:.3f}s at {rate:.1f} img/s, "
                          f"over the {budget.seconds:.3f}s budget", rate)

    seeds = [derive_seed(rng) for _ in range(protocol.trials)]
    jobs = [(ckpt, arch, ipc, protocol, policy, test, s, budget.seconds) for s in seeds]
    results = _map(_latency_trial, jobs)
    return EvalReport(
        method="d2m", ipc=ipc, arch=arch.tag,
        accuracies=[r[0] for r in results], budget_seconds=budget.seconds,
        gen_seconds=[r[1] for r in results], train_seconds=[r[2] for r in results],
        epochs_run=[r[3] for r in results], truncated=[r[4] for r in results],
        images_per_class=protocol.generation_multiplier * ipc,
        storage=distillation_storage("d2m", ipc, ckpt),
        distill_seconds=ckpt.extra.get("distill_seconds"),
        distill_steps_during_eval=step_calls() - calls_before,
        config_digest=ckpt.config_digest, seeds=seeds)


def _coreset_trial(args) -> tuple[float, float]:
    ds, arch, ipc, protocol, policy, test, seed = args
    torch.set_num_threads(1) if worker_count() > 1 else None
    rng = fork_rng(seed, "trial")
    subset = random_coreset(ds, ipc, rng)
    net = build_network(arch, rng)
    result = fit(net, lambda _: subset, protocol.epochs, protocol, policy, rng)
    return accuracy(net, test), result.seconds


def evaluate_coreset(ds: Dataset, arch: ArchSpec | None, ipc: int, protocol: EvalProtocol,
                     test: Dataset, rng: np.random.Generator, policy: AugmentPolicy | None = None,
                     config_digest: str = "") -> EvalReport:
    """Random-coreset baseline: train on ``ipc`` real images per class per trial."""
    policy = policy or AugmentPolicy()
    arch = (arch or protocol_arch(protocol, ds)).bind(ds.image_shape, ds.class_count)
    seeds = [derive_seed(rng) for _ in range(protocol.trials)]
    results = _map(_coreset_trial, [(ds, arch, ipc, protocol, policy, test, s) for s in seeds])
    return EvalReport(
        method="random", ipc=ipc, arch=arch.tag, accuracies=[r[0] for r in results],
        train_seconds=[r[1] for r in results], gen_seconds=[0.0] * len(results),
        epochs_run=[protocol.epochs] * len(results), truncated=[False] * len(results),
        images_per_class=ipc,
        storage=distillation_storage("pixel", ipc, ds.image_shape, ds.class_count),
        config_digest=config_digest, seeds=seeds)


@dataclass
class CrossArchTable:
    rows: dict[str, EvalReport | str]
    average: float | None

    def to_records(self) -> list[dict]:
        out = []
        for tag, row in self.rows.items():
            if isinstance(row, EvalReport):
                out.append({"kind": "cross-arch", "arch": tag, "mean": row.mean, "std": row.std})
            else:
                out.append({"kind": "cross-arch", "arch": tag, "error": row})
        out.append({"kind": "cross-arch", "arch": "average", "mean": self.average})
        return out


def cross_architecture_eval(ckpt: GeneratorCheckpoint, archs: list[ArchSpec], ipc: int,
                            protocol: EvalProtocol, ds: Dataset, test: Dataset,
                            rng: np.random.Generator, policy: AugmentPolicy | None = None) -> CrossArchTable:
    """One latency-matched evaluation per architecture, each with its own budget."""
    if not archs:
        raise ValueError("archs must be nonempty")
    rows: dict[str, EvalReport | str] = {}
    for arch in archs:
        r = fork_rng(derive_seed(rng), f"cross/{arch.tag}")
        try:
            rows[arch.tag] = evaluate_latency_matched(ckpt, arch, ipc, protocol, ds, test, r, policy)
        except Exception as exc:  # one bad row must not sink the table
            rows[arch.tag] = f"{type(exc).__name__}: {exc}"
    means = [row.mean for row in rows.values() if isinstance(row, EvalReport)]
    return CrossArchTable(rows, float(np.mean(means)) if means else None)


def distillation_storage(method: str, ipc: int, source, class_count: int | None = None) -> int:
    """Scalars stored per method: generator parameters for ``d2m``, raw pixels for ``pixel``."""
    if ipc < 1:
        raise ValueError("ipc must be >= 1")
    if method == "d2m":
        if isinstance(source, GeneratorCheckpoint):
            return source.param_count
        return sum(p.numel() for p in source.parameters())
    if method == "pixel":
        if class_count is None:
            raise ValueError("pixel storage needs class_count")
        return ipc * class_count * math.prod(source)
    raise ValueError(f"unknown storage method {method!r}")


def storage_crossover(d2m_count: int, image_shape, class_count: int) -> int:
    """Smallest ipc at which storing pixels costs at least as much as the generator."""
    per_ipc = class_count * math.prod(image_shape)
    return max(1, -(-d2m_count // per_ipc))
