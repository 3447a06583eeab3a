"""Proxy-set architecture search over the ConvNet grid and rank correlation."""

from __future__ import annotations

import hashlib
import itertools
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .core import (ACTIVATIONS, NORMALIZATIONS, POOLINGS, ArchSpec, AugmentPolicy,
                   ConfigError, EvalProtocol, ImageBatch, derive_seed, fork_rng)
from .data import Dataset
from .evaluate import _map, accuracy, fit
from .models import ArchitectureError, build_network

FULL_GRID = {
    "depths": (1, 2, 3, 4),
    "widths": (32, 64, 128, 256),
    "activations": ("sigmoid", "relu", "leakyrelu"),
    "normalizations": ("none", "batch", "layer", "instance", "group"),
    "poolings": ("none", "max", "avg"),
}

REDUCED_GRID = {
    "depths": (1, 2),
    "widths": (32, 64),
    "activations": ("sigmoid", "relu"),
    "normalizations": ("none", "instance"),
    "poolings": ("max", "avg"),
}

GRIDS = {"full": FULL_GRID, "reduced": REDUCED_GRID}


def enumerate_search_space(depths, widths, activations, normalizations, poolings) -> list[ArchSpec]:
    """Cartesian product in depth-major order (depth, width, activation, normalization, pooling)."""
    axes = {"depths": depths, "widths": widths, "activations": activations,
            "normalizations": normalizations, "poolings": poolings}
    for name, values in axes.items():
        if len(values) == 0:
            raise ConfigError(f"grid.{name}", "axis is empty")
    for a in activations:
        if a not in ACTIVATIONS:
            raise ConfigError("grid.activations", f"unknown activation {a!r}")
    for n in normalizations:
        if n not in NORMALIZATIONS:
            raise ConfigError("grid.normalizations", f"unknown normalization {n!r}")
    for p in poolings:
        if p not in POOLINGS:
            raise ConfigError("grid.poolings", f"unknown pooling {p!r}")
    return [ArchSpec("convnet", d, w, a, n, p)
            for d, w, a, n, p in itertools.product(depths, widths, activations, normalizations, poolings)]


def grid_specs(name_or_axes) -> list[ArchSpec]:
    axes = GRIDS[name_or_axes] if isinstance(name_or_axes, str) else name_or_axes
    return enumerate_search_space(**axes)


def spec_list_digest(specs: list[ArchSpec]) -> str:
    return hashlib.sha256(json.dumps([s.tag for s in specs]).encode()).hexdigest()


def spearman(xs, ys) -> float | None:
    """Spearman rank correlation with average ranks for ties.

    Returns ``None`` when either array is constant, since the correlation is
    undefined there.
    """
    x, y = np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman needs two 1-D arrays of equal length")
    if len(x) < 2:
        raise ValueError("spearman needs at least two points")
    if np.all(x == x[0]) or np.all(y == y[0]):
        return None
    rx, ry = _average_ranks(x), _average_ranks(y)
    n = len(x)
    if len(np.unique(x)) == n and len(np.unique(y)) == n:
        d = rx - ry
        return float(1.0 - 6.0 * np.sum(d * d) / (n * (n * n - 1)))
    rx, ry = rx - rx.mean(), ry - ry.mean()
    return float(np.sum(rx * ry) / np.sqrt(np.sum(rx * rx) * np.sum(ry * ry)))


def _average_ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v))
    sorted_v = v[order]
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


@dataclass
class RankEntry:
    index: int
    spec: ArchSpec
    score: float
    seconds: float
    rank: int = 0
    error: str | None = None

    def to_record(self) -> dict:
        return {"kind": "nas-rank", "index": self.index, "arch": self.spec.tag, "score": self.score,
                "rank": self.rank, "seconds": self.seconds, "error": self.error}


@dataclass
class Ranking:
    entries: list[RankEntry]
    skipped: list[str] = field(default_factory=list)

    def scores_by_index(self) -> dict[int, float]:
        return {e.index: e.score for e in self.entries}


def spec_seed(base_seed: int, spec: ArchSpec) -> int:
    """Per-spec seed; equal specs share it, so their scores coincide."""
    return derive_seed(fork_rng(base_seed, f"nas/{spec.tag}"))


def feasible(spec: ArchSpec, input_shape, class_count: int) -> bool:
    try:
        build_network(spec.bind(input_shape, class_count), fork_rng(0, "probe"))
    except ArchitectureError:
        return False
    return True


def score_spec(spec: ArchSpec, train: ImageBatch, val: Dataset, protocol: EvalProtocol,
               policy: AugmentPolicy, seed: int) -> float:
    """Validation accuracy of ``spec`` trained on ``train``; a pure function of its arguments."""
    rng = fork_rng(seed, "score")
    net = build_network(spec.bind(val.image_shape, val.class_count), rng)
    fit(net, lambda _: train, protocol.epochs, protocol, policy, rng)
    return accuracy(net, val)


def _score_job(args) -> tuple[float, float, str | None]:
    spec, train, val, protocol, policy, seed = args
    t0 = time.perf_counter()
    try:
        return score_spec(spec, train, val, protocol, policy, seed), time.perf_counter() - t0, None
    except Exception as exc:  # a failing spec is scored, not fatal
        return -1.0, time.perf_counter() - t0, f"{type(exc).__name__}: {exc}"


def rank_architectures(proxy: ImageBatch, specs: list[ArchSpec], protocol: EvalProtocol, val: Dataset,
                       rng: np.random.Generator, policy: AugmentPolicy | None = None) -> Ranking:
    """Train every feasible spec on ``proxy`` and sort by validation accuracy.

    Ties keep canonical (input) order.  Specs that collapse the input
    spatially are skipped and listed in ``Ranking.skipped``.
    """
    if not specs:
        raise ValueError("specs must be nonempty")
    policy = policy or AugmentPolicy()
    base = derive_seed(rng)
    jobs, kept, skipped = [], [], []
    for i, spec in enumerate(specs):
        if not feasible(spec, val.image_shape, val.class_count):
            skipped.append(spec.tag)
            continue
        kept.append((i, spec))
        jobs.append((spec, proxy, val, protocol, policy, spec_seed(base, spec)))
    results = _map(_score_job, jobs)
    entries = [RankEntry(i, spec, score, secs, error=err) for (i, spec), (score, secs, err) in zip(kept, results)]
    entries.sort(key=lambda e: (-e.score, e.index))
    for r, e in enumerate(entries, start=1):
        e.rank = r
    return Ranking(entries, skipped)


@dataclass
class NasResult:
    reference: Ranking
    proxies: dict[str, Ranking]
    correlations: dict[str, float | None]

    def to_records(self) -> list[dict]:
        out = []
        for source, ranking in [("full", self.reference), *self.proxies.items()]:
            for e in ranking.entries:
                out.append({**e.to_record(), "source": source})
        for source, rho in self.correlations.items():
            out.append({"kind": "nas-correlation", "source": source, "rho": rho,
                        "specs": len(self.reference.entries), "skipped": len(self.reference.skipped)})
        return out


def correlate(reference: Ranking, proxy: Ranking) -> float | None:
    ref, prox = reference.scores_by_index(), proxy.scores_by_index()
    common = sorted(set(ref) & set(prox))
    if len(common) < 2:
        return None
    return spearman([prox[i] for i in common], [ref[i] for i in common])


def nas_experiment(train: Dataset, val: Dataset, proxies: dict[str, ImageBatch], specs: list[ArchSpec],
                   proxy_protocol: EvalProtocol, full_protocol: EvalProtocol, rng: np.random.Generator,
                   policy: AugmentPolicy | None = None, reference: Ranking | None = None) -> NasResult:
    """Rank ``specs`` on the full training split and on each proxy, then correlate.

    A precomputed ``reference`` ranking may be passed to reuse the costly
    full-set pass across proxy seeds.
    """
    full_seed = derive_seed(rng)
    if reference is None:
        reference = rank_architectures(train.as_batch(), specs, full_protocol, val,
                                       fork_rng(full_seed, "nas/full"), policy)
    rankings, rhos = {}, {}
    for name, batch in proxies.items():
        rankings[name] = rank_architectures(batch, specs, proxy_protocol, val,
                                            fork_rng(derive_seed(rng), f"nas/{name}"), policy)
        rhos[name] = correlate(reference, rankings[name])
    return NasResult(reference, rankings, rhos)
