"""End-to-end acceptance criteria, one test per criterion.

Each test appends a PASS/FAIL line to the terminal summary.  The toy
pipeline (pre-training once, distillation per seed) is a session fixture
shared by the margin, re-distillation, budget and NAS criteria; its build
time is charged to each criterion's runtime.
"""

import dataclasses
import functools
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES
from d2m.core import (ArchSpec, AugmentPolicy, DistillConfig, EvalProtocol, LatentBatch, ModelPoolSpec,
                      ToySpec, fork_rng, load_config_file)
from d2m.data import balanced_labels, make_toy_dataset
from d2m.distill import distill, generate, matching_objective, step_calls
from d2m.evaluate import (distillation_storage, evaluate_coreset, evaluate_latency_matched,
                          random_coreset, storage_crossover)
from d2m.losses import channel_attention, embedding_matching_loss, prediction_matching_loss
from d2m.models import build_discriminator, build_generator, build_network
from d2m.nas import grid_specs, nas_experiment, rank_architectures, spearman
from d2m.pretrain import discriminator_policy, pretrain_gan
from fdcheck import check_gradients

pytestmark = pytest.mark.acceptance

TOY_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "toy.yaml"
SEEDS = (0, 1, 2)
EVAL_ARCH = ArchSpec("convnet", 2, 128)
LATENCY_REPORTS = []


def criterion(number: int, title: str, limit_s: float | None = None):
    """Record a PASS/FAIL line for the wrapped test; ``limit_s`` bounds its reported runtime."""
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            start = time.perf_counter()
            detail = ""
            try:
                detail = fn(*args, **kwargs) or ""
                status = "PASS"
            except BaseException as exc:
                status, detail = "FAIL", f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
                raise
            finally:
                ACCEPTANCE_LINES.append(f"[{status}] {number}. {title}"
                                        f" ({time.perf_counter() - start:.1f}s) {detail}".rstrip())
        return run
    return wrap


def _check_runtime(seconds: float, limit: float) -> None:
    assert seconds <= limit, f"runtime {seconds:.0f}s over the {limit:.0f}s limit"


# ---------------------------------------------------------------- shared pipeline

@dataclasses.dataclass
class ToyRun:
    cfg: DistillConfig
    train: object
    test: object
    pretrained: object
    pretrain_log: list
    distilled: dict
    pretrain_seconds: float
    distill_seconds: dict


@pytest.fixture(scope="session")
def toy_run():
    cfg = load_config_file(TOY_CONFIG)
    train = make_toy_dataset(cfg.toy)
    test = make_toy_dataset(cfg.toy, "test", 200)
    t0 = time.perf_counter()
    gen = build_generator(cfg.latent_dim, train.class_count, train.image_shape,
                          fork_rng(cfg.seed, "generator-init"), cfg.generator_width)
    disc = build_discriminator(train.class_count, train.image_shape, fork_rng(cfg.seed, "discriminator-init"),
                               cfg.pretrain.disc_width, cfg.pretrain.spectral_norm)
    log = []
    pre = pretrain_gan(train, gen, disc, cfg.pretrain.epochs, fork_rng(cfg.seed, "pretrain"), cfg.pretrain,
                       cfg.digest(), log=log.append, policy=discriminator_policy(cfg))
    pretrain_seconds = time.perf_counter() - t0
    distilled, seconds = {}, {}
    for seed in SEEDS:
        t0 = time.perf_counter()
        distilled[seed] = distill(pre, train, dataclasses.replace(cfg, seed=seed))
        seconds[seed] = time.perf_counter() - t0
    return ToyRun(cfg, train, test, pre, log, distilled, pretrain_seconds, seconds)


# ---------------------------------------------------------------- pre-training sanity

def test_toy_pretraining_is_sane(toy_run):
    assert toy_run.pretrain_log
    assert all(math.isfinite(r["d_loss"]) and math.isfinite(r["g_loss"]) for r in toy_run.pretrain_log)
    samples = generate(toy_run.pretrained, balanced_labels(3, 100), 0)
    assert samples.pixels.min() >= -1.0 and samples.pixels.max() <= 1.0
    # a classifier fit on real images must recognise the generated classes well above chance
    from d2m.data import Dataset
    from d2m.evaluate import accuracy, fit
    arch = ArchSpec("convnet", 2, 32).bind(toy_run.train.image_shape, 3)
    net = build_network(arch, fork_rng(0, "probe"))
    fit(net, lambda _: toy_run.train.as_batch(), 15, EvalProtocol(epochs=15, lr_step=10, batch_size=64),
        toy_run.cfg.augment, fork_rng(0, "probe/fit"))
    acc = accuracy(net, Dataset(samples.pixels, samples.labels, 3, "toy"))
    assert acc >= 2 / 3, f"probe labels generated samples at {acc:.2f}"


# ---------------------------------------------------------------- 1

@criterion(1, "gradient fidelity", 120)
def test_gradient_fidelity():
    start = time.perf_counter()
    torch.manual_seed(0)
    ds = make_toy_dataset(ToySpec(per_class=4, seed=11))
    cfg = DistillConfig(augment=AugmentPolicy(ops=("rotate",)))
    gen = build_generator(cfg.latent_dim, 3, (3, 16, 16), fork_rng(0, "fd/gen"), cfg.generator_width).double()
    # a few forward passes in training mode give the normalisation buffers non-trivial statistics
    with torch.no_grad():
        for i in range(3):
            gen(torch.randn(16, cfg.latent_dim, dtype=torch.float64), torch.arange(16) % 3)
    net = build_network(ArchSpec("convnet", 2, 128).bind((3, 16, 16), 3), fork_rng(0, "fd/net")).double()
    net.requires_grad_(False)
    labels = torch.arange(6) % 3
    real = ds.images[[0, 4, 8, 1, 5, 9]].double()
    latent = LatentBatch.sample(labels, cfg.latent_dim, torch.Generator().manual_seed(1), dtype=torch.float64)
    gen.eval()

    def loss():
        return matching_objective(gen, net, latent, real, cfg, 5)[0]

    gen.zero_grad()
    loss().backward()
    params = list(gen.parameters())
    result = check_gradients(loss, params, [p.grad.clone() for p in params], 200, np.random.default_rng(0))
    elapsed = time.perf_counter() - start
    assert len(result.errors) >= 200, f"only {len(result.errors)} kink-free samples"
    assert result.max_error <= 1e-4, f"max relative error {result.max_error:.2e}"
    _check_runtime(elapsed, 120)
    return f"max rel err {result.max_error:.2e} over {len(result.errors)} params ({result.kinks} kink draws replaced)"


# ---------------------------------------------------------------- 2

@criterion(2, "loss invariants", 30)
def test_loss_invariants():
    start = time.perf_counter()
    from d2m.core import FeatureStack
    g = torch.Generator().manual_seed(0)

    def stack():
        feats = [torch.randn(5, 8, 4, 4, generator=g, dtype=torch.float64),
                 torch.randn(5, 6, 2, 2, generator=g, dtype=torch.float64)]
        return FeatureStack(feats, torch.randn(5, 3, generator=g, dtype=torch.float64))

    for _ in range(50):
        a, b = stack(), stack()
        ab, ba = embedding_matching_loss(a, b).item(), embedding_matching_loss(b, a).item()
        assert ab >= 0 and math.isclose(ab, ba, rel_tol=1e-12)
        assert embedding_matching_loss(a, a).item() == 0.0
        assert prediction_matching_loss(a.logits, a.logits, 4.0).item() == 0.0
        assert prediction_matching_loss(a.logits, b.logits, 1e6).item() <= 1e-9
        att = channel_attention(a.features[0])
        assert (att >= 0).all()
        assert all(abs(n - 1) < 1e-9 or n == 0 for n in att.norm(dim=1).tolist())

    a = stack()
    delta = 0.37
    shifted = FeatureStack([a.features[0], a.features[1] + delta], a.logits)
    dim = a.features[1][0].numel()
    assert abs(embedding_matching_loss(a, shifted).item() - dim * delta ** 2) < 1e-9
    pm = prediction_matching_loss(torch.tensor([[1.0, 0.0]], dtype=torch.float64),
                                  torch.tensor([[0.0, 1.0]], dtype=torch.float64), 1.0).item()
    assert abs(pm - (math.e - 1) / (math.e + 1)) < 1e-6 and abs(pm - 0.462117) < 1e-6
    assert channel_attention(torch.zeros(2, 4, 3, 3)).abs().sum() == 0
    _check_runtime(time.perf_counter() - start, 30)
    return f"L_PM two-class value {pm:.6f}"


# ---------------------------------------------------------------- 3

@pytest.fixture(scope="session")
def margin_reports(toy_run):
    protocol = dataclasses.replace(toy_run.cfg.eval, trials=5)
    rows = {}
    t0 = time.perf_counter()
    for seed in SEEDS:
        d2m = evaluate_latency_matched(toy_run.distilled[seed], EVAL_ARCH, 10, protocol, toy_run.train,
                                       toy_run.test, fork_rng(seed, "accept/d2m"), toy_run.cfg.augment)
        LATENCY_REPORTS.append(d2m)
        rnd = evaluate_coreset(toy_run.train, EVAL_ARCH, 10, protocol, toy_run.test,
                               fork_rng(seed, "accept/random"), toy_run.cfg.augment)
        rows[seed] = (d2m, rnd)
    return rows, time.perf_counter() - t0


@criterion(3, "toy margin over random coreset", 1800)
def test_toy_margin(toy_run, margin_reports):
    rows, eval_seconds = margin_reports
    d2m = [a for r, _ in rows.values() for a in r.accuracies]
    rnd = [a for _, r in rows.values() for a in r.accuracies]
    margin = np.mean(d2m) - np.mean(rnd)
    total = toy_run.pretrain_seconds + sum(toy_run.distill_seconds.values()) + eval_seconds
    detail = (f"d2m {100 * np.mean(d2m):.1f}±{100 * np.std(d2m):.1f} vs random "
              f"{100 * np.mean(rnd):.1f}±{100 * np.std(rnd):.1f} (margin {100 * margin:+.1f} pts, {total:.0f}s)")
    assert len(d2m) == len(rnd) == 15
    assert margin >= 0.05, detail
    _check_runtime(total, 1800)
    return detail


# ---------------------------------------------------------------- 4

@criterion(4, "re-distillation cost")
def test_redistillation_cost(toy_run):
    ckpt = toy_run.distilled[0]
    protocol = dataclasses.replace(toy_run.cfg.eval, trials=1)
    before = step_calls()
    reports = []
    for ipc in (1, 10, 50):
        r = evaluate_latency_matched(ckpt, EVAL_ARCH, ipc, protocol, toy_run.train, toy_run.test,
                                     fork_rng(ipc, "accept/ipc"), toy_run.cfg.augment)
        LATENCY_REPORTS.append(r)
        reports.append(r)
    assert step_calls() == before
    assert all(r.distill_steps_during_eval == 0 for r in reports)
    walls = {r.distill_seconds for r in reports}
    assert len(walls) == 1 and None not in walls
    return f"0 distill steps across ipc 1/10/50; distill wall time {walls.pop():.1f}s in all three"


# ---------------------------------------------------------------- 5

@criterion(5, "storage scaling", 1)
def test_storage_scaling():
    start = time.perf_counter()
    gen = build_generator(64, 3, (3, 16, 16), fork_rng(0, "storage"), 64)
    from d2m.models import generator_to_checkpoint
    ckpt = generator_to_checkpoint(gen, "distilled")
    ipcs = list(range(1, 201))
    d2m = [distillation_storage("d2m", i, ckpt) for i in ipcs]
    pix = [distillation_storage("pixel", i, (3, 16, 16), 3) for i in ipcs]
    assert len(set(d2m)) == 1
    assert all(p == i * pix[0] for i, p in zip(ipcs, pix))
    cross = storage_crossover(d2m[0], (3, 16, 16), 3)
    at = lambda i: distillation_storage("pixel", i, (3, 16, 16), 3)
    assert at(cross) >= d2m[0] and (cross == 1 or at(cross - 1) < d2m[0])
    _check_runtime(time.perf_counter() - start, 1)
    return f"d2m {d2m[0]} scalars at every ipc; pixels {pix[0]}/ipc; crossover at ipc {cross}"


# ---------------------------------------------------------------- 6

@criterion(6, "budget discipline")
def test_budget_discipline(margin_reports, toy_run):
    reports = list(LATENCY_REPORTS)
    assert reports, "no latency-matched reports were produced"
    worst = 0.0
    for r in reports:
        for g, t in zip(r.gen_seconds, r.train_seconds):
            worst = max(worst, (g + t) / r.budget_seconds)
            assert g + t <= 1.05 * r.budget_seconds, f"{r.method} ipc {r.ipc}: {g + t:.2f}s > 1.05 x {r.budget_seconds:.2f}s"
    trials = sum(len(r.accuracies) for r in reports)
    return f"{trials} trials in {len(reports)} reports; worst (gen+train)/budget = {worst:.3f}"


# ---------------------------------------------------------------- 7

@criterion(7, "NAS proxy sanity", 2700)
def test_nas_proxy(toy_run):
    assert spearman([1, 2, 3, 4, 5], [1, 2, 3, 4, 5]) == 1.0
    assert spearman([1, 2, 3, 4, 5], [5, 4, 3, 2, 1]) == -1.0
    assert spearman([1, 2, 3, 4, 5], [2, 4, 1, 3, 5]) == pytest.approx(0.5)
    assert spearman([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5)
    t0 = time.perf_counter()
    cfg = toy_run.cfg
    specs = grid_specs("reduced")
    assert len(specs) == 32
    val = make_toy_dataset(cfg.toy, "val", 100)
    proxy_protocol = dataclasses.replace(cfg.eval, epochs=cfg.nas.proxy_epochs)
    full_protocol = dataclasses.replace(cfg.eval, epochs=cfg.nas.full_epochs)
    reference = rank_architectures(toy_run.train.as_batch(), specs, full_protocol, val,
                                   fork_rng(cfg.seed, "accept/nas/full"), cfg.augment)
    wins, rhos = 0, []
    for seed in SEEDS:
        ipc = cfg.nas.proxy_ipc
        proxies = {"d2m": generate(toy_run.distilled[seed], balanced_labels(3, ipc), seed),
                   "random": random_coreset(toy_run.train, ipc, fork_rng(seed, "accept/nas/random"))}
        result = nas_experiment(toy_run.train, val, proxies, specs, proxy_protocol, full_protocol,
                                fork_rng(seed, "accept/nas"), cfg.augment, reference=reference)
        rho_d, rho_r = result.correlations["d2m"], result.correlations["random"]
        rhos.append((rho_d, rho_r))
        wins += rho_d is not None and (rho_r is None or rho_d >= rho_r)
    total = time.perf_counter() - t0 + toy_run.pretrain_seconds + sum(toy_run.distill_seconds.values())
    detail = "rho d2m/random per seed: " + ", ".join(
        f"{'nan' if d is None else f'{d:.2f}'}/{'nan' if r is None else f'{r:.2f}'}" for d, r in rhos)
    assert wins >= 2, detail
    _check_runtime(total, 2700)
    return f"{detail} ({total:.0f}s)"


# ---------------------------------------------------------------- 8

@criterion(8, "ablation observability")
def test_ablation_observability():
    ds = make_toy_dataset(ToySpec(per_class=40, seed=5))
    pool = ModelPoolSpec(((ArchSpec("convnet", 2, 16), 1.0), (ArchSpec("resnet-small", 2, 8), 1.0)))
    gen = build_generator(16, 3, (3, 16, 16), fork_rng(0, "ablate"), 16)
    from d2m.models import generator_to_checkpoint
    ckpt = generator_to_checkpoint(gen, "pretrained")
    traces = {}
    for lam in (0.0, 10.0, 100.0):
        for temp in (1.0, 4.0, 64.0):
            cfg = DistillConfig(lambda_balance=lam, temperature=temp, epochs=1, batch_size=32, pool=pool,
                                latent_dim=16, generator_width=16, lr_generator=1e-3, generator_optimizer="adam")
            log = []
            distill(ckpt, ds, cfg, fork_rng(0, "ablate/run"), log=log.append)
            assert log and all(math.isfinite(r["L_EM"]) and math.isfinite(r["L_PM"]) for r in log)
            if lam == 0.0:
                assert all(r["L"] == r["L_EM"] for r in log)
            else:
                assert all(math.isclose(r["L"], r["L_EM"] + lam * r["L_PM"], rel_tol=1e-5) for r in log)
            traces[lam, temp] = ([r["L_EM"] for r in log], [r["L_PM"] for r in log])
    # the prediction term responds to temperature
    assert traces[0.0, 1.0][1] != traces[0.0, 64.0][1]
    return f"{len(traces)} runs; L == L_EM exactly at lambda 0"


# ---------------------------------------------------------------- 9

@criterion(9, "determinism")
def test_determinism():
    from d2m.core import PretrainSettings
    from d2m.evaluate import Budget

    spec = ToySpec(per_class=30, seed=9)
    ds, test = make_toy_dataset(spec), make_toy_dataset(spec, "test", 20)
    pool = ModelPoolSpec(((ArchSpec("convnet", 2, 16), 1.0),))
    cfg = DistillConfig(epochs=2, batch_size=32, pool=pool, latent_dim=16, generator_width=16,
                        lr_generator=1e-3, generator_optimizer="adam", seed=4)
    protocol = EvalProtocol(epochs=10, batch_size=64, trials=2, generation_multiplier=2)

    def pipeline():
        gen = build_generator(16, 3, (3, 16, 16), fork_rng(1, "det/gen"), 16)
        disc = build_discriminator(3, (3, 16, 16), fork_rng(1, "det/disc"), 16)
        pre = pretrain_gan(ds, gen, disc, 1, fork_rng(1, "det/pre"), PretrainSettings(batch_size=32))
        out = distill(pre, ds, cfg)
        # an explicit, generous budget keeps the wall-clock guard out of the comparison
        lm = evaluate_latency_matched(out, ArchSpec("convnet", 2, 16), 2, protocol, ds, test,
                                      fork_rng(2, "det/eval"), budget=Budget(1e6, []))
        base = evaluate_coreset(ds, ArchSpec("convnet", 2, 16), 2, protocol, test, fork_rng(2, "det/base"))
        assert not any(lm.truncated)
        return pre.digest(), out.digest(), lm.accuracies, base.accuracies

    first, second = pipeline(), pipeline()
    assert first == second
    return f"checkpoint digests {first[1][:12]} reproduced; accuracies {first[2]}"
