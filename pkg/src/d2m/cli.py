"""Command-line entry point: ``d2m {pretrain,distill,generate,eval,nas,report}``.

Examples::

    d2m pretrain --config configs/toy.yaml --data toy --out runs/pre.d2m
    d2m distill  --config configs/toy.yaml --data toy --ckpt runs/pre.d2m --out runs/d2m.d2m
    d2m eval     --config configs/toy.yaml --data toy --ckpt runs/d2m.d2m --ipc 1,10,50 \\
                 --baseline random --out runs/eval.jsonl
    d2m nas      --config configs/toy.yaml --data toy --ckpt runs/d2m.d2m --baseline random \\
                 --out runs/nas.jsonl
    d2m report   --out runs/figures runs/eval.jsonl runs/nas.jsonl runs/d2m.steps.jsonl

``--data`` takes ``toy`` (the procedural shapes set described by the config's
``toy`` section) or a directory of ``<class>/<image>`` files; a directory
holding ``train/`` and ``test/`` subfolders supplies its own test split.
All JSONL outputs carry the config digest of the run that produced them.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .core import (ArchSpec, CheckpointError, ConfigError, DistillConfig, RecordWriter,
                   ToySpec, fork_rng, load_checkpoint, load_config, load_config_file,
                   read_records, save_checkpoint, write_records)
from .data import Dataset, DatasetError, balanced_labels, load_image_folder, make_toy_dataset

TOY_TEST_PER_CLASS = 200
HOLDOUT_FRACTION = 0.2


class CliError(RuntimeError):
    pass


def _config(args) -> DistillConfig:
    cfg = load_config_file(args.config) if args.config else load_config("")
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def load_data(spec: str | None, cfg: DistillConfig) -> tuple[Dataset, Dataset]:
    """Resolve ``--data`` into ``(train, test)``."""
    if spec in (None, "toy"):
        toy = cfg.toy or ToySpec()
        return make_toy_dataset(toy), make_toy_dataset(toy, "test", TOY_TEST_PER_CLASS)
    root = Path(spec)
    if not root.is_dir():
        raise DatasetError(f"data directory not found: {root}")
    if (root / "train").is_dir() and (root / "test").is_dir():
        return load_image_folder(root / "train"), load_image_folder(root / "test")
    full = load_image_folder(root)
    return full.split(HOLDOUT_FRACTION, fork_rng(cfg.seed, "data/holdout"))


def _tagged(writer: RecordWriter, digest: str):
    def write(record: dict) -> None:
        writer.write({**record, "config_digest": digest})
    return write


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"expected a comma-separated integer list, got {text!r}") from None
    if not values or min(values) < 1:
        raise CliError(f"ipc values must be positive integers, got {text!r}")
    return values


def _archs(text: str | None, cfg: DistillConfig, train: Dataset) -> list[ArchSpec | None]:
    if not text or text == "default":
        return [None]
    return [None if t == "default" else ArchSpec.parse(t) for t in text.split(",")]


def _need(value, flag: str):
    if value is None:
        raise CliError(f"{flag} is required for this command")
    return value


def cmd_pretrain(args) -> int:
    from .models import build_discriminator, build_generator
    from .pretrain import discriminator_policy, pretrain_gan

    cfg = _config(args)
    out = Path(_need(args.out, "--out"))
    train, _ = load_data(args.data, cfg)
    gen = build_generator(cfg.latent_dim, train.class_count, train.image_shape,
                          fork_rng(cfg.seed, "generator-init"), cfg.generator_width)
    disc = build_discriminator(train.class_count, train.image_shape, fork_rng(cfg.seed, "discriminator-init"),
                               cfg.pretrain.disc_width, cfg.pretrain.spectral_norm)
    policy = discriminator_policy(cfg)
    with RecordWriter(out.with_suffix(".steps.jsonl")) as w:
        ckpt = pretrain_gan(train, gen, disc, cfg.pretrain.epochs, fork_rng(cfg.seed, "pretrain"), cfg.pretrain,
                            cfg.digest(), log=_tagged(w, cfg.digest()), policy=policy)
    save_checkpoint(ckpt, out)
    print(f"pretrained checkpoint {out} digest={ckpt.digest()[:16]} params={ckpt.param_count}")
    return 0


def cmd_distill(args) -> int:
    from .distill import distill, snapshot_paths

    cfg = _config(args)
    out = Path(_need(args.out, "--out"))
    ckpt_in = load_checkpoint(_need(args.ckpt, "--ckpt"))
    train, _ = load_data(args.data, cfg)
    snap = out.with_suffix(".snapshot.d2m")
    log_path = out.with_suffix(".steps.jsonl")
    mode = "w"
    if args.resume and snap.exists():
        done = json.loads(snapshot_paths(snap)[1].read_text())["epoch"]
        kept = [r for r in read_records(log_path) if r["epoch"] < done] if log_path.exists() else []
        write_records(log_path, kept)
        mode = "a"
    with RecordWriter(log_path, mode) as w:
        ckpt = distill(ckpt_in, train, cfg, log=_tagged(w, cfg.digest()), snapshot=snap,
                       resume=args.resume, stop_after=args.stop_after)
    if ckpt.extra["distill_epochs"] < cfg.epochs:
        print(f"stopped after epoch {ckpt.extra['distill_epochs']}; resume with --resume")
        return 0
    save_checkpoint(ckpt, out)
    print(f"distilled checkpoint {out} digest={ckpt.digest()[:16]} steps={ckpt.extra['distill_steps']}")
    return 0


def cmd_generate(args) -> int:
    from .distill import generate
    from .report import save_image_grid

    ckpt = load_checkpoint(_need(args.ckpt, "--ckpt"))
    out = Path(_need(args.out, "--out"))
    ipc = _int_list(args.ipc or "10")[0]
    seed = 0 if args.seed is None else args.seed
    batch = generate(ckpt, balanced_labels(ckpt.class_count, ipc), seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez(out, images=batch.pixels.numpy(), labels=batch.labels.numpy())
    save_image_grid(batch, out.with_suffix(".png"))
    print(f"wrote {len(batch)} images to {out}")
    return 0


def cmd_eval(args) -> int:
    from .distill import step_calls
    from .evaluate import (cross_architecture_eval, distillation_storage, evaluate_coreset,
                           evaluate_latency_matched, storage_crossover)
    from .report import format_summary

    cfg = _config(args)
    ckpt = load_checkpoint(_need(args.ckpt, "--ckpt"))
    out = Path(_need(args.out, "--out"))
    train, test = load_data(args.data, cfg)
    protocol = cfg.eval if args.trials is None else dataclasses.replace(cfg.eval, trials=args.trials)
    ipcs = _int_list(args.ipc or "10")
    archs = _archs(args.arch, cfg, train)
    digest = cfg.digest()
    calls_before = step_calls()

    with RecordWriter(out) as w:
        write = _tagged(w, digest)
        for ipc in ipcs:
            if len(archs) > 1:
                table = cross_architecture_eval(ckpt, [a.bind(train.image_shape, train.class_count) for a in archs],
                                                ipc, protocol, train, test,
                                                fork_rng(cfg.seed, f"eval/cross/{ipc}"), cfg.augment)
                reports = [r for r in table.rows.values() if not isinstance(r, str)]
                for rec in table.to_records():
                    write({**rec, "ipc": ipc})
            else:
                arch = archs[0]
                tag = arch.tag if arch else "default"
                reports = [evaluate_latency_matched(ckpt, arch, ipc, protocol, train, test,
                                                    fork_rng(cfg.seed, f"eval/{tag}/{ipc}"), cfg.augment)]
            for rep in reports:
                for rec in rep.to_records():
                    write(rec)
                print(format_summary(rep.summary()))
                if args.baseline == "random":
                    base = evaluate_coreset(train, ArchSpec.parse(rep.arch), ipc, protocol, test,
                                            fork_rng(cfg.seed, f"baseline/{rep.arch}/{ipc}"), cfg.augment, digest)
                    for rec in base.to_records():
                        write(rec)
                    write({"kind": "paired", "ipc": ipc, "arch": rep.arch, "d2m_mean": rep.mean,
                           "random_mean": base.mean, "margin": rep.mean - base.mean})
                    print(format_summary(base.summary()))
        d2m_count = distillation_storage("d2m", ipcs[0], ckpt)
        crossover = storage_crossover(d2m_count, train.image_shape, train.class_count)
        for ipc in ipcs:
            write({"kind": "storage", "ipc": ipc, "d2m": distillation_storage("d2m", ipc, ckpt),
                   "pixel": distillation_storage("pixel", ipc, train.image_shape, train.class_count),
                   "crossover_ipc": crossover})
        steps = step_calls() - calls_before
        write({"kind": "eval-run", "ipcs": ipcs, "distill_steps": steps,
               "distill_seconds": ckpt.extra.get("distill_seconds"), "checkpoint_digest": ckpt.digest()})
    print(f"distillation steps during evaluation: {steps}; storage crossover at ipc={crossover}")
    return 0


def _grid(arg: str | None, cfg: DistillConfig) -> list[ArchSpec]:
    from .nas import GRIDS, grid_specs

    name = arg or cfg.nas.grid
    if name in GRIDS:
        return grid_specs(name)
    import yaml

    path = Path(name)
    if not path.exists():
        raise CliError(f"grid must be one of {sorted(GRIDS)} or a YAML file, got {name!r}")
    raw = yaml.safe_load(path.read_text())
    if isinstance(raw, dict):
        return grid_specs({k: tuple(v) for k, v in raw.items()})
    return [ArchSpec.from_dict(item) for item in raw]


def cmd_nas(args) -> int:
    from .distill import generate
    from .evaluate import random_coreset
    from .nas import nas_experiment

    cfg = _config(args)
    out = Path(_need(args.out, "--out"))
    data, _ = load_data(args.data, cfg)
    train, val = data.split(cfg.nas.val_fraction, fork_rng(cfg.seed, "nas/split"))
    specs = _grid(args.grid, cfg)
    ipc = _int_list(args.ipc)[0] if args.ipc else cfg.nas.proxy_ipc
    proxies = {}
    if args.ckpt:
        ckpt = load_checkpoint(args.ckpt)
        proxies["d2m"] = generate(ckpt, balanced_labels(ckpt.class_count, ipc), cfg.seed)
    # the random-coreset proxy is always ranked so both correlations are reported
    proxies["random"] = random_coreset(train, ipc, fork_rng(cfg.seed, "nas/random-proxy"))
    result = nas_experiment(train, val, proxies, specs,
                            dataclasses.replace(cfg.eval, epochs=cfg.nas.proxy_epochs),
                            dataclasses.replace(cfg.eval, epochs=cfg.nas.full_epochs),
                            fork_rng(cfg.seed, "nas"), cfg.augment)
    with RecordWriter(out) as w:
        for rec in result.to_records():
            _tagged(w, cfg.digest())(rec)
    for source, rho in result.correlations.items():
        print(f"{source:>6} proxy: spearman rho = {'undefined' if rho is None else f'{rho:.3f}'}")
    if result.reference.skipped:
        print(f"skipped {len(result.reference.skipped)} infeasible specs")
    return 0


def cmd_report(args) -> int:
    from .report import render_report

    out = Path(_need(args.out, "--out"))
    if not args.inputs:
        raise CliError("report needs at least one JSONL input")
    for p in args.inputs:
        if not Path(p).exists():
            raise CliError(f"input not found: {p}")
    made = render_report(args.inputs, out)
    for p in made:
        print(f"wrote {p}")
    print(f"wrote {out / 'summary.jsonl'}")
    return 0


COMMANDS = {"pretrain": cmd_pretrain, "distill": cmd_distill, "generate": cmd_generate,
            "eval": cmd_eval, "nas": cmd_nas, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="d2m", description="Data-to-model distillation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config file (defaults apply when omitted)")
        p.add_argument("--data", help="'toy' or an image-folder directory")
        p.add_argument("--ckpt", help="input .d2m checkpoint")
        p.add_argument("--out", help="output path")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--ipc", help="images per class; comma list for eval, e.g. 1,10,50")
        p.add_argument("--arch", help="comma list of architecture tags, e.g. convnet-d2-w128-relu-instance-avg")
        p.add_argument("--grid", help="NAS grid: reduced, full, or a YAML file")
        p.add_argument("--trials", type=int, help="overrides eval.trials")
        p.add_argument("--baseline", choices=["random"], help="also run the random-coreset baseline")
        if name == "distill":
            p.add_argument("--resume", action="store_true", help="continue from the epoch snapshot")
            p.add_argument("--stop-after", type=int, help="stop once this many epochs are done")
        if name == "report":
            p.add_argument("inputs", nargs="*", help="JSONL step logs or reports")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (CliError, ConfigError, DatasetError, CheckpointError, FileNotFoundError,
            ValueError, RuntimeError) as exc:
        print(f"d2m {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
