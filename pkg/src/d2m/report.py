"""Render JSONL step logs and reports into figures plus a summary record file."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .core import read_records, write_records  # noqa: E402

plt.rcParams.update({
    "figure.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
})


def _group(records: list[dict]) -> dict[str, list[dict]]:
    groups = defaultdict(list)
    for r in records:
        if "L_EM" in r and "L_PM" in r:
            groups["steps"].append(r)
        else:
            groups[r.get("kind", "other")].append(r)
    return groups


def plot_loss_traces(steps: list[dict], path: Path) -> Path:
    steps = sorted(steps, key=lambda r: r["step"])
    x = [r["step"] for r in steps]
    fig, axes = plt.subplots(1, 3, figsize=(9, 2.6), sharex=True)
    for ax, key in zip(axes, ("L_EM", "L_PM", "L")):
        ax.plot(x, [r[key] for r in steps], lw=0.8)
        ax.set_title(key)
        ax.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_accuracy(summaries: list[dict], path: Path) -> Path:
    by_method = defaultdict(dict)
    for s in summaries:
        by_method[s["method"]][s["ipc"]] = (s["mean"], s["std"])
    fig, ax = plt.subplots(figsize=(4.5, 3))
    for method, rows in sorted(by_method.items()):
        ipcs = sorted(rows)
        means = [rows[i][0] * 100 for i in ipcs]
        stds = [rows[i][1] * 100 for i in ipcs]
        ax.errorbar(ipcs, means, yerr=stds, marker="o", capsize=3, label=method)
    ax.set_xscale("log")
    ax.set_xlabel("images per class")
    ax.set_ylabel("test accuracy (%)")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_storage(rows: list[dict], path: Path) -> Path:
    rows = sorted(rows, key=lambda r: r["ipc"])
    ipcs = [r["ipc"] for r in rows]
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot(ipcs, [r["d2m"] for r in rows], marker="o", label="d2m (generator)")
    ax.plot(ipcs, [r["pixel"] for r in rows], marker="s", label="pixels")
    crossover = rows[0].get("crossover_ipc")
    if crossover is not None:
        ax.axvline(crossover, color="grey", ls="--", lw=0.8)
    ax.set_xlabel("images per class")
    ax.set_ylabel("stored scalars")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_nas(ranks: list[dict], correlations: list[dict], path: Path) -> Path:
    full = {r["index"]: r["score"] for r in ranks if r["source"] == "full"}
    sources = sorted({r["source"] for r in ranks} - {"full"})
    rho = {c["source"]: c["rho"] for c in correlations}
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for source in sources:
        pts = [(r["score"], full[r["index"]]) for r in ranks if r["source"] == source and r["index"] in full]
        if not pts:
            continue
        xs, ys = zip(*pts)
        label = source if rho.get(source) is None else f"{source} (rho={rho[source]:.2f})"
        ax.scatter(xs, ys, s=12, alpha=0.7, label=label)
    ax.set_xlabel("proxy validation accuracy")
    ax.set_ylabel("full-set validation accuracy")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def render_report(inputs: list[str | Path], out_dir: str | Path) -> list[Path]:
    """Read every JSONL input, draw the figures its records support, write ``summary.jsonl``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = [r for p in inputs for r in read_records(p)]
    groups = _group(records)
    made: list[Path] = []
    summary: list[dict] = []
    digests = sorted({r["config_digest"] for r in records if r.get("config_digest")})

    if groups["steps"]:
        made.append(plot_loss_traces(groups["steps"], out / "loss_traces.png"))
        last = max(groups["steps"], key=lambda r: r["step"])
        summary.append({"kind": "distill-summary", "steps": len(groups["steps"]),
                        "final_L": last["L"], "final_L_EM": last["L_EM"], "final_L_PM": last["L_PM"]})
    if groups["summary"]:
        made.append(plot_accuracy(groups["summary"], out / "accuracy.png"))
        for s in groups["summary"]:
            summary.append({"kind": "eval-summary", "method": s["method"], "ipc": s["ipc"], "arch": s["arch"],
                            "mean": s["mean"], "std": s["std"], "trials": len(s["accuracies"])})
    if groups["storage"]:
        made.append(plot_storage(groups["storage"], out / "storage.png"))
    if groups["nas-rank"]:
        made.append(plot_nas(groups["nas-rank"], groups["nas-correlation"], out / "nas.png"))
        summary.extend({"kind": "nas-summary", "source": c["source"], "rho": c["rho"]}
                       for c in groups["nas-correlation"])
    for s in summary:
        s["config_digests"] = digests
    write_records(out / "summary.jsonl", summary)
    return made


def format_summary(report_summary: dict) -> str:
    """One human-readable line: method, ipc, mean and std in percent."""
    s = report_summary
    return (f"{s['method']:>6} ipc={s['ipc']:<3} {s['arch']}: "
            f"{100 * s['mean']:.2f} ± {100 * s['std']:.2f}  (n={len(s['accuracies'])})")


def save_image_grid(batch, path, columns: int | None = None) -> Path:
    """Tile a batch of [-1, 1] images, one row per class."""
    labels = batch.labels.numpy()
    classes = sorted(set(labels.tolist()))
    per_row = columns or max(int((labels == c).sum()) for c in classes)
    per_row = min(per_row, 16)
    fig, axes = plt.subplots(len(classes), per_row, figsize=(per_row * 0.6, len(classes) * 0.6), squeeze=False)
    for r, c in enumerate(classes):
        idx = np.flatnonzero(labels == c)[:per_row]
        for j in range(per_row):
            ax = axes[r, j]
            ax.axis("off")
            if j < len(idx):
                img = (batch.pixels[idx[j]].permute(1, 2, 0).numpy() + 1.0) / 2.0
                ax.imshow(img.squeeze(), cmap="gray" if img.shape[-1] == 1 else None, vmin=0, vmax=1)
    fig.tight_layout(pad=0.1)
    fig.savefig(path)
    plt.close(fig)
    return Path(path)
