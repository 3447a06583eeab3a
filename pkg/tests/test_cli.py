import json

import numpy as np
import pytest
from PIL import Image

from d2m.cli import main
from d2m.core import load_checkpoint, read_records

TINY = """
lambda: 10
T: 4
B: 32
K: 2
eta_g: 0.001
generator_optimizer: adam
latent_dim: 8
generator_width: 8
pool:
  - convnet-d1-w8-relu-instance-avg
  - resnet-small-d2-w4-relu-instance-avg
pretrain: {epochs: 1, batch_size: 32, disc_width: 8}
eval: {epochs: 40, batch_size: 64, trials: 2, budget_reps: 1, generation_multiplier: 2,
       arch: convnet-d1-w8-relu-instance-avg}
nas: {proxy_ipc: 2, proxy_epochs: 1, full_epochs: 1, val_fraction: 0.2}
toy: {class_count: 3, per_class: 12, image_shape: [3, 16, 16], seed: 1}
"""

GRID = """
depths: [1]
widths: [8]
activations: [relu, sigmoid]
normalizations: [none]
poolings: [max, avg]
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.yaml").write_text(TINY)
    (d / "grid.yaml").write_text(GRID)
    cfg = str(d / "tiny.yaml")
    assert main(["pretrain", "--config", cfg, "--data", "toy", "--out", str(d / "pre.d2m")]) == 0
    assert main(["distill", "--config", cfg, "--data", "toy", "--ckpt", str(d / "pre.d2m"),
                 "--out", str(d / "d2m.d2m")]) == 0
    return d, cfg


def _digest(cfg):
    from d2m.core import load_config_file
    return load_config_file(cfg).digest()


def test_pretrain_and_distill_outputs(run):
    d, cfg = run
    pre, dist = load_checkpoint(d / "pre.d2m"), load_checkpoint(d / "d2m.d2m")
    assert pre.stage == "pretrained" and dist.stage == "distilled"
    assert (d / "pre.d2m").stat().st_size == (d / "d2m.d2m").stat().st_size
    steps = list(read_records(d / "d2m.steps.jsonl"))
    assert len(steps) == 4 and all(r["config_digest"] == _digest(cfg) for r in steps)
    assert all({"L", "L_EM", "L_PM"} <= set(r) for r in steps)
    assert all(r["config_digest"] == _digest(cfg) for r in list(read_records(d / "pre.steps.jsonl")))


def test_distill_resume_reproduces_digest(run):
    d, cfg = run
    out = d / "resumed.d2m"
    args = ["distill", "--config", cfg, "--data", "toy", "--ckpt", str(d / "pre.d2m"), "--out", str(out)]
    assert main(args + ["--stop-after", "1"]) == 0
    assert not out.exists()
    assert main(args + ["--resume"]) == 0
    assert load_checkpoint(out).digest() == load_checkpoint(d / "d2m.d2m").digest()
    assert [r["step"] for r in list(read_records(out.with_suffix(".steps.jsonl")))] == [0, 1, 2, 3]


def test_generate(run, capsys):
    d, _ = run
    out = d / "gen.npz"
    assert main(["generate", "--ckpt", str(d / "d2m.d2m"), "--ipc", "4", "--seed", "2", "--out", str(out)]) == 0
    z = np.load(out)
    assert z["images"].shape == (12, 3, 16, 16)
    assert np.bincount(z["labels"]).tolist() == [4, 4, 4]
    assert out.with_suffix(".png").exists()


def test_eval_three_ipcs_with_baseline(run):
    d, cfg = run
    out = d / "eval.jsonl"
    assert main(["eval", "--config", cfg, "--data", "toy", "--ckpt", str(d / "d2m.d2m"), "--ipc", "1,2,3",
                 "--baseline", "random", "--out", str(out)]) == 0
    recs = list(read_records(out))
    assert all(r["config_digest"] == _digest(cfg) for r in recs)
    summaries = [r for r in recs if r["kind"] == "summary"]
    d2m = [s for s in summaries if s["method"] == "d2m"]
    assert [s["ipc"] for s in d2m] == [1, 2, 3]
    assert len({s["distill_seconds"] for s in d2m}) == 1
    assert all("mean" in s and "std" in s for s in summaries)
    assert len([r for r in recs if r["kind"] == "paired"]) == 3
    run_rec = next(r for r in recs if r["kind"] == "eval-run")
    assert run_rec["distill_steps"] == 0
    storage = [r for r in recs if r["kind"] == "storage"]
    assert len({r["d2m"] for r in storage}) == 1
    assert [r["pixel"] for r in storage] == [768 * 3 * i for i in (1, 2, 3)]


def test_eval_cross_arch(run):
    d, cfg = run
    out = d / "cross.jsonl"
    assert main(["eval", "--config", cfg, "--data", "toy", "--ckpt", str(d / "d2m.d2m"), "--ipc", "1",
                 "--arch", "convnet-d1-w8-relu-none-max,convnet-d1-w8-sigmoid-none-avg",
                 "--trials", "1", "--out", str(out)]) == 0
    cross = [r for r in list(read_records(out)) if r["kind"] == "cross-arch"]
    assert [r["arch"] for r in cross][-1] == "average" and len(cross) == 3


def test_nas_and_report(run):
    d, cfg = run
    out = d / "nas.jsonl"
    assert main(["nas", "--config", cfg, "--data", "toy", "--ckpt", str(d / "d2m.d2m"), "--baseline", "random",
                 "--grid", str(d / "grid.yaml"), "--out", str(out)]) == 0
    recs = list(read_records(out))
    corr = {r["source"]: r for r in recs if r["kind"] == "nas-correlation"}
    assert set(corr) == {"d2m", "random"}
    assert len([r for r in recs if r["kind"] == "nas-rank" and r["source"] == "full"]) == 4

    fig_dir = d / "figs"
    inputs = [str(out), str(d / "d2m.steps.jsonl")]
    if (d / "eval.jsonl").exists():
        inputs.append(str(d / "eval.jsonl"))
    assert main(["report", "--out", str(fig_dir), *inputs]) == 0
    assert (fig_dir / "nas.png").exists() and (fig_dir / "loss_traces.png").exists()
    summary = list(read_records(fig_dir / "summary.jsonl"))
    assert summary and all(_digest(cfg) in s["config_digests"] for s in summary)


def test_image_folder_data(tmp_path, run):
    _, cfg = run
    rng = np.random.default_rng(0)
    for c in ("a", "b", "c"):
        (tmp_path / "imgs" / c).mkdir(parents=True)
        for i in range(6):
            Image.fromarray(rng.integers(0, 255, (16, 16, 3), dtype=np.uint8)).save(tmp_path / "imgs" / c / f"{i}.png")
    out = tmp_path / "p.d2m"
    assert main(["pretrain", "--config", cfg, "--data", str(tmp_path / "imgs"), "--out", str(out)]) == 0
    assert load_checkpoint(out).class_count == 3


@pytest.mark.parametrize("argv", [
    ["pretrain", "--data", "/nonexistent/dir", "--out", "x.d2m"],
    ["distill", "--data", "toy", "--out", "x.d2m"],
    ["eval", "--ckpt", "/nonexistent.d2m", "--out", "x.jsonl"],
    ["report", "--out", "figs", "/nonexistent.jsonl"],
])
def test_errors_exit_nonzero(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(argv) != 0
    assert "error" in capsys.readouterr().err


def test_bad_config_exits_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("lambda: -1\n")
    assert main(["pretrain", "--config", str(bad), "--out", str(tmp_path / "x.d2m")]) == 2
    assert "lambda_balance" in capsys.readouterr().err
