import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from defectgen import cli
from defectgen.cli import (
    CommandConfig,
    EXIT_STATE,
    EXIT_USAGE,
    _defect_contrast,
    _proportional,
    cmd_evaluate,
    cmd_generate,
    cmd_make_bench,
    cmd_report,
    cmd_train,
    format_comparison_table,
    load_config,
    substream,
    substream_torch,
)
from defectgen.errors import ParameterError
from defectgen.metrics import MetricsReport

BENCH = {
    "image_size": 32, "n_train": 6, "n_seed": 4,
    "n_test_defect": 4, "n_test_good": 2,
}
MODEL = {
    "factor": 4, "latent_channels": 2, "codec_widths": [8, 8],
    "denoiser_channels": [8, 8], "zeta_widths": [4, 4],
    "d_lang": 8, "time_dim": 8,
}
TRIALS = {"n_images": 4, "n_pos": 40, "n_neg": 40, "n_trials": 1, "d_f": 32}


def _cfg(command, run_root, **kw):
    return CommandConfig(command=command, run_root=str(run_root), **kw)


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    """One tiny end-to-end pass: bench, train, generate, evaluate, report."""
    root = tmp_path_factory.mktemp("runs")
    out = {"root": root}

    out["bench"] = cmd_make_bench(_cfg("make-bench", root, seed=1, bench=BENCH))
    bench_dir = str(out["bench"] / "bench" / "toy")

    out["train"] = cmd_train(_cfg(
        "train", root, seed=1, bench_dir=bench_dir, model=MODEL,
        schedule={"t_train": 50},
        codec={"epochs": 3}, pretrain={"steps": 5}, finetune={"steps": 5},
    ))
    ckpt_dir = str(out["train"] / "checkpoint")

    out["generate"] = cmd_generate(_cfg(
        "generate", root, seed=1, bench_dir=bench_dir, checkpoint_dir=ckpt_dir,
        n_samples=4, generation={"t1": 2, "t2": 2, "t3": 1},
        adaptation={"t_ft": 2},
    ))
    gen_dir = str(out["generate"] / "generated")

    out["evaluate"] = cmd_evaluate(_cfg(
        "evaluate", root, seed=1, bench_dir=bench_dir, checkpoint_dir=ckpt_dir,
        generated_dir=gen_dir, trials=TRIALS, n_cutpaste=6,
    ))

    out["report"] = cmd_report(_cfg(
        "report", root, seed=1, evaluate_dir=str(out["evaluate"]),
        train_dir=str(out["train"]),
    ))
    return out


def test_pipeline_artifacts(runs):
    assert (runs["bench"] / "bench" / "toy" / "benchmark.json").exists()
    assert (runs["bench"] / "resolved_config.json").exists()

    assert (runs["train"] / "checkpoint" / "manifest.json").exists()
    assert (runs["train"] / "loss_traces.json").exists()
    manifest = json.loads((runs["train"] / "manifest.json").read_text())
    assert manifest["epsilon_codec"] > 0

    gen_manifest = json.loads((runs["generate"] / "manifest.json").read_text())
    assert gen_manifest["n_generated"] + gen_manifest["skipped"] == 4
    pngs = sorted((runs["generate"] / "generated" / "defect").glob("*.png"))
    assert len(pngs) == gen_manifest["n_generated"]
    masks = sorted((runs["generate"] / "generated" / "ground_truth").glob("*.png"))
    assert len(masks) == len(pngs)

    table = (runs["evaluate"] / "comparison.txt").read_text()
    for col in ("Pixel-AUC", "PRO", "AP", "IAP", "IAP90"):
        assert col in table
    for method in ("diffusion", "genuine-only", "cut-paste"):
        assert method in table
        rep = MetricsReport.from_json(
            (runs["evaluate"] / f"report_{method}.json").read_text()
        )
        assert 0.0 <= rep.ap <= 1.0

    assert (runs["report"] / "pr_curves.png").exists()
    assert (runs["report"] / "instance_recall_curves.png").exists()
    assert (runs["report"] / "loss_traces.png").exists()
    assert (runs["report"] / "summary.txt").read_text() == table


def test_generate_replay_is_bit_identical(runs):
    cfg_data = json.loads((runs["generate"] / "resolved_config.json").read_text())
    cfg = CommandConfig(**cfg_data)
    rerun = cmd_generate(cfg)
    old = sorted((runs["generate"] / "generated" / "defect").glob("*.png"))
    new = sorted((rerun / "generated" / "defect").glob("*.png"))
    assert len(old) == len(new) > 0
    for a, b in zip(old, new):
        assert a.read_bytes() == b.read_bytes()
    old_m = json.loads((runs["generate"] / "manifest.json").read_text())
    new_m = json.loads((rerun / "manifest.json").read_text())
    assert old_m["sample_seeds"] == new_m["sample_seeds"]


def test_cli_exit_codes(runs, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.RUN_ROOT_ENV, str(tmp_path))
    runner = CliRunner()

    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"bench": BENCH, "volume": 11}))
    res = runner.invoke(cli.main, ["make-bench", "--config", str(bad)])
    assert res.exit_code == EXIT_USAGE
    err = json.loads(res.output.strip().splitlines()[-1])
    assert err["error"] == "ParameterError"
    assert "volume" in err["message"]

    # evaluate without any generated samples is a usage error
    empty = tmp_path / "empty_gen"
    (empty / "defect").mkdir(parents=True)
    (empty / "ground_truth").mkdir()
    ev = tmp_path / "ev.json"
    ev.write_text(json.dumps({
        "bench_dir": str(runs["bench"] / "bench" / "toy"),
        "generated_dir": str(empty),
        "trials": TRIALS,
    }))
    res = runner.invoke(cli.main, ["evaluate", "--config", str(ev)])
    assert res.exit_code == EXIT_USAGE

    # missing checkpoint directory is a state error
    gen = tmp_path / "gen.json"
    gen.write_text(json.dumps({
        "bench_dir": str(runs["bench"] / "bench" / "toy"),
        "checkpoint_dir": str(tmp_path / "nowhere"),
    }))
    res = runner.invoke(cli.main, ["generate", "--config", str(gen)])
    assert res.exit_code == EXIT_STATE

    # replay manifest must match the invoked command
    res = runner.invoke(cli.main, [
        "train", "--replay", str(runs["generate"] / "manifest.json"),
    ])
    assert res.exit_code == EXIT_USAGE


def test_cli_replay_flag(runs, monkeypatch):
    monkeypatch.setenv(cli.RUN_ROOT_ENV, str(runs["root"]))
    runner = CliRunner()
    before = set(runs["root"].glob("generate-*"))
    res = runner.invoke(cli.main, [
        "generate", "--replay", str(runs["generate"] / "manifest.json"),
    ])
    assert res.exit_code == 0, res.output
    new_dirs = set(runs["root"].glob("generate-*")) - before
    assert len(new_dirs) == 1
    rerun = new_dirs.pop()
    old = sorted((runs["generate"] / "generated" / "defect").glob("*.png"))
    new = sorted((rerun / "generated" / "defect").glob("*.png"))
    for a, b in zip(old, new):
        assert a.read_bytes() == b.read_bytes()


def test_load_config_rejects_unknown_keys(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"model": {}}))
    with pytest.raises(ParameterError):
        load_config("make-bench", str(p), None, None)
    p.write_text("{nope")
    with pytest.raises(ParameterError):
        load_config("make-bench", str(p), None, None)
    p.write_text(json.dumps({"seed": 3}))
    cfg = load_config("train", str(p), None, 2)
    assert cfg.seed == 3 and cfg.workers == 2
    cfg2 = load_config("train", str(p), 9, None)
    assert cfg2.seed == 9


def test_substreams_are_named_and_independent():
    a = substream(0, "generation").integers(2**31, size=4)
    b = substream(0, "generation").integers(2**31, size=4)
    c = substream(0, "codec").integers(2**31, size=4)
    d = substream(1, "generation").integers(2**31, size=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)
    t1 = substream_torch(0, "x").initial_seed()
    t2 = substream_torch(0, "x").initial_seed()
    assert t1 == t2


def test_proportional_split():
    assert _proportional(50, [4, 3, 3]) == [20, 15, 15]
    assert _proportional(4, [1, 1, 1]) == [2, 1, 1]
    assert sum(_proportional(7, [5, 2, 9])) == 7
    assert _proportional(0, [1, 2]) == [0, 0]


def test_defect_contrast_measures_masked_change():
    src = np.zeros((4, 4, 3), np.float32)
    img = src.copy()
    mask = np.zeros((4, 4), np.uint8)
    mask[1, 1] = 1
    img[1, 1] = (0.5, 0.1, 0.2)
    assert _defect_contrast(img, src, mask) == pytest.approx(0.5)


def test_format_comparison_table_layout():
    rep = MetricsReport(pixel_auc=0.9, pro=0.8, ap=0.7, iap=0.6, iap_at_k=0.5)
    text = format_comparison_table({"diffusion": rep})
    lines = text.strip().splitlines()
    assert len(lines) == 2
    assert "90.00" in lines[1] and "50.00" in lines[1]
