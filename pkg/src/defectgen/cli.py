"""Command-line entry points: make-bench, train, generate, evaluate, report.

Every command reads a single JSON config (unknown keys rejected), funnels
all randomness through one top-level seed expanded into named substreams,
and writes its outputs plus the fully resolved config and a manifest into
a fresh run directory named by timestamp and config hash.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
import time
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import click
import numpy as np
import torch

from . import harness, metrics, pipeline, trimap
from .errors import DefectGenError, ParameterError, StateError
from .harness import BenchmarkSpec, TrialConfig, ToyBenchmark
from .models import ModelBundle, ModelConfig, PromptSpec
from .pipeline import AdaptConfig, GenerationConfig
from .schedule import make_schedule

RUN_ROOT_ENV = "DEFECTGEN_RUN_ROOT"

EXIT_USAGE = 2
EXIT_STATE = 3
EXIT_ERROR = 1

METHOD_GENERATED = "diffusion"
METHOD_GENUINE = "genuine-only"
METHOD_CUTPASTE = "cut-paste"


def substream(seed: int, name: str) -> np.random.Generator:
    """Named, independent random substream of the top-level seed."""
    return np.random.default_rng(
        np.random.SeedSequence([seed, zlib.crc32(name.encode())])
    )


def substream_torch(seed: int, name: str) -> torch.Generator:
    child = int(substream(seed, name).integers(2**63))
    return torch.Generator().manual_seed(child)


def _from_dict(cls, data: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ParameterError(f"unknown keys in {where}: {sorted(unknown)}")
    for f in dataclasses.fields(cls):
        if f.name in data and isinstance(data[f.name], list):
            # dataclass tuple fields arrive as JSON lists
            if "tuple" in str(f.type):
                data[f.name] = tuple(data[f.name])
    return cls(**data)


@dataclass
class CommandConfig:
    """Fully resolved parameters of one CLI run."""

    command: str
    seed: int = 0
    workers: int = 1
    run_root: str = "runs"
    # make-bench / shared
    bench: dict = field(default_factory=dict)
    bench_dir: str = ""
    # train
    model: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    codec: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)
    checkpoint_dir: str = ""
    # generate
    n_samples: int = 50
    n_candidates: int = 0
    generation: dict = field(default_factory=dict)
    adaptation: dict = field(default_factory=dict)
    generated_dir: str = ""
    # evaluate / report
    trials: dict = field(default_factory=dict)
    n_cutpaste: int = 50
    evaluate_dir: str = ""
    train_dir: str = ""


_SECTION_KEYS = {
    "make-bench": {"seed", "workers", "run_root", "bench"},
    "train": {"seed", "workers", "run_root", "bench_dir", "model", "schedule",
              "codec", "pretrain", "finetune"},
    "generate": {"seed", "workers", "run_root", "bench_dir", "checkpoint_dir",
                 "n_samples", "n_candidates", "generation", "adaptation"},
    "evaluate": {"seed", "workers", "run_root", "bench_dir", "checkpoint_dir",
                 "generated_dir", "trials", "n_cutpaste"},
    "report": {"seed", "workers", "run_root", "evaluate_dir", "train_dir"},
}

_TRAIN_STAGE_DEFAULTS = {
    "codec": {"epochs": 40, "lr": 2e-3, "batch_size": 16,
              "seed_repeat": 8, "paste_aug": 40},
    "pretrain": {"steps": 1500, "lr": 2e-3, "batch_size": 16},
    "finetune": {"steps": 800, "lr": 1e-3, "batch_size": 8,
                 "rotation_aug": 40},
}

_SCHEDULE_DEFAULTS = {"t_train": 1000, "beta_start": 1e-4, "beta_end": 2e-2}


def load_config(command: str, path: str | None, seed: int | None,
                workers: int | None) -> CommandConfig:
    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ParameterError(f"cannot parse config {path}: {exc}") from exc
    allowed = _SECTION_KEYS[command]
    unknown = set(data) - allowed
    if unknown:
        raise ParameterError(
            f"unknown config keys for {command}: {sorted(unknown)}"
        )
    cfg = _from_dict(CommandConfig, {"command": command, **data}, "config")
    if seed is not None:
        cfg.seed = seed
    if workers is not None:
        cfg.workers = workers
    if os.environ.get(RUN_ROOT_ENV):
        cfg.run_root = os.environ[RUN_ROOT_ENV]
    return cfg


def _config_hash(cfg: CommandConfig) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:8]


def make_run_dir(cfg: CommandConfig) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(cfg.run_root)
    run = base / f"{cfg.command}-{stamp}-{_config_hash(cfg)}"
    i = 0
    while run.exists():
        i += 1
        run = base / f"{cfg.command}-{stamp}-{_config_hash(cfg)}-{i}"
    run.mkdir(parents=True)
    (run / "resolved_config.json").write_text(
        json.dumps(asdict(cfg), indent=2, sort_keys=True)
    )
    return run


def _write_manifest(run: Path, payload: dict) -> None:
    (run / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def _stage_params(cfg_section: dict, defaults: dict, where: str) -> dict:
    unknown = set(cfg_section) - set(defaults)
    if unknown:
        raise ParameterError(f"unknown keys in {where}: {sorted(unknown)}")
    return {**defaults, **cfg_section}


# ---------------------------------------------------------------- commands

def cmd_make_bench(cfg: CommandConfig) -> Path:
    spec = _from_dict(BenchmarkSpec, dict(cfg.bench), "bench")
    rng = substream(cfg.seed, "benchmark")
    bench = harness.make_toy_benchmark(spec, rng)
    run = make_run_dir(cfg)
    cat_dir = harness.save_benchmark(bench, run / "bench")
    _write_manifest(run, {
        "command": "make-bench",
        "category_dir": str(cat_dir),
        "benchmark_seed": bench.seed,
    })
    click.echo(f"benchmark written to {cat_dir}")
    return run


def _load_bench(cfg: CommandConfig) -> ToyBenchmark:
    if not cfg.bench_dir or not Path(cfg.bench_dir).exists():
        raise StateError(f"benchmark directory not found: {cfg.bench_dir!r}")
    return harness.load_benchmark(cfg.bench_dir)


def cmd_train(cfg: CommandConfig) -> Path:
    bench = _load_bench(cfg)
    sched_params = _stage_params(cfg.schedule, _SCHEDULE_DEFAULTS, "schedule")
    sched = make_schedule(
        sched_params["t_train"], sched_params["beta_start"], sched_params["beta_end"]
    )

    model_cfg = _from_dict(
        ModelConfig,
        {
            "image_size": bench.spec.image_size,
            "objects": (bench.spec.category,),
            "defects": tuple(bench.spec.defects),
            **cfg.model,
        },
        "model",
    )
    bundle = ModelBundle(model_cfg, seed=int(substream(cfg.seed, "init").integers(2**31)))

    run = make_run_dir(cfg)
    traces = {}

    codec_p = _stage_params(cfg.codec, _TRAIN_STAGE_DEFAULTS["codec"], "codec")
    # the codec must be able to represent defect appearance, so the few
    # genuine defective seeds join the reconstruction training set,
    # oversampled against the larger clean set, together with paste
    # composites that scatter the same defect pixels over more backgrounds
    parts = [bench.train_ok]
    parts += [np.stack([img for img, _ in bench.seed_ng])] * codec_p["seed_repeat"]
    if codec_p["paste_aug"]:
        paste = harness.cut_paste_dataset(
            codec_p["paste_aug"], bench.train_ok, bench.seed_ng,
            substream(cfg.seed, "codec-paste"),
        )
        parts.append(np.stack([img for img, _ in paste]))
    codec_data = np.concatenate(parts)
    _, eps_codec = pipeline.train_codec(
        codec_data, bundle,
        epochs=codec_p["epochs"], lr=codec_p["lr"],
        batch_size=codec_p["batch_size"],
        rng=substream_torch(cfg.seed, "codec"),
    )
    bundle.freeze("codec")

    pre_p = _stage_params(cfg.pretrain, _TRAIN_STAGE_DEFAULTS["pretrain"], "pretrain")
    traces["pretrain"] = pipeline.pretrain_denoiser(
        bench.train_ok, bundle, sched,
        steps=pre_p["steps"], lr=pre_p["lr"], batch_size=pre_p["batch_size"],
        rng=substream_torch(cfg.seed, "pretrain"),
    )

    fg = np.ones((bench.spec.image_size,) * 2, dtype=np.uint8)
    samples = [
        pipeline.TrainSample(
            image=img,
            trimap=trimap.build_trimap(fg, mask),
            prompt=PromptSpec(
                object_token=0,
                defect_token=model_cfg.defects.index(kind),
            ),
        )
        for (img, mask), kind in zip(bench.seed_ng, bench.seed_kinds)
    ]
    ft_p = _stage_params(cfg.finetune, _TRAIN_STAGE_DEFAULTS["finetune"], "finetune")
    if ft_p["rotation_aug"]:
        # rotated whole-image copies keep the defect-texture coupling that
        # the paste composites above deliberately break
        for img, mask, j in pipeline.rotation_augment(
            bench.seed_ng, ft_p["rotation_aug"], substream(cfg.seed, "augment")
        ):
            samples.append(pipeline.TrainSample(
                image=img,
                trimap=trimap.build_trimap(fg, mask),
                prompt=PromptSpec(
                    object_token=0,
                    defect_token=model_cfg.defects.index(bench.seed_kinds[j]),
                ),
            ))
    traces["finetune"] = pipeline.finetune_control(
        samples, bundle, sched,
        steps=ft_p["steps"], lr=ft_p["lr"], batch_size=ft_p["batch_size"],
        rng=substream_torch(cfg.seed, "finetune"),
    )

    ckpt = run / "checkpoint"
    bundle.save(ckpt, sched_params=sched_params)
    (run / "loss_traces.json").write_text(json.dumps(traces))
    _write_manifest(run, {
        "command": "train",
        "checkpoint_dir": str(ckpt),
        "epsilon_codec": eps_codec,
        "weight_hashes": bundle.weight_hashes(),
        "final_losses": {k: v[-1] for k, v in traces.items() if v},
    })
    click.echo(f"checkpoint written to {ckpt} (epsilon_codec={eps_codec:.4f})")
    return run


def _load_checkpoint(cfg: CommandConfig) -> tuple[ModelBundle, dict]:
    if not cfg.checkpoint_dir or not Path(cfg.checkpoint_dir).exists():
        raise StateError(f"checkpoint directory not found: {cfg.checkpoint_dir!r}")
    bundle = ModelBundle.load(cfg.checkpoint_dir)
    manifest = json.loads((Path(cfg.checkpoint_dir) / "manifest.json").read_text())
    return bundle, manifest


def _proportional(total: int, weights: list[int]) -> list[int]:
    """Split ``total`` proportionally to ``weights`` (largest remainder)."""
    s = sum(weights)
    raw = [total * w / s for w in weights]
    out = [int(r) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: raw[i] - out[i], reverse=True)
    for i in order[: total - sum(out)]:
        out[i] += 1
    return out


def _defect_contrast(image: np.ndarray, source: np.ndarray,
                     mask: np.ndarray) -> float:
    sel = mask.astype(bool)
    return float(np.abs(image[sel] - source[sel]).max(axis=1).mean())


def cmd_generate(cfg: CommandConfig) -> Path:
    bench = _load_bench(cfg)
    bundle, ckpt_manifest = _load_checkpoint(cfg)
    sched_params = {**_SCHEDULE_DEFAULTS, **ckpt_manifest.get("schedule", {})}
    sched = make_schedule(
        sched_params["t_train"], sched_params["beta_start"], sched_params["beta_end"]
    )
    gen_cfg = _from_dict(GenerationConfig, dict(cfg.generation), "generation")
    adapt_cfg = _from_dict(AdaptConfig, dict(cfg.adaptation), "adaptation")
    n_candidates = cfg.n_candidates or cfg.n_samples
    if n_candidates < cfg.n_samples:
        raise ParameterError("n_candidates must be >= n_samples")

    # group the seed masks by defect kind so every candidate is prompted
    # with the kind its mask was drawn from
    kinds = [k for k in bundle.config.defects if k in bench.seed_kinds]
    masks_by_kind = {
        k: [m for (_, m), sk in zip(bench.seed_ng, bench.seed_kinds) if sk == k]
        for k in kinds
    }
    counts = [len(masks_by_kind[k]) for k in kinds]
    quotas = _proportional(cfg.n_samples, counts)
    cand_quotas = _proportional(n_candidates, counts)

    selected = []
    skipped = 0
    sample_seeds: list[int] = []
    for kind, quota, n_cand in zip(kinds, quotas, cand_quotas):
        prompt = PromptSpec(
            object_token=0, defect_token=bundle.config.defects.index(kind)
        )
        result = pipeline.generate_dataset(
            n_cand, bench.train_ok, masks_by_kind[kind], [prompt], bundle,
            sched, gen_cfg, adapt_cfg,
            rng=substream(cfg.seed, f"generation-{kind}"),
            fg_kind="texture", workers=cfg.workers,
        )
        skipped += result.skipped
        sample_seeds.extend(result.sample_seeds)
        # keep the highest-contrast candidates: washed-out defects put
        # near-clean pixels under a defect label and poison the detector
        scored = sorted(
            result.samples,
            key=lambda s: -_defect_contrast(
                s.image, bench.train_ok[s.source_id], s.mask
            ),
        )
        selected.extend(scored[:quota])

    run = make_run_dir(cfg)
    out = run / "generated"
    for sub in ("defect", "ground_truth", "trimaps"):
        (out / sub).mkdir(parents=True)
    for i, s in enumerate(selected):
        harness._save_png(out / "defect" / f"{i:04d}.png", s.image)
        trimap.save_mask(out / "ground_truth" / f"{i:04d}_mask.png", s.mask)
        trimap.save_trimap(out / "trimaps" / f"{i:04d}_trimap.png", s.trimap)
    _write_manifest(run, {
        "command": "generate",
        "generated_dir": str(out),
        "n_requested": cfg.n_samples,
        "n_candidates": n_candidates,
        "n_generated": len(selected),
        "skipped": skipped,
        "sample_seeds": sample_seeds,
        "sources": [s.source_id for s in selected],
        "defect_contrast": [
            _defect_contrast(s.image, bench.train_ok[s.source_id], s.mask)
            for s in selected
        ],
        "generation": asdict(gen_cfg),
        "adaptation": asdict(adapt_cfg),
        "checkpoint_hashes": ckpt_manifest.get("weight_hashes", {}),
        "schedule": sched_params,
    })
    click.echo(
        f"generated {len(selected)} samples "
        f"({skipped} skipped) in {out}"
    )
    return run


def load_generated(generated_dir) -> list[tuple[np.ndarray, np.ndarray]]:
    gen = Path(generated_dir)
    pairs = []
    for ip in sorted((gen / "defect").glob("*.png")):
        mp = gen / "ground_truth" / f"{ip.stem}_mask.png"
        pairs.append((harness._load_png(ip), trimap.load_mask(mp)))
    return pairs


def _curve_dump(scores: np.ndarray, gt: metrics.GroundTruth) -> dict:
    thresholds, cum_pred, cum_tp = metrics._sweep(scores, gt)
    n_pos = int(gt.labels.sum())
    return {
        "pixel_recall": (cum_tp / max(n_pos, 1)).tolist(),
        "pixel_precision": (cum_tp / cum_pred).tolist(),
        "instance_recall": metrics._instance_recall(scores, gt, thresholds).tolist(),
    }


def cmd_evaluate(cfg: CommandConfig) -> Path:
    bench = _load_bench(cfg)
    trial_cfg = _from_dict(TrialConfig, {"seed": cfg.seed, **cfg.trials}, "trials")

    methods: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {}
    if cfg.generated_dir:
        gen = load_generated(cfg.generated_dir)
        if not gen:
            raise ParameterError(f"no generated samples in {cfg.generated_dir!r}")
        methods[METHOD_GENERATED] = gen
    else:
        raise ParameterError("evaluate requires generated_dir")
    methods[METHOD_GENUINE] = list(bench.seed_ng)
    methods[METHOD_CUTPASTE] = harness.cut_paste_dataset(
        cfg.n_cutpaste, bench.train_ok, bench.seed_ng,
        substream(cfg.seed, "cutpaste"),
    )

    run = make_run_dir(cfg)
    reports = {}
    curves = {}
    for name, data in methods.items():
        report = harness.run_trials(bench, data, trial_cfg)
        reports[name] = report
        (run / f"report_{name}.json").write_text(report.to_json())
        # representative single-trial curve data for the report command
        one = dataclasses.replace(trial_cfg, n_trials=1)
        rng = np.random.default_rng(np.random.SeedSequence(one.seed))
        pairs = harness._as_pairs(data)
        idx = rng.choice(len(pairs), size=min(one.n_images, len(pairs)), replace=False)
        feats = [
            harness.extract_patch_features(
                pairs[i][0], stride=one.stride, d_f=one.d_f, mask=pairs[i][1]
            )
            for i in idx
        ]
        x = np.concatenate([f.features for f in feats])
        y = np.concatenate([f.labels for f in feats])
        if len(np.unique(y)) == 2:
            clf = harness.train_patch_classifier((x, y), gamma=one.gamma, c=one.c)
            scores, gt = harness.score_test_set(clf, bench, one)
            curves[name] = _curve_dump(scores, gt)

    table = format_comparison_table(reports)
    (run / "comparison.txt").write_text(table)
    (run / "curves.json").write_text(json.dumps(curves))
    _write_manifest(run, {
        "command": "evaluate",
        "trials": asdict(trial_cfg),
        "methods": {
            name: {m: getattr(r, m) for m in metrics.MetricsReport.METRIC_NAMES}
            for name, r in reports.items()
        },
    })
    click.echo(table)
    return run


def format_comparison_table(reports: dict[str, metrics.MetricsReport]) -> str:
    """Method rows against the Pixel-AUC/PRO/AP/IAP/IAP@k column layout."""
    header = ["method", "Pixel-AUC", "PRO", "AP", "IAP", "IAP90"]
    lines = ["  ".join(f"{h:>12}" for h in header)]
    for name, r in reports.items():
        cells = [f"{name:>12}"] + [
            f"{100 * getattr(r, m):>12.2f}"
            for m in metrics.MetricsReport.METRIC_NAMES
        ]
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"


def cmd_report(cfg: CommandConfig) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ev = Path(cfg.evaluate_dir)
    if not cfg.evaluate_dir or not ev.exists():
        raise StateError(f"evaluate directory not found: {cfg.evaluate_dir!r}")
    run = make_run_dir(cfg)

    curves = json.loads((ev / "curves.json").read_text())
    fig, ax = plt.subplots()
    for name, c in curves.items():
        ax.plot(c["pixel_recall"], c["pixel_precision"], label=name)
    ax.set_xlabel("pixel recall")
    ax.set_ylabel("pixel precision")
    ax.legend()
    fig.savefig(run / "pr_curves.png", dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots()
    for name, c in curves.items():
        ax.plot(c["instance_recall"], c["pixel_precision"], label=name)
    ax.set_xlabel("instance recall")
    ax.set_ylabel("pixel precision")
    ax.legend()
    fig.savefig(run / "instance_recall_curves.png", dpi=120)
    plt.close(fig)

    if cfg.train_dir and (Path(cfg.train_dir) / "loss_traces.json").exists():
        traces = json.loads((Path(cfg.train_dir) / "loss_traces.json").read_text())
        fig, ax = plt.subplots()
        for stage, vals in traces.items():
            ax.plot(vals, label=stage)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend()
        fig.savefig(run / "loss_traces.png", dpi=120)
        plt.close(fig)

    summary = (ev / "comparison.txt").read_text()
    (run / "summary.txt").write_text(summary)
    _write_manifest(run, {"command": "report", "evaluate_dir": str(ev)})
    click.echo(f"report written to {run}")
    return run


# ---------------------------------------------------------------- wiring

_COMMANDS = {
    "make-bench": cmd_make_bench,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def _run(command: str, config: str | None, seed: int | None, workers: int | None,
         replay: str | None) -> None:
    try:
        if replay:
            manifest_path = Path(replay)
            if not manifest_path.exists():
                raise ParameterError(f"replay manifest not found: {replay!r}")
            run_dir = manifest_path.parent
            cfg_data = json.loads((run_dir / "resolved_config.json").read_text())
            cfg = _from_dict(CommandConfig, cfg_data, "resolved config")
            if cfg.command != command:
                raise ParameterError(
                    f"manifest belongs to {cfg.command!r}, not {command!r}"
                )
        else:
            cfg = load_config(command, config, seed, workers)
        _COMMANDS[command](cfg)
    except ParameterError as exc:
        _fail(exc, EXIT_USAGE)
    except StateError as exc:
        _fail(exc, EXIT_STATE)
    except DefectGenError as exc:
        _fail(exc, EXIT_ERROR)


def _fail(exc: Exception, code: int) -> None:
    record = {"error": type(exc).__name__, "message": str(exc)}
    click.echo(json.dumps(record), err=True)
    sys.exit(code)


def _common_options(fn):
    fn = click.option("--config", type=click.Path(), default=None,
                      help="JSON config file")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="top-level random seed")(fn)
    fn = click.option("--workers", type=int, default=None,
                      help="parallel workers for generation")(fn)
    fn = click.option("--replay", type=click.Path(), default=None,
                      help="re-run a prior run's manifest bit-identically")(fn)
    return fn


@click.group()
def main():
    """Defect-sample synthesis and evaluation."""


def _register(name):
    @main.command(name=name)
    @_common_options
    def _cmd(config, seed, workers, replay, _name=name):
        _run(_name, config, seed, workers, replay)
    return _cmd


for _name in _COMMANDS:
    _register(_name)


if __name__ == "__main__":
    main()
