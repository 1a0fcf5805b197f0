"""Command-line pipeline: generate data, train, score, evaluate, sweep, report.

Each subcommand takes an optional flat JSON config file (--config); explicit
command-line flags override file values, unknown file keys are rejected, and
the merged effective config is persisted next to the outputs. The
environment variable CEVAE_NUM_THREADS caps torch threads and data-generation
workers.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .data import DatasetManifest, PhantomConfig, load_manifest, read_slice, write_slice
from .evaluation import (
    EvalReport,
    evaluate_run,
    render_report_table,
    report_from_json,
    report_to_json,
)
from .model import ModelConfig, load_checkpoint
from .scoring import (
    ATTRIBUTION_MODES,
    AttributionConfig,
    SampleScore,
    read_score_csv,
    score_dataset,
    write_heatmap_png,
    write_score_csv,
)
from .trainer import MODEL_KINDS, TrainConfig, factor_sweep, train


def _env_threads() -> int | None:
    raw = os.environ.get("CEVAE_NUM_THREADS")
    if raw is None:
        return None
    value = int(raw)
    if value < 1:
        raise ValueError(f"CEVAE_NUM_THREADS must be >= 1, got {raw!r}")
    return value


def _merge_config(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults <- config file <- explicit CLI flags; unknown file keys error."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        file_cfg = json.loads(Path(args.config).read_text())
        if not isinstance(file_cfg, dict):
            raise ValueError("config file must hold a flat JSON object")
        unknown = sorted(set(file_cfg) - set(defaults))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        merged.update(file_cfg)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _echo_config(cfg: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True))


def _parse_channels(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(c) for c in text)
    return tuple(int(c) for c in str(text).split(","))


def _model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(
        resolution=cfg["resolution"],
        channels=_parse_channels(cfg["channels"]),
        latent_dim=cfg["latent_dim"],
        coordconv=cfg["coordconv"],
    )


def _train_config(cfg: dict, factor=None, seed=None) -> TrainConfig:
    return TrainConfig(
        lr=cfg["lr"],
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        cevae_factor=cfg["cevae_factor"] if factor is None else factor,
        model_kind=cfg["model_kind"],
        seed=cfg["seed"] if seed is None else seed,
        dae_noise_sigma=cfg["dae_noise_sigma"],
        augment=cfg["augment"],
    )


def _attr_config(cfg: dict) -> AttributionConfig:
    return AttributionConfig(
        mode=cfg["mode"],
        smoothgrad_n=cfg["smoothgrad_n"],
        smoothgrad_sigma=cfg["smoothgrad_sigma"],
        smoothing_sigma_px=cfg["smoothing_sigma_px"],
        backprop_target=cfg["backprop_target"],
    )


GEN_DEFAULTS = {
    "out": None,
    "patients": 10,
    "val_patients": 2,
    "test_patients": 4,
    "slices": 16,
    "anomaly_frac": 0.5,
    "anomaly_shift": 1.6,
    "resolution": 64,
    "seed": 0,
    "workers": 1,
}

MODEL_DEFAULTS = {
    "resolution": 64,
    "channels": "16,64,256,1024",
    "latent_dim": 1024,
    "coordconv": True,
}

TRAIN_DEFAULTS = {
    **MODEL_DEFAULTS,
    "data": None,
    "out": None,
    "model_kind": "ceVAE",
    "cevae_factor": 0.5,
    "seed": 0,
    "lr": 2e-4,
    "batch_size": 64,
    "epochs": 60,
    "dae_noise_sigma": 0.1,
    "augment": True,
}

SCORE_DEFAULTS = {
    "checkpoint": None,
    "data": None,
    "out": None,
    "split": "test",
    "mode": "smooth_guided",
    "smoothgrad_n": 16,
    "smoothgrad_sigma": None,
    "smoothing_sigma_px": 2.0,
    "backprop_target": "kl",
    "mc_samples": 0,
    "seed": 0,
    "heatmaps": False,
}

EVAL_DEFAULTS = {
    "scores": None,
    "data": None,
    "out": None,
    "folds": 5,
    "eval_seed": 0,
    "pooling": "global",
}

SWEEP_DEFAULTS = {
    **TRAIN_DEFAULTS,
    "factors": "0,0.25,0.5,0.75,1",
    "seeds": 5,
    "folds": 5,
    "mode": "smooth_guided",
}
SWEEP_DEFAULTS.pop("model_kind")

REPORT_DEFAULTS = {"report": None, "out": None}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cevae",
        description="Unsupervised anomaly detection on 2D slices: "
        "train, score, and evaluate variational/context reconstruction models.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add_common(p):
        p.add_argument("--config", help="flat JSON config file; flags override it")

    g = sub.add_parser("gen-data", help="write a synthetic phantom dataset")
    add_common(g)
    g.add_argument("--out", help="output directory")
    g.add_argument("--patients", type=int, help="number of training patients")
    g.add_argument("--val-patients", type=int, dest="val_patients")
    g.add_argument("--test-patients", type=int, dest="test_patients")
    g.add_argument("--slices", type=int, help="slices per patient")
    g.add_argument("--anomaly-frac", type=float, dest="anomaly_frac")
    g.add_argument("--anomaly-shift", type=float, dest="anomaly_shift")
    g.add_argument("--resolution", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--workers", type=int)

    def add_model_flags(p):
        p.add_argument("--resolution", type=int)
        p.add_argument("--channels", help="comma-separated conv channel counts")
        p.add_argument("--latent-dim", type=int, dest="latent_dim")
        p.add_argument("--coordconv", action=argparse.BooleanOptionalAction, default=None)

    def add_train_flags(p):
        p.add_argument("--data", help="path to manifest.csv")
        p.add_argument("--out", help="run directory")
        p.add_argument("--cevae-factor", type=float, dest="cevae_factor")
        p.add_argument("--seed", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int, dest="batch_size")
        p.add_argument("--epochs", type=int)
        p.add_argument("--dae-noise-sigma", type=float, dest="dae_noise_sigma")
        p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
        add_model_flags(p)

    t = sub.add_parser("train", help="fit one model on a dataset's train split")
    add_common(t)
    t.add_argument("--model-kind", choices=MODEL_KINDS, dest="model_kind")
    add_train_flags(t)

    s = sub.add_parser("score", help="score a split with a trained checkpoint")
    add_common(s)
    s.add_argument("--checkpoint")
    s.add_argument("--data", help="path to manifest.csv")
    s.add_argument("--out", help="output directory")
    s.add_argument("--split", choices=("train", "val", "test"))
    s.add_argument("--mode", choices=ATTRIBUTION_MODES)
    s.add_argument("--smoothgrad-n", type=int, dest="smoothgrad_n")
    s.add_argument("--smoothgrad-sigma", type=float, dest="smoothgrad_sigma")
    s.add_argument("--smoothing-sigma-px", type=float, dest="smoothing_sigma_px")
    s.add_argument("--backprop-target", choices=("kl", "elbo"), dest="backprop_target")
    s.add_argument("--mc-samples", type=int, dest="mc_samples")
    s.add_argument("--seed", type=int)
    s.add_argument("--heatmaps", action=argparse.BooleanOptionalAction, default=None)

    e = sub.add_parser("evaluate", help="compute metrics from score outputs")
    add_common(e)
    e.add_argument("--scores", help="directory produced by the score subcommand")
    e.add_argument("--data", help="path to manifest.csv")
    e.add_argument("--out", help="output report JSON path")
    e.add_argument("--folds", type=int)
    e.add_argument("--eval-seed", type=int, dest="eval_seed")
    e.add_argument("--pooling", choices=("global", "per_slice"))

    w = sub.add_parser("sweep", help="train/evaluate across combination factors")
    add_common(w)
    w.add_argument("--factors", help="comma-separated factors in [0, 1]")
    w.add_argument("--seeds", type=int, help="number of seeds per factor")
    w.add_argument("--folds", type=int)
    w.add_argument("--mode", choices=ATTRIBUTION_MODES)
    add_train_flags(w)

    r = sub.add_parser("report", help="render a report JSON as a text table")
    add_common(r)
    r.add_argument("--report", help="path to report JSON")
    r.add_argument("--out", help="optional path for the text table")
    return parser


def _require(cfg: dict, keys: list[str], subcommand: str) -> None:
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise ValueError(f"{subcommand} requires {flags}")


def _cmd_gen_data(args) -> int:
    cfg = _merge_config(args, GEN_DEFAULTS)
    _require(cfg, ["out"], "gen-data")
    threads = _env_threads()
    workers = min(cfg["workers"], threads) if threads else cfg["workers"]
    phantom_cfg = PhantomConfig(
        n_train_patients=cfg["patients"],
        n_val_patients=cfg["val_patients"],
        n_test_patients=cfg["test_patients"],
        slices_per_patient=cfg["slices"],
        anomaly_fraction=cfg["anomaly_frac"],
        anomaly_intensity_shift=cfg["anomaly_shift"],
        resolution=cfg["resolution"],
        seed=cfg["seed"],
    )
    out = Path(cfg["out"])
    manifest = data_mod.generate_phantoms(phantom_cfg, out, max_workers=workers)
    _echo_config(cfg, out / "config.json")
    print(f"wrote {len(manifest.entries)} slices to {out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _merge_config(args, TRAIN_DEFAULTS)
    _require(cfg, ["data", "out"], "train")
    manifest = load_manifest(cfg["data"])
    out = Path(cfg["out"])
    record = train(manifest, _model_config(cfg), _train_config(cfg), out)
    _echo_config(cfg, out / "cli_config.json")
    print(
        f"trained {cfg['model_kind']} for {cfg['epochs']} epochs; "
        f"best validation total {record.best_val_total:.4f} at epoch {record.best_epoch}"
    )
    print(f"checkpoints in {out / 'checkpoints'}")
    return 0


def _map_filename(pid: str, idx: int) -> str:
    return f"{pid}_{idx:03d}_pixels.slc"


def _cmd_score(args) -> int:
    cfg = _merge_config(args, SCORE_DEFAULTS)
    _require(cfg, ["checkpoint", "data", "out"], "score")
    manifest = load_manifest(cfg["data"])
    samples = manifest.load_samples(cfg["split"])
    if not samples:
        raise ValueError(f"manifest has no {cfg['split']} slices")
    net = load_checkpoint(cfg["checkpoint"])
    out = Path(cfg["out"])
    maps_dir = out / "maps"
    maps_dir.mkdir(parents=True, exist_ok=True)
    slice_scores, maps = score_dataset(
        net, samples, _attr_config(cfg), seed=cfg["seed"], mc_samples=cfg["mc_samples"]
    )
    rows = [
        (s.patient_id, s.slice_index, score)
        for s, score in zip(samples, slice_scores)
    ]
    write_score_csv(out / "scores.csv", rows)
    for s, m in zip(samples, maps):
        write_slice(
            maps_dir / _map_filename(s.patient_id, s.slice_index),
            m.scores.astype(np.float32),
        )
    if cfg["heatmaps"]:
        heat_dir = out / "heatmaps"
        heat_dir.mkdir(exist_ok=True)
        for s, m in zip(samples, maps):
            write_heatmap_png(
                heat_dir / f"{s.patient_id}_{s.slice_index:03d}.png", m.scores
            )
    _echo_config(cfg, out / "config.json")
    print(f"scored {len(samples)} slices into {out}")
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _merge_config(args, EVAL_DEFAULTS)
    _require(cfg, ["scores", "data", "out"], "evaluate")
    manifest = load_manifest(cfg["data"])
    scores_dir = Path(cfg["scores"])
    score_cfg = json.loads((scores_dir / "config.json").read_text())
    samples = manifest.load_samples(score_cfg.get("split", "test"))
    by_key: dict[tuple[str, int], SampleScore] = {
        (pid, idx): sc for pid, idx, sc in read_score_csv(scores_dir / "scores.csv")
    }
    slice_scores, maps = [], []
    for s in samples:
        key = (s.patient_id, s.slice_index)
        if key not in by_key:
            raise ValueError(f"missing score for slice {key}")
        slice_scores.append(by_key[key])
        maps.append(read_slice(scores_dir / "maps" / _map_filename(*key)))
    metrics = evaluate_run(
        samples,
        slice_scores,
        maps,
        k=cfg["folds"],
        seed=cfg["eval_seed"],
        pooling=cfg["pooling"],
    )
    report = EvalReport.from_runs([metrics])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report_to_json(report))
    table = render_report_table(report)
    out.with_suffix(".txt").write_text(table + "\n")
    _echo_config(cfg, out.with_name(out.name + ".config.json"))
    print(table)
    return 0


def _cmd_sweep(args) -> int:
    cfg = _merge_config(args, SWEEP_DEFAULTS)
    _require(cfg, ["data", "out"], "sweep")
    manifest = load_manifest(cfg["data"])
    factors = [float(f) for f in str(cfg["factors"]).split(",")]
    seeds = [cfg["seed"] + i for i in range(cfg["seeds"])]
    out = Path(cfg["out"])
    base = _train_config({**cfg, "model_kind": "ceVAE"})
    attr = AttributionConfig(mode=cfg["mode"])
    reports = factor_sweep(
        manifest,
        _model_config(cfg),
        base,
        factors,
        seeds,
        out,
        attr_cfg=attr,
        eval_k=cfg["folds"],
    )
    _echo_config(cfg, out / "config.json")
    for factor in sorted(reports):
        agg = reports[factor].aggregate
        print(
            f"factor {factor:g}: pixel_roc_auc median {agg['pixel_roc_auc']['median']:.4f} "
            f"dice median {agg['dice_mean']['median']:.4f}"
        )
    print(f"table and plot in {out}")
    return 0


def _cmd_report(args) -> int:
    cfg = _merge_config(args, REPORT_DEFAULTS)
    _require(cfg, ["report"], "report")
    report = report_from_json(Path(cfg["report"]).read_text())
    table = render_report_table(report)
    if cfg["out"]:
        Path(cfg["out"]).write_text(table + "\n")
    print(table)
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "score": _cmd_score,
    "evaluate": _cmd_evaluate,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = _env_threads()
    if threads is not None:
        torch.set_num_threads(threads)
    try:
        return _COMMANDS[args.subcommand](args)
    except Exception as err:  # noqa: BLE001 - single CLI error boundary
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
