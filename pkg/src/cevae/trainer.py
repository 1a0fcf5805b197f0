"""Optimization loop, run bookkeeping, and the combination-factor sweep.

Every stochastic choice (weight init, epoch shuffling, augmentation, mask
placement, reparameterization noise, validation corruption) draws from its
own named stream derived from the run seed, so a run is bit-reproducible
and validation sees identical corruption every epoch.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .corruption import augment_batch, gaussian_corrupt, mask_batch
from .data import DatasetManifest
from .evaluation import EvalReport, RunMetrics, evaluate_run
from .model import CevaeNet, ModelConfig, init_weights, load_checkpoint, save_checkpoint
from .objectives import LossBreakdown, baseline_loss, cevae_loss, combine_losses
from .scoring import AttributionConfig, score_dataset
from .seeding import numpy_rng, torch_generator

MODEL_KINDS = ("AE", "DAE", "CE", "VAE", "ceVAE")
LOSS_CSV_COLUMNS = ("epoch", "split", "l_kl", "l_rec_vae", "l_rec_ce", "total")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    batch_size: int = 64
    epochs: int = 60
    cevae_factor: float = 0.5
    model_kind: str = "ceVAE"
    seed: int = 0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    dae_noise_sigma: float = 0.1
    augment: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.cevae_factor <= 1.0:
            raise ValueError("cevae_factor must lie in [0, 1]")
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(
                f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}"
            )
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))


@dataclass
class AdamState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place on the parameter tensors."""
    b1, b2 = betas
    state.t += 1
    t = state.t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g is None:
                g = torch.zeros_like(p)
            if not torch.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            p.add_(-lr * m_hat / (v_hat.sqrt() + eps))


@dataclass
class RunRecord:
    config: dict
    train_curve: list[LossBreakdown]
    val_curve: list[LossBreakdown]
    best_epoch: int
    best_val_total: float
    best_checkpoint: Path
    last_checkpoint: Path
    out_dir: Path


def _mean_breakdown(parts: list[LossBreakdown], weights: list[int], factor: float) -> LossBreakdown:
    total_w = sum(weights)
    kl = sum(p.l_kl * w for p, w in zip(parts, weights)) / total_w
    rec_vae = sum(p.l_rec_vae * w for p, w in zip(parts, weights)) / total_w
    rec_ce = sum(p.l_rec_ce * w for p, w in zip(parts, weights)) / total_w
    return LossBreakdown(
        l_kl=kl,
        l_rec_vae=rec_vae,
        l_rec_ce=rec_ce,
        cevae_factor=factor,
        total=combine_losses(kl, rec_vae, rec_ce, factor),
    )


def _stack_images(samples) -> torch.Tensor:
    arr = np.stack([np.asarray(s.image, dtype=np.float32) for s in samples])
    return torch.from_numpy(arr).unsqueeze(1)


def _effective_factor(cfg: TrainConfig) -> float:
    if cfg.model_kind == "VAE":
        return 0.0
    if cfg.model_kind in ("AE", "DAE", "CE"):
        return 1.0
    return cfg.cevae_factor


def _branch_loss(
    net: CevaeNet,
    cfg: TrainConfig,
    x: torch.Tensor,
    mask_rng: np.random.Generator,
    eps_gen: torch.Generator,
) -> LossBreakdown:
    kind = cfg.model_kind
    if kind == "ceVAE":
        factor = cfg.cevae_factor
        masked = mask_batch(x, mask_rng) if factor > 0 else None
        return cevae_loss(net, x, masked, factor, generator=eps_gen)
    if kind == "VAE":
        return baseline_loss(net, "VAE", x, generator=eps_gen)
    if kind == "CE":
        return baseline_loss(net, "CE", x, x_corrupted=mask_batch(x, mask_rng))
    if kind == "DAE":
        corrupted = gaussian_corrupt(x, mask_rng, sigma=cfg.dae_noise_sigma)
        return baseline_loss(net, "DAE", x, x_corrupted=corrupted)
    return baseline_loss(net, "AE", x)


def _validation_breakdown(net: CevaeNet, cfg: TrainConfig, val_x: torch.Tensor) -> LossBreakdown:
    """Validation loss with corruption and noise from fixed per-run streams.

    The streams are re-derived identically every epoch, so epochs are
    compared on exactly the same corrupted inputs.
    """
    mask_rng = numpy_rng(cfg.seed, "val", "mask")
    eps_gen = torch_generator(cfg.seed, "val", "eps")
    parts, weights = [], []
    with torch.no_grad():
        for start in range(0, val_x.shape[0], cfg.batch_size):
            xb = val_x[start : start + cfg.batch_size]
            parts.append(_branch_loss(net, cfg, xb, mask_rng, eps_gen))
            weights.append(xb.shape[0])
    return _mean_breakdown(parts, weights, _effective_factor(cfg))


def train(
    manifest: DatasetManifest,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir,
) -> RunRecord:
    """Fit one model and keep the checkpoint with the lowest validation loss.

    Writes ``config.json``, ``losses.csv`` and ``checkpoints/{best,last}``
    into ``out_dir``.
    """
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    if manifest.resolution != model_cfg.resolution:
        raise ValueError(
            f"manifest resolution {manifest.resolution} != model resolution "
            f"{model_cfg.resolution}"
        )
    train_samples = manifest.load_samples("train")
    val_samples = manifest.load_samples("val")
    if not train_samples or not val_samples:
        raise ValueError("manifest needs non-empty train and val splits")
    if any(s.split != "train" for s in train_samples):
        raise RuntimeError("non-train slices leaked into the training pool")

    config_echo = {
        "model": dataclasses.asdict(model_cfg),
        "train": dataclasses.asdict(cfg),
        "data_root": str(manifest.root),
        "n_train_slices": len(train_samples),
        "n_val_slices": len(val_samples),
    }
    (out_dir / "config.json").write_text(json.dumps(config_echo, indent=2, sort_keys=True))

    train_x = _stack_images(train_samples)
    train_splits = [s.split for s in train_samples]
    val_x = _stack_images(val_samples)

    net = CevaeNet(model_cfg)
    init_weights(net, torch_generator(cfg.seed, "init"))
    params = dict(net.named_parameters())
    state = AdamState()

    best_epoch, best_val = -1, float("inf")
    train_curve: list[LossBreakdown] = []
    val_curve: list[LossBreakdown] = []
    best_path = out_dir / "checkpoints" / "best"
    last_path = out_dir / "checkpoints" / "last"
    factor = _effective_factor(cfg)

    loss_rows = []
    n = train_x.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        shuffle_rng = numpy_rng(cfg.seed, "shuffle", epoch)
        aug_rng = numpy_rng(cfg.seed, "augment", epoch)
        mask_rng = numpy_rng(cfg.seed, "mask", epoch)
        eps_gen = torch_generator(cfg.seed, "eps", epoch)
        order = shuffle_rng.permutation(n)

        parts, weights = [], []
        for start in range(0, n, cfg.batch_size):
            batch_idx = order[start : start + cfg.batch_size]
            if any(train_splits[i] != "train" for i in batch_idx):
                raise RuntimeError("non-train slices leaked into a gradient batch")
            xb = train_x[batch_idx]
            xa = augment_batch(xb, aug_rng) if cfg.augment else xb
            try:
                breakdown = _branch_loss(net, cfg, xa, mask_rng, eps_gen)
            except FloatingPointError as err:
                raise FloatingPointError(
                    f"aborting: {err} (epoch {epoch}, step {len(parts)}, "
                    f"kind {cfg.model_kind}, lr {cfg.lr})"
                ) from err
            for p in params.values():
                p.grad = None
            breakdown.total_tensor.backward()
            adam_step(
                params,
                {name: p.grad for name, p in params.items()},
                state,
                cfg.lr,
                cfg.adam_betas,
                cfg.adam_eps,
            )
            parts.append(breakdown)
            weights.append(xb.shape[0])

        train_curve.append(_mean_breakdown(parts, weights, factor))
        val_curve.append(_validation_breakdown(net, cfg, val_x))
        for split, bd in (("train", train_curve[-1]), ("val", val_curve[-1])):
            loss_rows.append(
                [epoch, split, repr(bd.l_kl), repr(bd.l_rec_vae), repr(bd.l_rec_ce), repr(bd.total)]
            )
        if val_curve[-1].total < best_val:
            best_val = val_curve[-1].total
            best_epoch = epoch
            save_checkpoint(net, best_path)
        save_checkpoint(net, last_path)

    with open(out_dir / "losses.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(LOSS_CSV_COLUMNS)
        writer.writerows(loss_rows)

    return RunRecord(
        config=config_echo,
        train_curve=train_curve,
        val_curve=val_curve,
        best_epoch=best_epoch,
        best_val_total=best_val,
        best_checkpoint=best_path,
        last_checkpoint=last_path,
        out_dir=out_dir,
    )


def read_loss_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        rows = []
        for row in reader:
            rows.append(
                {
                    "epoch": int(row["epoch"]),
                    "split": row["split"],
                    "l_kl": float(row["l_kl"]),
                    "l_rec_vae": float(row["l_rec_vae"]),
                    "l_rec_ce": float(row["l_rec_ce"]),
                    "total": float(row["total"]),
                }
            )
    return rows


def evaluate_checkpoint(
    checkpoint_path,
    manifest: DatasetManifest,
    attr_cfg: AttributionConfig = AttributionConfig(),
    score_seed: int = 0,
    eval_k: int = 5,
    eval_seed: int = 0,
    pooling: str = "global",
) -> RunMetrics:
    """Score the manifest's test split with a saved model and compute metrics."""
    net = load_checkpoint(checkpoint_path)
    test_samples = manifest.load_samples("test")
    if not test_samples:
        raise ValueError("manifest has no test split")
    slice_scores, maps = score_dataset(net, test_samples, attr_cfg, seed=score_seed)
    return evaluate_run(
        test_samples, slice_scores, maps, k=eval_k, seed=eval_seed, pooling=pooling
    )


def factor_sweep(
    manifest: DatasetManifest,
    model_cfg: ModelConfig,
    base_cfg: TrainConfig,
    factors: list[float],
    seeds: list[int],
    out_dir,
    attr_cfg: AttributionConfig = AttributionConfig(),
    eval_k: int = 5,
) -> dict[float, EvalReport]:
    """Train and evaluate one model per (factor, seed); tabulate and plot.

    Emits ``sweep.csv`` with one row per run, per-factor report JSONs, and
    ``sweep.png`` showing median lines with min/max bands.
    """
    from .evaluation import report_to_json

    if any(not 0.0 <= f <= 1.0 for f in factors):
        raise ValueError("factors must lie in [0, 1]")
    out_dir = Path(out_dir)
    (out_dir / "reports").mkdir(parents=True, exist_ok=True)

    rows = []
    reports: dict[float, EvalReport] = {}
    for factor in factors:
        run_metrics = []
        for seed in seeds:
            cfg = dataclasses.replace(
                base_cfg, model_kind="ceVAE", cevae_factor=factor, seed=seed
            )
            run_dir = out_dir / f"factor_{factor:g}_seed_{seed}"
            record = train(manifest, model_cfg, cfg, run_dir)
            metrics = evaluate_checkpoint(
                record.best_checkpoint,
                manifest,
                attr_cfg,
                score_seed=seed,
                eval_k=eval_k,
                eval_seed=seed,
            )
            run_metrics.append(metrics)
            rows.append(
                [factor, seed, metrics.slice_roc_auc, metrics.pixel_roc_auc, metrics.dice_mean]
            )
        report = EvalReport.from_runs(run_metrics)
        reports[factor] = report
        (out_dir / "reports" / f"factor_{factor:g}.json").write_text(
            report_to_json(report)
        )

    with open(out_dir / "sweep.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["factor", "seed", "slice_roc_auc", "pixel_roc_auc", "dice_mean"])
        writer.writerows(rows)
    _plot_sweep(reports, out_dir / "sweep.png")
    return reports


def _plot_sweep(reports: dict[float, EvalReport], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    factors = sorted(reports)
    fig, ax = plt.subplots(figsize=(6, 4))
    for metric, color in (("pixel_roc_auc", "tab:blue"), ("dice_mean", "tab:orange")):
        med = [reports[f].aggregate[metric]["median"] for f in factors]
        lo = [reports[f].aggregate[metric]["min"] for f in factors]
        hi = [reports[f].aggregate[metric]["max"] for f in factors]
        ax.plot(factors, med, marker="o", color=color, label=metric)
        ax.fill_between(factors, lo, hi, color=color, alpha=0.2)
    ax.set_xlabel("combination factor")
    ax.set_ylabel("score")
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
