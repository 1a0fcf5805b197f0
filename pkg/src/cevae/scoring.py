"""Anomaly scoring: per-slice scores and per-pixel localization maps.

A slice's score is the approximated negative evidence lower bound,
``l_kl + l_rec_vae``, evaluated deterministically with z set to the
posterior mean. The pixel map fuses two cues by elementwise product:
the mean-path reconstruction error and the absolute input-gradient of the
KL term, computed with guided backpropagation, averaged over noisy copies
of the input, and blurred with a small Gaussian to suppress checkerboard
artifacts.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .model import CevaeNet, guided_backprop
from .objectives import kl_std_normal, l1_per_sample, kl_std_normal_per_sample
from .seeding import numpy_rng, torch_generator

ATTRIBUTION_MODES = ("vanilla", "guided", "smooth_guided")
BACKPROP_TARGETS = ("kl", "elbo")
SCORE_CSV_COLUMNS = ("patient_id", "slice_index", "sample_score", "l_kl", "l_rec_vae")


@dataclass(frozen=True)
class SampleScore:
    """Slice-level anomaly score; higher means more anomalous."""

    value: float
    l_kl: float
    l_rec_vae: float

    def __post_init__(self):
        for v in (self.value, self.l_kl, self.l_rec_vae):
            if not math.isfinite(v):
                raise FloatingPointError(f"non-finite sample score {self}")
        if abs(self.value - (self.l_kl + self.l_rec_vae)) > 1e-9:
            raise ValueError(f"value must equal l_kl + l_rec_vae, got {self}")

    @property
    def components(self) -> tuple[float, float]:
        return self.l_kl, self.l_rec_vae


@dataclass
class PixelScoreMap:
    """Pixel-level anomaly map and the two cues it was fused from."""

    scores: np.ndarray
    rec_err: np.ndarray
    kl_grad: np.ndarray

    def __post_init__(self):
        if not (self.scores.shape == self.rec_err.shape == self.kl_grad.shape):
            raise ValueError("scores and components must share one shape")
        for name in ("scores", "rec_err", "kl_grad"):
            arr = getattr(self, name)
            if not np.isfinite(arr).all():
                raise FloatingPointError(f"non-finite values in {name}")
            if (arr < 0).any():
                raise ValueError(f"{name} must be non-negative")
        if not np.array_equal(self.scores, self.rec_err * self.kl_grad):
            raise ValueError("scores must equal rec_err * kl_grad elementwise")

    @property
    def components(self) -> tuple[np.ndarray, np.ndarray]:
        return self.rec_err, self.kl_grad


@dataclass(frozen=True)
class AttributionConfig:
    """Knobs for the gradient cue of the pixel map.

    ``smoothgrad_sigma=None`` resolves to 5% of the slice's value range.
    ``backprop_target`` selects what is differentiated w.r.t. the input:
    the KL term alone (default) or the full deterministic ELBO.
    """

    mode: str = "smooth_guided"
    smoothgrad_n: int = 16
    smoothgrad_sigma: float | None = None
    smoothing_sigma_px: float = 2.0
    backprop_target: str = "kl"

    def __post_init__(self):
        if self.mode not in ATTRIBUTION_MODES:
            raise ValueError(f"mode must be one of {ATTRIBUTION_MODES}, got {self.mode!r}")
        if self.backprop_target not in BACKPROP_TARGETS:
            raise ValueError(
                f"backprop_target must be one of {BACKPROP_TARGETS}, got {self.backprop_target!r}"
            )
        if self.smoothgrad_n < 1:
            raise ValueError("smoothgrad_n must be >= 1")
        if self.smoothgrad_sigma is not None and self.smoothgrad_sigma < 0:
            raise ValueError("smoothgrad_sigma must be >= 0")
        if self.smoothing_sigma_px < 0:
            raise ValueError("smoothing_sigma_px must be >= 0")


def _as_batch(image, dtype=None) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(image))
    if t.ndim != 2:
        raise ValueError(f"expected a single 2D slice, got shape {tuple(t.shape)}")
    if dtype is not None:
        t = t.to(dtype)
    elif not t.dtype.is_floating_point:
        t = t.to(torch.float32)
    return t[None, None]


def sample_scores(
    net: CevaeNet,
    batch: torch.Tensor,
    mc_samples: int = 0,
    generator: torch.Generator | None = None,
) -> list[SampleScore]:
    """Score each slice of a batch; z = mu unless mc_samples > 0.

    With ``mc_samples=k`` the reconstruction term is averaged over k
    reparameterized draws while the KL term stays closed-form.
    """
    with torch.no_grad():
        post = net.encode(batch)
        l_kl = kl_std_normal_per_sample(post)
        if mc_samples > 0:
            recs = []
            for _ in range(mc_samples):
                eps = torch.randn(
                    post.mu.shape, generator=generator, dtype=batch.dtype
                )
                z = post.mu + torch.exp(post.log_sigma) * eps
                recs.append(l1_per_sample(batch, net.decode(z)))
            l_rec = torch.stack(recs).mean(dim=0)
        else:
            l_rec = l1_per_sample(batch, net.decode(post.mu))
    out = []
    for kl_i, rec_i in zip(l_kl.tolist(), l_rec.tolist()):
        out.append(SampleScore(value=kl_i + rec_i, l_kl=kl_i, l_rec_vae=rec_i))
    return out


def sample_score(
    net: CevaeNet,
    image,
    mc_samples: int = 0,
    generator: torch.Generator | None = None,
) -> SampleScore:
    batch = _as_batch(image, dtype=next(net.parameters()).dtype)
    return sample_scores(net, batch, mc_samples=mc_samples, generator=generator)[0]


def backprop_to_input(loss_fn, image, mode: str = "vanilla") -> torch.Tensor:
    """Gradient of a scalar loss w.r.t. one input slice.

    ``loss_fn`` receives an (1, 1, H, W) batch. In guided mode every
    rectifier zeroes its backward signal where the upstream gradient or the
    forward pre-activation is negative; vanilla mode is the exact gradient.
    """
    if mode not in ("vanilla", "guided"):
        raise ValueError(f"mode must be 'vanilla' or 'guided', got {mode!r}")
    x = image if isinstance(image, torch.Tensor) else torch.as_tensor(image)
    if x.ndim != 2:
        raise ValueError(f"expected a single 2D slice, got shape {tuple(x.shape)}")
    xb = x.detach().clone()[None, None].requires_grad_(True)
    with torch.enable_grad():
        if mode == "guided":
            with guided_backprop():
                loss = loss_fn(xb)
                (grad,) = torch.autograd.grad(loss, xb)
        else:
            loss = loss_fn(xb)
            (grad,) = torch.autograd.grad(loss, xb)
    grad = grad[0, 0].detach()
    if not torch.isfinite(grad).all():
        raise FloatingPointError("input gradient contains non-finite values")
    return grad


def smoothgrad(grad_fn, image, n: int, sigma: float, rng: np.random.Generator):
    """Average grad_fn over n copies of the input with iid N(0, sigma^2) noise.

    sigma=0 short-circuits to a single exact evaluation.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    x = image if isinstance(image, torch.Tensor) else torch.as_tensor(image)
    if sigma == 0:
        return grad_fn(x)
    acc = None
    for _ in range(n):
        noise = torch.as_tensor(
            rng.normal(0.0, sigma, size=tuple(x.shape)), dtype=x.dtype
        )
        g = grad_fn(x + noise)
        acc = g if acc is None else acc + g
    return acc / n


def gaussian_smooth(arr, sigma_px: float) -> np.ndarray:
    """2D Gaussian blur, reflective boundary, float64; sigma 0 is the identity.

    The kernel is normalized and reflection folds all mass back into the
    image, so the array's total sum is preserved.
    """
    if sigma_px < 0:
        raise ValueError("sigma_px must be >= 0")
    out = np.asarray(arr, dtype=np.float64)
    if sigma_px == 0:
        return out.copy()
    return gaussian_filter(out, sigma=sigma_px, mode="reflect")


def pixel_score(
    net: CevaeNet,
    image,
    cfg: AttributionConfig = AttributionConfig(),
    rng: np.random.Generator | None = None,
) -> PixelScoreMap:
    """Per-pixel anomaly map for one clean (unmasked) slice.

    rec_err is the absolute mean-path reconstruction error. kl_grad is the
    blurred absolute input-gradient of the configured target, guided and
    noise-averaged per ``cfg.mode``. The map is their elementwise product.
    """
    if rng is None:
        rng = numpy_rng(0, "smoothgrad")
    dtype = next(net.parameters()).dtype
    xb = _as_batch(image, dtype=dtype)
    x2d = xb[0, 0]

    with torch.no_grad():
        rec = net.decode(net.encode(xb).mu)
    rec_err = (xb - rec)[0, 0].abs().double().numpy()

    if cfg.backprop_target == "kl":
        def loss_fn(batch):
            return kl_std_normal(net.encode(batch))
    else:
        def loss_fn(batch):
            post = net.encode(batch)
            return kl_std_normal(post) + l1_per_sample(batch, net.decode(post.mu)).mean()

    grad_mode = "vanilla" if cfg.mode == "vanilla" else "guided"

    def grad_fn(img):
        return backprop_to_input(loss_fn, img, mode=grad_mode)

    if cfg.mode == "smooth_guided":
        sigma = cfg.smoothgrad_sigma
        if sigma is None:
            value_range = float(x2d.max() - x2d.min())
            sigma = 0.05 * value_range
        grad = smoothgrad(grad_fn, x2d, cfg.smoothgrad_n, sigma, rng)
    else:
        grad = grad_fn(x2d)

    kl_grad = gaussian_smooth(np.abs(grad.double().numpy()), cfg.smoothing_sigma_px)
    kl_grad = np.abs(kl_grad)
    return PixelScoreMap(scores=rec_err * kl_grad, rec_err=rec_err, kl_grad=kl_grad)


def score_dataset(
    net: CevaeNet,
    samples,
    cfg: AttributionConfig = AttributionConfig(),
    seed: int = 0,
    mc_samples: int = 0,
) -> tuple[list[SampleScore], list[PixelScoreMap]]:
    """Slice scores and pixel maps for a list of samples.

    Each slice draws its noise from a stream keyed by
    (seed, patient_id, slice_index), so results do not depend on ordering
    or on how the work is batched across workers.
    """
    slice_scores, maps = [], []
    for s in samples:
        gen = torch_generator(seed, "score-eps", s.patient_id, s.slice_index)
        rng = numpy_rng(seed, "score-noise", s.patient_id, s.slice_index)
        slice_scores.append(
            sample_score(net, s.image, mc_samples=mc_samples, generator=gen)
        )
        maps.append(pixel_score(net, s.image, cfg, rng=rng))
    return slice_scores, maps


def write_score_csv(path, rows: list[tuple[str, int, SampleScore]]) -> None:
    """Persist slice scores as patient_id,slice_index,sample_score,l_kl,l_rec_vae."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(SCORE_CSV_COLUMNS)
        for pid, idx, score in rows:
            writer.writerow(
                [pid, idx, repr(score.value), repr(score.l_kl), repr(score.l_rec_vae)]
            )


def read_score_csv(path) -> list[tuple[str, int, SampleScore]]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        if tuple(header) != SCORE_CSV_COLUMNS:
            raise ValueError(f"unexpected score CSV header {header}")
        rows = []
        for pid, idx, value, l_kl, l_rec in reader:
            rows.append(
                (pid, int(idx), SampleScore(float(value), float(l_kl), float(l_rec)))
            )
    return rows


def write_heatmap_png(path, arr) -> None:
    """8-bit inspection image of a score map (viridis, per-map min/max scaling)."""
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    scaled = np.zeros_like(arr) if hi == lo else (arr - lo) / (hi - lo)
    plt.imsave(path, scaled, cmap="viridis", vmin=0.0, vmax=1.0)
