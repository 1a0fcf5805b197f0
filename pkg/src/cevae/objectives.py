"""Training objectives: KL to the standard-normal prior, reconstruction terms,
the factor-weighted combined loss, and the AE/DAE/CE/VAE baselines.

Reduction convention everywhere: sum over latent dimensions or pixels within
a sample, mean over the batch, so every term lives on a per-sample scale.

The combination knob ``cevae_factor`` f interpolates convexly:
``total = (1-f) * (l_kl + l_rec_vae) + f * l_rec_ce``. f=0 trains a plain
variational autoencoder, f=1 a pure context (inpainting) reconstructor; the
context term carries no KL constraint at any f.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .model import CevaeNet, LatentPosterior

BASELINE_KINDS = ("AE", "DAE", "CE", "VAE")


def combine_losses(l_kl, l_rec_vae, l_rec_ce, factor):
    """Convex combination of the variational and context terms."""
    return (1.0 - factor) * (l_kl + l_rec_vae) + factor * l_rec_ce


@dataclass
class LossBreakdown:
    """Scalar bookkeeping for one loss evaluation.

    The float fields are exact 64-bit records; ``total_tensor``, when
    present, is the differentiable value on the model's dtype and carries
    the autograd graph.
    """

    l_kl: float
    l_rec_vae: float
    l_rec_ce: float
    cevae_factor: float
    total: float
    total_tensor: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for name in ("l_kl", "l_rec_vae", "l_rec_ce", "total", "cevae_factor"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise FloatingPointError(f"non-finite loss term {name}={value}")
        if not 0.0 <= self.cevae_factor <= 1.0:
            raise ValueError(f"cevae_factor must lie in [0, 1], got {self.cevae_factor}")
        expected = combine_losses(
            self.l_kl, self.l_rec_vae, self.l_rec_ce, self.cevae_factor
        )
        if abs(self.total - expected) > 1e-9:
            raise ValueError(
                f"total {self.total!r} inconsistent with components (expected {expected!r})"
            )


def _check_finite_posterior(post: LatentPosterior) -> None:
    if not bool(torch.isfinite(post.mu).all() & torch.isfinite(post.log_sigma).all()):
        raise FloatingPointError("posterior contains non-finite values")


def kl_std_normal_per_sample(post: LatentPosterior) -> torch.Tensor:
    """KL(N(mu, diag(sigma^2)) || N(0, I)) per sample, summed over latent dims."""
    _check_finite_posterior(post)
    mu, log_sigma = post.mu, post.log_sigma
    return 0.5 * (mu * mu + torch.exp(2.0 * log_sigma) - 2.0 * log_sigma - 1.0).sum(dim=1)


def kl_std_normal(post: LatentPosterior) -> torch.Tensor:
    """Batch mean of the per-sample KL; zero iff the posterior is the prior."""
    return kl_std_normal_per_sample(post).mean()


def _check_same_shape(x: torch.Tensor, x_hat: torch.Tensor) -> None:
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")


def l1_per_sample(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    _check_same_shape(x, x_hat)
    return (x - x_hat).abs().flatten(1).sum(dim=1)


def l1_reconstruction(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Sum of absolute errors over each sample's pixels, averaged over the batch."""
    return l1_per_sample(x, x_hat).mean()


def mse_per_sample(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    _check_same_shape(x, x_hat)
    diff = x - x_hat
    return (diff * diff).flatten(1).sum(dim=1)


def mse_reconstruction(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Sum of squared errors over each sample's pixels, averaged over the batch."""
    return mse_per_sample(x, x_hat).mean()


def cevae_loss(
    net: CevaeNet,
    x: torch.Tensor,
    x_masked: torch.Tensor | None,
    factor: float,
    eps: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> LossBreakdown:
    """Combined objective over a batch.

    The variational branch runs on the clean input; the context branch
    reconstructs the clean input from ``x_masked`` through the mean head
    only. Branches whose weight is exactly zero are skipped, which also
    skips their rng draws. ``eps`` (or ``generator``) fixes the
    reparameterization noise.
    """
    if not 0.0 <= factor <= 1.0:
        raise ValueError(f"factor must lie in [0, 1], got {factor}")
    l_kl_t = l_rec_vae_t = l_rec_ce_t = None

    if factor < 1.0:
        x_hat, post, _ = net.forward_vae(x, eps=eps, generator=generator)
        l_kl_t = kl_std_normal(post)
        l_rec_vae_t = l1_reconstruction(x, x_hat)
    if factor > 0.0:
        if x_masked is None:
            raise ValueError("factor > 0 requires a corrupted input batch")
        _check_same_shape(x, x_masked)
        l_rec_ce_t = l1_reconstruction(x, net.forward_ce(x_masked))

    if factor == 0.0:
        total_t = l_kl_t + l_rec_vae_t
    elif factor == 1.0:
        total_t = l_rec_ce_t
    else:
        total_t = combine_losses(l_kl_t, l_rec_vae_t, l_rec_ce_t, factor)

    l_kl = float(l_kl_t.detach()) if l_kl_t is not None else 0.0
    l_rec_vae = float(l_rec_vae_t.detach()) if l_rec_vae_t is not None else 0.0
    l_rec_ce = float(l_rec_ce_t.detach()) if l_rec_ce_t is not None else 0.0
    return LossBreakdown(
        l_kl=l_kl,
        l_rec_vae=l_rec_vae,
        l_rec_ce=l_rec_ce,
        cevae_factor=factor,
        total=combine_losses(l_kl, l_rec_vae, l_rec_ce, factor),
        total_tensor=total_t,
    )


def baseline_loss(
    net: CevaeNet,
    kind: str,
    x: torch.Tensor,
    x_corrupted: torch.Tensor | None = None,
    eps: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> LossBreakdown:
    """Benchmark objectives sharing the same network.

    AE reconstructs the clean input through the mean path; DAE and CE do the
    same from a corrupted input (Gaussian noise and masking respectively,
    supplied by the caller); VAE is the factor-0 combined loss.
    """
    if kind == "VAE":
        return cevae_loss(net, x, None, 0.0, eps=eps, generator=generator)
    if kind == "CE":
        return cevae_loss(net, x, x_corrupted, 1.0)
    if kind in ("AE", "DAE"):
        if kind == "AE":
            x_corrupted = x
        elif x_corrupted is None:
            raise ValueError("DAE needs a noise-corrupted input batch")
        _check_same_shape(x, x_corrupted)
        rec_t = l1_reconstruction(x, net.forward_ce(x_corrupted))
        rec = float(rec_t.detach())
        return LossBreakdown(
            l_kl=0.0,
            l_rec_vae=0.0,
            l_rec_ce=rec,
            cevae_factor=1.0,
            total=rec,
            total_tensor=rec_t,
        )
    raise ValueError(f"unknown baseline kind {kind!r}, expected one of {BASELINE_KINDS}")
