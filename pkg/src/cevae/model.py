"""Convolutional encoder/decoder with a shared trunk and twin latent heads.

The encoder is a stack of stride-2 convolutions followed by one valid
convolution that collapses the remaining spatial extent to 1x1 and emits
2*latent_dim channels: the first half is the posterior mean, the second half
the posterior log standard deviation. The decoder mirrors the stack with
transposed convolutions. Both the variational path and the context
(inpainting) path run through the same weights; the context path reads only
the mean head.

All rectifiers go through :func:`rectify`, whose backward pass switches to
the guided rule (zero the signal where the upstream gradient or the forward
pre-activation is negative) inside a :func:`guided_backprop` block.
"""

from __future__ import annotations

import dataclasses
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

_GUIDED_MODE: ContextVar[bool] = ContextVar("guided_mode", default=False)


@contextmanager
def guided_backprop():
    """Make every rectify() backward apply the guided rule until exit."""
    token = _GUIDED_MODE.set(True)
    try:
        yield
    finally:
        _GUIDED_MODE.reset(token)


def guided_mode_active() -> bool:
    return _GUIDED_MODE.get()


class _GuidedLeakyReLU(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, slope):
        ctx.save_for_backward(x)
        ctx.slope = slope
        return torch.where(x > 0, x, slope * x)

    @staticmethod
    def backward(ctx, grad_out):
        (x,) = ctx.saved_tensors
        if _GUIDED_MODE.get():
            keep = (grad_out >= 0) & (x >= 0)
            return grad_out * keep.to(grad_out.dtype), None
        grad_in = torch.where(x > 0, grad_out, ctx.slope * grad_out)
        return grad_in, None


def rectify(x: torch.Tensor, slope: float = 0.01) -> torch.Tensor:
    """LeakyReLU whose backward pass honors the guided-backprop context."""
    return _GuidedLeakyReLU.apply(x, slope)


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 64
    channels: tuple[int, ...] = (16, 64, 256, 1024)
    latent_dim: int = 1024
    kernel: int = 4
    stride: int = 2
    leaky_slope: float = 0.01
    coordconv: bool = True
    coordconv_all_layers: bool = False

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.kernel < self.stride:
            raise ValueError("kernel must be >= stride")
        if (self.kernel - self.stride) % 2:
            raise ValueError("kernel - stride must be even for exact halving")
        if not self.channels:
            raise ValueError("need at least one channel count")
        if self.resolution % self.stride ** (len(self.channels) + 1):
            raise ValueError(
                f"resolution {self.resolution} not divisible by "
                f"stride^(n_layers+1) = {self.stride ** (len(self.channels) + 1)}"
            )

    @property
    def head_kernel(self) -> int:
        """Spatial extent left after the strided trunk; consumed by one valid conv."""
        return self.resolution // self.stride ** len(self.channels)


@dataclass
class LatentPosterior:
    """Diagonal Gaussian q(z|x): per-sample mean and log standard deviation."""

    mu: torch.Tensor
    log_sigma: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_sigma.shape:
            raise ValueError(
                f"mu shape {tuple(self.mu.shape)} != "
                f"log_sigma shape {tuple(self.log_sigma.shape)}"
            )


def add_coord_channels(batch: torch.Tensor) -> torch.Tensor:
    """Append x- and y-coordinate channels, each linearly spaced in [-1, 1].

    Pixel (row 0, col 0) receives (-1, -1); the opposite corner receives
    (1, 1). The x channel varies along width, the y channel along height.
    """
    if batch.ndim != 4:
        raise ValueError(f"expected (N, C, H, W), got {tuple(batch.shape)}")
    n, _, h, w = batch.shape
    kw = dict(dtype=batch.dtype, device=batch.device)
    xs = torch.linspace(-1.0, 1.0, w, **kw) if w > 1 else torch.zeros(1, **kw)
    ys = torch.linspace(-1.0, 1.0, h, **kw) if h > 1 else torch.zeros(1, **kw)
    x_chan = xs.view(1, 1, 1, w).expand(n, 1, h, w)
    y_chan = ys.view(1, 1, h, 1).expand(n, 1, h, w)
    return torch.cat([batch, x_chan, y_chan], dim=1)


def reparameterize(post: LatentPosterior, eps: torch.Tensor) -> torch.Tensor:
    """z = mu + exp(log_sigma) * eps."""
    if eps.shape != post.mu.shape:
        raise ValueError(
            f"eps shape {tuple(eps.shape)} != mu shape {tuple(post.mu.shape)}"
        )
    return post.mu + torch.exp(post.log_sigma) * eps


class CevaeNet(nn.Module):
    """Shared-weight encoder/decoder pair for all training branches."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        pad = (cfg.kernel - cfg.stride) // 2
        coord_extra = 2 if cfg.coordconv else 0
        all_extra = 2 if (cfg.coordconv and cfg.coordconv_all_layers) else 0

        enc = []
        in_ch = 1 + coord_extra
        for out_ch in cfg.channels:
            enc.append(nn.Conv2d(in_ch, out_ch, cfg.kernel, cfg.stride, pad))
            in_ch = out_ch + all_extra
        self.enc_convs = nn.ModuleList(enc)
        self.head = nn.Conv2d(in_ch, 2 * cfg.latent_dim, cfg.head_kernel)

        dec = [nn.ConvTranspose2d(cfg.latent_dim, cfg.channels[-1], cfg.head_kernel)]
        dec_channels = list(reversed(cfg.channels)) + [1]
        for a, b in zip(dec_channels[:-1], dec_channels[1:]):
            dec.append(nn.ConvTranspose2d(a, b, cfg.kernel, cfg.stride, pad))
        self.dec_convs = nn.ModuleList(dec)

    def _check_input(self, x: torch.Tensor) -> None:
        res = self.cfg.resolution
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (res, res):
            raise ValueError(
                f"expected (N, 1, {res}, {res}), got {tuple(x.shape)}"
            )

    def encode(self, x: torch.Tensor) -> LatentPosterior:
        self._check_input(x)
        cfg = self.cfg
        h = add_coord_channels(x) if cfg.coordconv else x
        for conv in self.enc_convs:
            h = rectify(conv(h), cfg.leaky_slope)
            if cfg.coordconv and cfg.coordconv_all_layers:
                h = add_coord_channels(h)
        out = self.head(h).flatten(1)
        return LatentPosterior(
            mu=out[:, : cfg.latent_dim], log_sigma=out[:, cfg.latent_dim :]
        )

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if z.ndim != 2 or z.shape[1] != cfg.latent_dim:
            raise ValueError(
                f"expected (N, {cfg.latent_dim}), got {tuple(z.shape)}"
            )
        h = z.view(z.shape[0], cfg.latent_dim, 1, 1)
        last = len(self.dec_convs) - 1
        for i, conv in enumerate(self.dec_convs):
            h = conv(h)
            if i != last:
                h = rectify(h, cfg.leaky_slope)
        return h

    def forward_vae(
        self,
        x: torch.Tensor,
        eps: torch.Tensor | None = None,
        generator: torch.Generator | None = None,
    ) -> tuple[torch.Tensor, LatentPosterior, torch.Tensor]:
        """Variational path: sample z with the reparameterization trick."""
        post = self.encode(x)
        if eps is None:
            eps = torch.randn(
                post.mu.shape, generator=generator, dtype=x.dtype, device=x.device
            )
        z = reparameterize(post, eps)
        return self.decode(z), post, z

    def forward_ce(self, x_masked: torch.Tensor) -> torch.Tensor:
        """Context path: deterministic reconstruction through the mean head."""
        return self.decode(self.encode(x_masked).mu)

    forward = forward_vae


def init_weights(net: CevaeNet, generator: torch.Generator) -> None:
    """Fan-in-scaled uniform init; the log-sigma head bias starts at zero.

    Parameters are visited in a fixed name order so the result depends only
    on the generator state.
    """
    for name, param in sorted(net.named_parameters()):
        if param.ndim >= 2:
            fan_in = param.shape[1] * param[0, 0].numel()
        else:
            mod_name = name.rsplit(".", 1)[0]
            weight = dict(net.named_parameters())[mod_name + ".weight"]
            fan_in = weight.shape[1] * weight[0, 0].numel()
        bound = fan_in ** -0.5
        with torch.no_grad():
            param.uniform_(-bound, bound, generator=generator)
    with torch.no_grad():
        net.head.bias[net.cfg.latent_dim :].zero_()


def save_checkpoint(net: CevaeNet, path) -> None:
    """Write config echo plus named parameter tensors; round-trips bit-exactly."""
    payload = {
        "model_config": dataclasses.asdict(net.cfg),
        "state_dict": net.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> CevaeNet:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    cfg = ModelConfig(**payload["model_config"])
    net = CevaeNet(cfg)
    first = next(iter(payload["state_dict"].values()))
    if first.dtype != torch.float32:
        net.to(first.dtype)
    net.load_state_dict(payload["state_dict"])
    return net
