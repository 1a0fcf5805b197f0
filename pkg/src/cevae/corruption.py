"""Input corruption for context reconstruction, plus training augmentation.

The context branch trains on images with 1-3 square regions overwritten by
values drawn from the current batch's own pixel distribution; the model must
restore the unmasked original. Augmentation (mirror, small rotation,
multiplicative brightness) is applied before masking so the reconstruction
target is the augmented but uncorrupted image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.ndimage import rotate as nd_rotate


@dataclass(frozen=True)
class MaskSpec:
    """1-3 square regions to overwrite: (top, left, height, width, fill_value)."""

    rects: tuple[tuple[int, int, int, int, float], ...]

    def __post_init__(self):
        if not 1 <= len(self.rects) <= 3:
            raise ValueError(f"need 1-3 squares, got {len(self.rects)}")
        for top, left, height, width, _ in self.rects:
            if height != width:
                raise ValueError(f"regions must be square, got {height}x{width}")
            if min(top, left, height) < 0 or height < 1:
                raise ValueError(f"bad region {(top, left, height, width)}")


@dataclass(frozen=True)
class AugmentSpec:
    mirror: bool
    rotation_degrees: float
    brightness_factor: float

    def __post_init__(self):
        if self.brightness_factor <= 0:
            raise ValueError("brightness_factor must be > 0")


def sample_mask_spec(
    rng: np.random.Generator,
    resolution: int,
    batch_pixels: np.ndarray,
) -> MaskSpec:
    """Draw 1-3 contained squares with sides in [resolution/8, resolution/2].

    Each square's fill value is one pixel drawn uniformly from
    ``batch_pixels``, so the corruption matches the data distribution.
    """
    if resolution < 8:
        raise ValueError(f"resolution {resolution} too small to mask")
    pool = np.asarray(batch_pixels).ravel()
    if pool.size == 0:
        raise ValueError("batch_pixels must be nonempty")
    n = int(rng.integers(1, 4))
    lo, hi = resolution // 8, resolution // 2
    rects = []
    for _ in range(n):
        side = int(rng.integers(lo, hi + 1))
        top = int(rng.integers(0, resolution - side + 1))
        left = int(rng.integers(0, resolution - side + 1))
        fill = float(pool[int(rng.integers(0, pool.size))])
        rects.append((top, left, side, side, fill))
    return MaskSpec(rects=tuple(rects))


def apply_mask(
    image: torch.Tensor,
    spec: MaskSpec,
    rng: np.random.Generator | None = None,
    batch_pixels: np.ndarray | None = None,
    per_pixel: bool = False,
) -> torch.Tensor:
    """Overwrite each listed square with its fill; later squares win overlaps.

    With ``per_pixel=True`` every masked pixel draws its own value from
    ``batch_pixels`` instead of using the square's single fill value.
    """
    if image.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {tuple(image.shape)}")
    h, w = image.shape
    out = image.clone()
    for top, left, height, width, fill in spec.rects:
        if top + height > h or left + width > w:
            raise ValueError(f"square {(top, left, height, width)} leaves the image")
        if per_pixel:
            if rng is None or batch_pixels is None:
                raise ValueError("per_pixel masking needs rng and batch_pixels")
            pool = np.asarray(batch_pixels).ravel()
            draw = pool[rng.integers(0, pool.size, size=(height, width))]
            out[top : top + height, left : left + width] = torch.as_tensor(
                draw, dtype=image.dtype
            )
        else:
            out[top : top + height, left : left + width] = fill
    return out


def mask_batch(
    batch: torch.Tensor,
    rng: np.random.Generator,
    per_pixel: bool = False,
) -> torch.Tensor:
    """Independently corrupt each image of an (N, 1, H, W) batch.

    Fill values come from the whole batch's pixels.
    """
    if batch.ndim != 4 or batch.shape[1] != 1:
        raise ValueError(f"expected (N, 1, H, W), got {tuple(batch.shape)}")
    res = batch.shape[-1]
    pool = batch.detach().cpu().numpy().ravel()
    out = batch.clone()
    for i in range(batch.shape[0]):
        spec = sample_mask_spec(rng, res, pool)
        out[i, 0] = apply_mask(batch[i, 0], spec, rng, pool, per_pixel=per_pixel)
    return out


def gaussian_corrupt(
    batch: torch.Tensor, rng: np.random.Generator, sigma: float = 0.1
) -> torch.Tensor:
    """Additive white noise, the denoising-style alternative to masking."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return batch.clone()
    noise = rng.normal(0.0, sigma, size=tuple(batch.shape))
    return batch + torch.as_tensor(noise, dtype=batch.dtype)


def sample_augment_spec(
    rng: np.random.Generator,
    max_rotation_degrees: float = 15.0,
    brightness_range: tuple[float, float] = (0.9, 1.1),
) -> AugmentSpec:
    return AugmentSpec(
        mirror=bool(rng.integers(0, 2)),
        rotation_degrees=float(rng.uniform(-max_rotation_degrees, max_rotation_degrees)),
        brightness_factor=float(rng.uniform(*brightness_range)),
    )


def augment(image: np.ndarray, spec: AugmentSpec) -> np.ndarray:
    """Mirror horizontally, rotate about the center (bilinear, zero fill),
    then scale intensities."""
    out = np.asarray(image, dtype=np.float64)
    if out.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {out.shape}")
    if spec.mirror:
        out = out[:, ::-1]
    if spec.rotation_degrees != 0.0:
        out = nd_rotate(out, spec.rotation_degrees, reshape=False, order=1, cval=0.0)
    out = out * spec.brightness_factor
    return np.ascontiguousarray(out)


def augment_batch(batch: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Apply an independent random augmentation to each image of a batch."""
    if batch.ndim != 4 or batch.shape[1] != 1:
        raise ValueError(f"expected (N, 1, H, W), got {tuple(batch.shape)}")
    arrays = batch.detach().cpu().numpy()
    out = np.empty_like(arrays)
    for i in range(arrays.shape[0]):
        spec = sample_augment_spec(rng)
        out[i, 0] = augment(arrays[i, 0], spec)
    return torch.as_tensor(out, dtype=batch.dtype)
