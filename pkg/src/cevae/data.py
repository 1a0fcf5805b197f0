"""2D slice datasets: binary slice files, CSV manifests, preprocessing, phantoms.

A dataset is a directory of slice files plus a ``manifest.csv`` with columns
``patient_id,slice_path,mask_path,split``. Paths are relative to the manifest's
directory; an empty ``mask_path`` means the slice carries no annotation.

Slice files are a 16-byte header (magic ``CEVS``, u8 version, u8 dtype code,
u16 reserved, u32 height, u32 width, all little-endian) followed by row-major
pixels. Images are float32, masks uint8.
"""

from __future__ import annotations

import csv
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .seeding import numpy_rng

MAGIC = b"CEVS"
FORMAT_VERSION = 1
DTYPE_FLOAT32 = 1
DTYPE_UINT8 = 2
_HEADER = struct.Struct("<4sBBHII")

SPLITS = ("train", "val", "test")
MANIFEST_COLUMNS = ("patient_id", "slice_path", "mask_path", "split")


class SliceFormatError(ValueError):
    """A slice file or manifest does not match the on-disk format."""


class DegenerateInputError(ValueError):
    """Input data has no usable intensity variation."""


@dataclass
class SliceSample:
    """One 2D slice with optional ground-truth anomaly mask."""

    patient_id: str
    slice_index: int
    image: np.ndarray
    mask: np.ndarray | None = None
    split: str = "train"

    def __post_init__(self):
        if self.image.ndim != 2:
            raise ValueError(f"image must be 2D, got shape {self.image.shape}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if self.mask is not None:
            if self.mask.shape != self.image.shape:
                raise ValueError(
                    f"mask shape {self.mask.shape} != image shape {self.image.shape}"
                )
            vals = np.unique(self.mask)
            if not np.isin(vals, (0, 1)).all():
                raise ValueError(f"mask values must be 0/1, got {vals[:8]}")

    @property
    def is_anomalous(self) -> bool:
        return self.mask is not None and bool(self.mask.any())


@dataclass(frozen=True)
class ManifestEntry:
    patient_id: str
    slice_path: str
    mask_path: str  # "" when the slice has no annotation
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    resolution: int
    normalization: str = "patient_zscore"
    root: Path = field(default_factory=Path)

    def patients(self, split: str | None = None) -> list[str]:
        seen: dict[str, None] = {}
        for e in self.entries:
            if split is None or e.split == split:
                seen.setdefault(e.patient_id, None)
        return list(seen)

    def load_samples(self, split: str | None = None) -> list[SliceSample]:
        """Read slice arrays for one split (or all), in manifest order."""
        counters: dict[str, int] = {}
        samples = []
        for e in self.entries:
            idx = counters.get(e.patient_id, 0)
            counters[e.patient_id] = idx + 1
            if split is not None and e.split != split:
                continue
            image = read_slice(self.root / e.slice_path)
            mask = None
            if e.mask_path:
                mask = read_slice(self.root / e.mask_path)
                if mask.shape != image.shape:
                    raise SliceFormatError(
                        f"mask {e.mask_path} shape {mask.shape} does not match "
                        f"image {e.slice_path} shape {image.shape}"
                    )
            samples.append(SliceSample(e.patient_id, idx, image, mask, e.split))
        return samples


def write_slice(path, array: np.ndarray) -> None:
    """Write a 2D array as a slice file (float32 image or uint8 mask)."""
    array = np.asarray(array)
    if array.ndim != 2:
        raise ValueError(f"slice must be 2D, got shape {array.shape}")
    if array.dtype == np.uint8:
        code = DTYPE_UINT8
    else:
        code = DTYPE_FLOAT32
        array = array.astype(np.float32)
    h, w = array.shape
    payload = array.astype(array.dtype.newbyteorder("<"), copy=False).tobytes()
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, code, 0, h, w))
        f.write(payload)


def read_slice_header(path) -> tuple[int, int, int]:
    """Return (height, width, dtype code) without reading pixel data."""
    with open(path, "rb") as f:
        raw = f.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise SliceFormatError(f"truncated slice header in {path}")
    magic, version, code, _, h, w = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise SliceFormatError(f"bad magic {magic!r} in {path}")
    if version != FORMAT_VERSION:
        raise SliceFormatError(f"unsupported version {version} in {path}")
    if code not in (DTYPE_FLOAT32, DTYPE_UINT8):
        raise SliceFormatError(f"unknown dtype code {code} in {path}")
    return h, w, code


def read_slice(path) -> np.ndarray:
    """Read a slice file back into a 2D array, bit-exactly."""
    h, w, code = read_slice_header(path)
    dtype = np.dtype("<f4") if code == DTYPE_FLOAT32 else np.dtype("u1")
    with open(path, "rb") as f:
        f.seek(_HEADER.size)
        payload = f.read()
    expected = h * w * dtype.itemsize
    if len(payload) != expected:
        raise SliceFormatError(
            f"payload of {path} has {len(payload)} bytes, expected {expected}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(h, w).copy()


def save_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_COLUMNS)
        for e in manifest.entries:
            writer.writerow([e.patient_id, e.slice_path, e.mask_path, e.split])


def load_manifest(path) -> DatasetManifest:
    """Parse and validate a manifest CSV.

    Checks that every referenced file exists with a readable header, that all
    slices share one square resolution, and that no patient appears in more
    than one split.
    """
    path = Path(path)
    root = path.parent
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise SliceFormatError(f"empty manifest {path}") from None
        if tuple(header) != MANIFEST_COLUMNS:
            raise SliceFormatError(
                f"manifest {path} has header {header}, expected {list(MANIFEST_COLUMNS)}"
            )
        rows = [row for row in reader if row]

    entries = []
    patient_split: dict[str, str] = {}
    resolution = None
    for row in rows:
        if len(row) != 4:
            raise SliceFormatError(f"malformed manifest row {row} in {path}")
        pid, slice_path, mask_path, split = row
        if split not in SPLITS:
            raise SliceFormatError(f"unknown split {split!r} for {slice_path}")
        prev = patient_split.setdefault(pid, split)
        if prev != split:
            raise SliceFormatError(
                f"patient {pid} appears in splits {prev!r} and {split!r}"
            )
        full = root / slice_path
        if not full.is_file():
            raise SliceFormatError(f"manifest references missing file: {full}")
        h, w, _ = read_slice_header(full)
        if h != w:
            raise SliceFormatError(f"slice {full} is {h}x{w}, expected square")
        if resolution is None:
            resolution = h
        elif h != resolution:
            raise SliceFormatError(
                f"slice {full} resolution {h} != manifest resolution {resolution}"
            )
        if mask_path:
            mfull = root / mask_path
            if not mfull.is_file():
                raise SliceFormatError(f"manifest references missing file: {mfull}")
            mh, mw, _ = read_slice_header(mfull)
            if (mh, mw) != (h, w):
                raise SliceFormatError(
                    f"mask {mfull} is {mh}x{mw}, image is {h}x{w}"
                )
        entries.append(ManifestEntry(pid, slice_path, mask_path, split))
    if resolution is None:
        raise SliceFormatError(f"manifest {path} lists no slices")
    return DatasetManifest(entries=entries, resolution=resolution, root=root)


def zscore_normalize(slices, patient_id: str | None = None):
    """Z-score all slices of one patient jointly (pooled mean and std)."""
    if not slices:
        raise ValueError("need at least one slice")
    arrays = [np.asarray(s) for s in slices]
    pooled = np.concatenate([a.ravel() for a in arrays]).astype(np.float64)
    std = float(pooled.std())
    if std == 0.0:
        who = f" for patient {patient_id!r}" if patient_id is not None else ""
        raise DegenerateInputError(f"zero intensity variance{who}")
    mean = float(pooled.mean())
    out = []
    for a in arrays:
        dtype = a.dtype if np.issubdtype(a.dtype, np.floating) else np.float64
        out.append(((a.astype(np.float64) - mean) / std).astype(dtype))
    return out


def resample(image: np.ndarray, target: int) -> np.ndarray:
    """Bilinear resize of a 2D array to target x target (pixel-center aligned)."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"image must be 2D, got shape {image.shape}")
    if target <= 0:
        raise ValueError(f"target resolution must be positive, got {target}")
    if image.shape == (target, target):
        return image.copy()
    dtype = image.dtype if np.issubdtype(image.dtype, np.floating) else np.float64
    out = image.astype(np.float64)
    out = _resample_axis(out, target, axis=0)
    out = _resample_axis(out, target, axis=1)
    return out.astype(dtype)


def _resample_axis(arr: np.ndarray, target: int, axis: int) -> np.ndarray:
    size = arr.shape[axis]
    coords = (np.arange(target) + 0.5) * (size / target) - 0.5
    coords = np.clip(coords, 0.0, size - 1.0)
    i0 = np.floor(coords).astype(int)
    i1 = np.minimum(i0 + 1, size - 1)
    frac = coords - i0
    a0 = np.take(arr, i0, axis=axis)
    a1 = np.take(arr, i1, axis=axis)
    shape = [1, 1]
    shape[axis] = target
    # a0 + f*(a1-a0) keeps constant inputs exactly constant
    return a0 + frac.reshape(shape) * (a1 - a0)


def preprocess_patient(slices, target: int, order: str = "normalize_first"):
    """Patient z-score plus resampling, in the configured order."""
    if order == "normalize_first":
        return [resample(s, target) for s in zscore_normalize(slices)]
    if order == "resample_first":
        return zscore_normalize([resample(s, target) for s in slices])
    raise ValueError(f"unknown preprocessing order {order!r}")


@dataclass(frozen=True)
class PhantomConfig:
    """Synthetic slice dataset: smooth ellipsoidal textures, blob anomalies.

    Anomalies are injected only into test-split slices; the configured
    intensity shift is in z-score units of the patient's healthy texture.
    """

    n_train_patients: int = 10
    n_val_patients: int = 2
    n_test_patients: int = 4
    slices_per_patient: int = 16
    anomaly_fraction: float = 0.5
    anomaly_intensity_shift: float = 1.6
    anomaly_radius_range: tuple[int, int] = (4, 10)
    resolution: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.anomaly_fraction <= 1.0:
            raise ValueError("anomaly_fraction must lie in [0, 1]")
        lo, hi = self.anomaly_radius_range
        if lo < 1 or lo > hi:
            raise ValueError(f"bad anomaly_radius_range {self.anomaly_radius_range}")
        if hi >= self.resolution / 2:
            raise ValueError("anomaly radius max must be below resolution/2")
        if min(self.n_train_patients, self.n_val_patients, self.n_test_patients) < 0:
            raise ValueError("patient counts must be non-negative")
        if self.slices_per_patient < 1:
            raise ValueError("slices_per_patient must be >= 1")


def _patient_bumps(rng: np.random.Generator, res: int):
    n = int(rng.integers(3, 7))
    bumps = []
    for _ in range(n):
        cy, cx = rng.uniform(0.2 * res, 0.8 * res, size=2)
        ay, ax = rng.uniform(0.12 * res, 0.30 * res, size=2)
        theta = rng.uniform(0.0, np.pi)
        amp = rng.uniform(0.5, 1.0)
        bumps.append((cy, cx, ay, ax, theta, amp))
    return bumps


def _healthy_slice(rng: np.random.Generator, res: int, bumps) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    img = np.zeros((res, res))
    for cy, cx, ay, ax, theta, amp in bumps:
        jy, jx = rng.normal(0.0, 1.5, size=2)
        amp_j = amp * (1.0 + rng.normal(0.0, 0.05))
        dy, dx = yy - (cy + jy), xx - (cx + jx)
        c, s = np.cos(theta), np.sin(theta)
        u = (c * dx + s * dy) / ax
        v = (-s * dx + c * dy) / ay
        img += amp_j * np.exp(-0.5 * (u * u + v * v))
    noise = gaussian_filter(rng.standard_normal((res, res)), sigma=res / 16.0)
    img += 0.04 * noise / max(noise.std(), 1e-12)
    return img


def _inject_anomaly(img, rng: np.random.Generator, radius_range, shift):
    res = img.shape[0]
    lo, hi = radius_range
    r = int(rng.integers(lo, hi + 1))
    cy = rng.uniform(0.25 * res, 0.75 * res)
    cx = rng.uniform(0.25 * res, 0.75 * res)
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    mask = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.uint8)
    return img + shift * mask, mask


def _generate_patient(pid: str, split: str, cfg: PhantomConfig, index: int, out_dir: Path):
    rng = numpy_rng(cfg.seed, "patient", index)
    bumps = _patient_bumps(rng, cfg.resolution)
    images = [_healthy_slice(rng, cfg.resolution, bumps) for _ in range(cfg.slices_per_patient)]
    masks: list[np.ndarray | None] = [None] * cfg.slices_per_patient

    if split == "test" and cfg.anomaly_fraction > 0:
        n_anom = int(round(cfg.anomaly_fraction * cfg.slices_per_patient))
        chosen = rng.choice(cfg.slices_per_patient, size=n_anom, replace=False)
        # shift is specified in z-units of the pre-injection texture
        healthy_std = float(np.concatenate([im.ravel() for im in images]).std())
        for k in sorted(int(c) for c in chosen):
            images[k], masks[k] = _inject_anomaly(
                images[k], rng, cfg.anomaly_radius_range,
                cfg.anomaly_intensity_shift * healthy_std,
            )

    images = zscore_normalize(images, pid)
    entries = []
    for k, (img, mask) in enumerate(zip(images, masks)):
        slice_name = f"{pid}_{k:03d}.slc"
        write_slice(out_dir / slice_name, img.astype(np.float32))
        mask_name = ""
        if mask is not None:
            mask_name = f"{pid}_{k:03d}.msk"
            write_slice(out_dir / mask_name, mask)
        entries.append(ManifestEntry(pid, slice_name, mask_name, split))
    return entries


def generate_phantoms(cfg: PhantomConfig, out_dir, max_workers: int = 1) -> DatasetManifest:
    """Write a phantom dataset plus manifest.csv; deterministic for a fixed seed.

    Each patient draws from its own seeded stream, so generation may run
    with any worker count without changing a byte of output.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plan = []
    idx = 0
    for split, count in (
        ("train", cfg.n_train_patients),
        ("val", cfg.n_val_patients),
        ("test", cfg.n_test_patients),
    ):
        for _ in range(count):
            plan.append((f"p{idx:03d}", split, idx))
            idx += 1

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = [
                pool.submit(_generate_patient, pid, split, cfg, i, out_dir)
                for pid, split, i in plan
            ]
            per_patient = [f.result() for f in futures]
    else:
        per_patient = [
            _generate_patient(pid, split, cfg, i, out_dir) for pid, split, i in plan
        ]

    entries = [e for chunk in per_patient for e in chunk]
    manifest = DatasetManifest(entries=entries, resolution=cfg.resolution, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.csv")
    return manifest
