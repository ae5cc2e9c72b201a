"""Synthetic low-light degradation, paired corpora and patch sampling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


@dataclass(frozen=True)
class DegradationSpec:
    """Gamma darkening followed by bicubic downsampling.

    ``gamma_range`` switches to a per-image gamma drawn uniformly from the range.
    """

    gamma: float = 2.2
    scale: int = 2
    gamma_range: tuple[float, float] | None = None

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if self.scale not in (2, 4):
            raise ValueError(f"scale must be 2 or 4, got {self.scale}")
        if self.gamma_range is not None:
            lo, hi = self.gamma_range
            if not (0 < lo <= hi):
                raise ValueError(f"invalid gamma range {self.gamma_range}")

    def sample_gamma(self, rng: np.random.Generator) -> float:
        if self.gamma_range is None:
            return self.gamma
        return float(rng.uniform(*self.gamma_range))


@dataclass
class PairedSample:
    hr: np.ndarray  # 3 x sH x sW
    lr: np.ndarray  # 3 x H x W
    id: str
    gamma: float = float("nan")


def gamma_darken(img: np.ndarray, gamma: float) -> np.ndarray:
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    img = np.asarray(img)
    return np.clip(img, 0.0, 1.0) ** gamma


# ---------------------------------------------------------------------------
# bicubic


def cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel; a = -0.5 is Catmull-Rom."""
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def resize_weights(in_size: int, out_size: int, antialias: bool = True, a: float = -0.5) -> np.ndarray:
    """Dense out_size x in_size interpolation matrix with edge-clamped taps.

    Pixel centres are aligned (src = (dst + 0.5) / scale - 0.5). When shrinking
    with ``antialias`` the kernel is stretched by 1/scale, as MATLAB's imresize does.
    """
    scale = out_size / in_size
    stretch = scale if (antialias and scale < 1) else 1.0
    support = 2.0 / stretch
    centers = (np.arange(out_size) + 0.5) / scale - 0.5
    first = np.floor(centers - support).astype(int) + 1
    taps = int(math.ceil(2 * support)) + 1
    idx = first[:, None] + np.arange(taps)[None, :]
    w = cubic_kernel((centers[:, None] - idx) * stretch, a)
    w = w / w.sum(axis=1, keepdims=True)
    mat = np.zeros((out_size, in_size))
    rows = np.repeat(np.arange(out_size), taps)
    np.add.at(mat, (rows, np.clip(idx, 0, in_size - 1).ravel()), w.ravel())
    return mat


def bicubic_resize(img: np.ndarray, size: tuple[int, int], antialias: bool = True, clip: bool = True) -> np.ndarray:
    """Resize a C x H x W (or H x W) image to ``size = (H', W')``."""
    img = np.asarray(img, dtype=np.float64)
    out_h, out_w = size
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"target size must be positive, got {size}")
    h, w = img.shape[-2:]
    if (out_h, out_w) == (h, w):
        return img.copy()
    wy = resize_weights(h, out_h, antialias)
    wx = resize_weights(w, out_w, antialias)
    out = np.einsum("ih,...hw,jw->...ij", wy, img, wx)
    return np.clip(out, 0.0, 1.0) if clip else out


def degrade(hr: np.ndarray, gamma: float, scale: int) -> np.ndarray:
    """Darken with gamma, then bicubic-downsample by ``scale``."""
    h, w = hr.shape[-2:]
    if h % scale or w % scale:
        raise ValueError(f"HR dims {h}x{w} not divisible by scale {scale}")
    return bicubic_resize(gamma_darken(hr, gamma), (h // scale, w // scale))


def bicubic_upscale(lr: np.ndarray, scale: int) -> np.ndarray:
    h, w = lr.shape[-2:]
    return bicubic_resize(lr, (h * scale, w * scale))


# ---------------------------------------------------------------------------
# colour


def rgb_to_y(img: np.ndarray, studio: bool = False) -> np.ndarray:
    """BT.601 luma of an N x 3 x H x W (or 3 x H x W) image in [0, 1].

    Full range by default; ``studio`` gives the 16-235 swing.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (3, 4) or img.shape[-3] != 3:
        raise ValueError(f"expected (N x) 3 x H x W image, got shape {img.shape}")
    r, g, b = img[..., 0, :, :], img[..., 1, :, :], img[..., 2, :, :]
    if studio:
        y = (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0
    else:
        y = 0.299 * r + 0.587 * g + 0.114 * b
    return np.expand_dims(y, -3)


# ---------------------------------------------------------------------------
# image io


def read_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path: str | Path, img: np.ndarray) -> None:
    """Write a 3 x H x W RGB or H x W / 1 x H x W grayscale float image as 8-bit PNG."""
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim == 3:
        pil = Image.fromarray(to_uint8(img.transpose(1, 2, 0)), mode="RGB")
    else:
        pil = Image.fromarray(to_uint8(img), mode="L")
    pil.save(path, format="PNG")


# ---------------------------------------------------------------------------
# synthetic charts (desk-scale stand-in for a natural HR corpus)


def synthetic_chart(size: int, rng: np.random.Generator) -> np.ndarray:
    """Random procedural test chart: colour gradients, discs, stripes and a checker patch."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    img = np.empty((3, size, size))
    for c in range(3):
        a, b, off = rng.uniform(-0.6, 0.6, 3)
        img[c] = 0.45 + off * 0.4 + a * xx + b * yy
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0.1, 0.9, 2)
        r = rng.uniform(0.06, 0.25)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        img[:, mask] = rng.uniform(0.05, 1.0, (3, 1))
    freq = rng.uniform(6, 20)
    angle = rng.uniform(0, np.pi)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)))
    y0, x0 = rng.integers(0, size // 2, 2)
    band = (slice(y0, y0 + size // 3), slice(x0, x0 + size // 3))
    img[:, band[0], band[1]] = 0.7 * img[:, band[0], band[1]] + 0.3 * stripes[band]
    cell = max(2, int(rng.integers(2, 6)))
    checker = ((np.arange(size)[:, None] // cell + np.arange(size)[None, :] // cell) % 2).astype(float)
    y1, x1 = rng.integers(size // 2, size - size // 6, 2)
    cb = (slice(y1, y1 + size // 6), slice(x1, x1 + size // 6))
    img[:, cb[0], cb[1]] = 0.2 + 0.6 * checker[cb]
    img += rng.normal(0, 0.01, img.shape)
    return np.clip(img, 0.0, 1.0)


def write_synthetic_charts(out_dir: str | Path, count: int, size: int = 96, seed: int = 0) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        p = out_dir / f"chart_{i:04d}.png"
        write_image(p, synthetic_chart(size, rng))
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# corpus


@dataclass
class ManifestEntry:
    id: str
    hr_path: Path
    lr_path: Path
    gamma: float


def build_corpus(hr_dir: str | Path, spec: DegradationSpec, out_dir: str | Path, seed: int = 0) -> list[ManifestEntry]:
    """Degrade every image in ``hr_dir`` and write ``out_dir/manifest.txt``.

    HR images are cropped to multiples of the scale and stored next to their LR
    counterparts so the manifest pairs are exactly aligned.
    """
    hr_dir, out_dir = Path(hr_dir), Path(out_dir)
    files = sorted(p for p in hr_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES) if hr_dir.is_dir() else []
    if not files:
        raise FileNotFoundError(f"no images found in {hr_dir}")
    (out_dir / "hr").mkdir(parents=True, exist_ok=True)
    (out_dir / "lr").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    s = spec.scale
    entries = []
    for path in files:
        gamma = spec.sample_gamma(rng)
        try:
            hr = read_image(path)
        except OSError as exc:
            log.warning("skipping unreadable image %s: %s", path, exc)
            continue
        h, w = hr.shape[1] // s * s, hr.shape[2] // s * s
        if h == 0 or w == 0:
            log.warning("skipping %s: smaller than scale %d", path, s)
            continue
        hr = hr[:, :h, :w]
        lr = degrade(hr, gamma, s)
        ident = path.stem
        hr_out, lr_out = out_dir / "hr" / f"{ident}.png", out_dir / "lr" / f"{ident}.png"
        write_image(hr_out, hr)
        write_image(lr_out, lr)
        entries.append(ManifestEntry(ident, hr_out, lr_out, gamma))
    if not entries:
        raise FileNotFoundError(f"no decodable images in {hr_dir}")
    write_manifest(out_dir / "manifest.txt", entries)
    return entries


def write_manifest(path: str | Path, entries: Sequence[ManifestEntry]) -> None:
    path = Path(path)
    lines = []
    for e in entries:
        lines.append(f"{e.id}\t{_rel(e.hr_path, path.parent)}\t{_rel(e.lr_path, path.parent)}\t{e.gamma:.6g}")
    path.write_text("\n".join(lines) + "\n")


def _rel(p: Path, root: Path) -> str:
    try:
        return str(Path(p).resolve().relative_to(root.resolve()))
    except ValueError:
        return str(p)


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        ident, hr, lr, gamma = parts
        entries.append(ManifestEntry(ident, path.parent / hr, path.parent / lr, float(gamma)))
    return entries


def load_pairs(manifest: str | Path, scale: int | None = None) -> list[PairedSample]:
    pairs = []
    for e in read_manifest(manifest):
        hr, lr = read_image(e.hr_path), read_image(e.lr_path)
        s = hr.shape[1] // lr.shape[1]
        if hr.shape[1:] != (lr.shape[1] * s, lr.shape[2] * s):
            raise ValueError(f"{e.id}: HR {hr.shape[1:]} is not an integer multiple of LR {lr.shape[1:]}")
        if scale is not None and s != scale:
            raise ValueError(f"{e.id}: pair scale {s} does not match expected {scale}")
        pairs.append(PairedSample(hr, lr, e.id, e.gamma))
    return pairs


# ---------------------------------------------------------------------------
# patches


def crop_pair(pair: PairedSample, top: int, left: int, lr_patch: int, scale: int) -> tuple[np.ndarray, np.ndarray]:
    lr = pair.lr[:, top:top + lr_patch, left:left + lr_patch]
    hs, ws = top * scale, left * scale
    hr = pair.hr[:, hs:hs + lr_patch * scale, ws:ws + lr_patch * scale]
    return lr, hr


def _augment(img: np.ndarray, flip_h: bool, flip_v: bool, rot: int) -> np.ndarray:
    if flip_h:
        img = img[:, :, ::-1]
    if flip_v:
        img = img[:, ::-1, :]
    return np.rot90(img, rot, axes=(1, 2))


def patch_sampler(
    pairs: Sequence[PairedSample],
    lr_patch: int,
    batch: int,
    seed: int = 0,
    scale: int | None = None,
    augment: bool = False,
    dtype=np.float32,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Endless stream of aligned (LR, HR) batches: B x 3 x p x p and B x 3 x sp x sp."""
    if not pairs:
        raise ValueError("no pairs to sample from")
    if lr_patch < 1 or batch < 1:
        raise ValueError("lr_patch and batch must be positive")
    if scale is None:
        scale = pairs[0].hr.shape[1] // pairs[0].lr.shape[1]
    for p in pairs:
        if lr_patch > min(p.lr.shape[1:]):
            raise ValueError(f"patch {lr_patch} larger than LR image {p.id} of size {p.lr.shape[1:]}")
    rng = np.random.default_rng(seed)
    while True:
        lrs, hrs = [], []
        for _ in range(batch):
            pair = pairs[int(rng.integers(len(pairs)))]
            top = int(rng.integers(pair.lr.shape[1] - lr_patch + 1))
            left = int(rng.integers(pair.lr.shape[2] - lr_patch + 1))
            lr, hr = crop_pair(pair, top, left, lr_patch, scale)
            if augment:
                fh, fv, rot = bool(rng.integers(2)), bool(rng.integers(2)), int(rng.integers(4))
                lr, hr = _augment(lr, fh, fv, rot), _augment(hr, fh, fv, rot)
            lrs.append(lr)
            hrs.append(hr)
        yield np.stack(lrs).astype(dtype), np.stack(hrs).astype(dtype)
