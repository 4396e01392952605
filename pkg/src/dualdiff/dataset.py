"""Procedural paired (image, mask) generation and mask transforms.

Each sample is a textured lesion composited onto a low-frequency background:
the lesion region carries an oriented sinusoidal texture and a mean-intensity
offset solved exactly so that inside/outside means differ by the drawn
contrast. Generation is a pure function of (seed, index) through Philox
streams, so datasets are reproducible across platforms.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .common import rng_for
from .sampler import quantize_image, dequantize_image


class DataError(Exception):
    """Dataset files are missing, corrupt, or inconsistent."""


@dataclass(frozen=True)
class GeneratorConfig:
    size: int = 32
    channels: int = 3
    axis_range: tuple[float, float] = (4.0, 8.0)
    freq_range: tuple[float, float] = (5.5, 6.5)      # cycles per image width
    contrast_range: tuple[float, float] = (0.25, 0.4)  # inside-outside mean gap
    texture_amp_frac: float = 0.3                      # sinusoid amp / contrast
    bg_amp: float = 0.1
    bg_freq_range: tuple[float, float] = (0.5, 1.5)
    channel_offset: float = 0.03
    noise_sigma: float = 0.02
    min_area: int = 16
    blob_prob: float = 0.5
    blob_wobble: float = 0.12

    @property
    def canonical_freq(self) -> float:
        return 0.5 * (self.freq_range[0] + self.freq_range[1])

    @property
    def canonical_contrast(self) -> float:
        return 0.5 * (self.contrast_range[0] + self.contrast_range[1])

    def fidelity_floor(self) -> float:
        """Upper bound on the texture-fidelity error of a real sample:
        half the frequency range plus one FFT bin, and half the contrast
        range plus a measurement margin."""
        f_half = 0.5 * (self.freq_range[1] - self.freq_range[0])
        c_half = 0.5 * (self.contrast_range[1] - self.contrast_range[0])
        return (f_half + 1.0) + (c_half + 0.05)

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "GeneratorConfig":
        d = dict(d)
        for key in ("axis_range", "freq_range", "contrast_range", "bg_freq_range"):
            if key in d:
                d[key] = tuple(d[key])
        return GeneratorConfig(**d)


@dataclass
class PairedSample:
    image: np.ndarray                 # (C, H, W) float64 in [-1, 1]
    mask: np.ndarray                  # (1, H, W) float64 in {0, 1}
    meta: dict | None = None

    def validate(self, min_area: int = 16) -> None:
        if not np.all(np.isfinite(self.image)):
            raise DataError("image contains non-finite values")
        vals = np.unique(self.mask)
        if not np.all(np.isin(vals, (0.0, 1.0))):
            raise DataError("mask is not binary")
        if self.mask.sum() < min_area:
            raise DataError(f"mask area {int(self.mask.sum())} below {min_area}")


def _lesion_alpha(size, center, axes, rotation, wobble, rng, is_blob):
    """Soft-edged (about 1 px) implicit ellipse or wobbled blob."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xs - center[0], ys - center[1]
    ct, st = math.cos(rotation), math.sin(rotation)
    u = dx * ct + dy * st
    v = -dx * st + dy * ct
    r = np.sqrt((u / axes[0]) ** 2 + (v / axes[1]) ** 2)
    if is_blob:
        psi = np.arctan2(v, u)
        bump = np.zeros_like(r)
        for j in (2, 3):
            bump += wobble * rng.uniform(-1, 1) * np.cos(j * psi + rng.uniform(0, 2 * np.pi))
        r = r / np.clip(1.0 + bump, 0.5, 1.5)
    return np.clip((1.0 - r) * min(axes) + 0.5, 0.0, 1.0)


def generate_sample(gcfg: GeneratorConfig, seed: int, index: int) -> PairedSample:
    """Deterministically generate sample ``index`` of the dataset ``seed``."""
    rng = rng_for(seed, "data", index)
    size = gcfg.size

    for _ in range(100):
        axes = rng.uniform(*gcfg.axis_range, size=2)
        margin = float(axes.max()) * (1.0 + gcfg.blob_wobble) + 2.0
        center = rng.uniform(margin, size - 1 - margin, size=2)
        rotation = rng.uniform(0, np.pi)
        is_blob = rng.random() < gcfg.blob_prob
        alpha = _lesion_alpha(size, center, axes, rotation, gcfg.blob_wobble,
                              rng, is_blob)
        mask = (alpha >= 0.5).astype(np.float64)
        if mask.sum() >= gcfg.min_area:
            break
    else:
        raise DataError("could not draw a lesion satisfying the area floor")

    bg_freq = rng.uniform(*gcfg.bg_freq_range)
    bg_dir = rng.uniform(0, np.pi)
    bg_phase = rng.uniform(0, 2 * np.pi)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    bg = gcfg.bg_amp * np.sin(
        2 * np.pi * bg_freq * (xs * math.cos(bg_dir) + ys * math.sin(bg_dir)) / size
        + bg_phase)
    offsets = rng.uniform(-gcfg.channel_offset, gcfg.channel_offset, gcfg.channels)
    noise = rng.standard_normal((gcfg.channels, size, size)) * gcfg.noise_sigma
    base = bg[None] + offsets[:, None, None] + noise

    freq = rng.uniform(*gcfg.freq_range)
    tex_dir = rng.uniform(0, np.pi)
    tex_phase = rng.uniform(0, 2 * np.pi)
    contrast = rng.uniform(*gcfg.contrast_range)
    amp = gcfg.texture_amp_frac * contrast
    tex = amp * np.sin(
        2 * np.pi * freq * (xs * math.cos(tex_dir) + ys * math.sin(tex_dir)) / size
        + tex_phase)

    # Per-channel lesion offsets solved so the realized inside/outside mean
    # gap equals the drawn contrast exactly (channel tint averages to 1).
    tint = np.array([1.1, 1.0, 0.9]) if gcfg.channels == 3 else np.ones(gcfg.channels)
    inside = mask.astype(bool)
    a_gap = alpha[inside].mean() - alpha[~inside].mean()
    at_gap = (alpha * tex)[inside].mean() - (alpha * tex)[~inside].mean()
    image = base.copy()
    for ch in range(gcfg.channels):
        d0 = base[ch][inside].mean() - base[ch][~inside].mean()
        delta = (contrast * tint[ch] - d0 - at_gap * tint[ch]) / a_gap
        image[ch] += alpha * (tex + delta) * tint[ch]
    image = np.clip(image, -1.0, 1.0)

    meta = {
        "shape": "blob" if is_blob else "ellipse",
        "center": [float(c) for c in center],
        "axes": [float(a) for a in axes],
        "rotation": float(rotation),
        "texture": {"freq": float(freq), "orientation": float(tex_dir),
                    "contrast": float(contrast)},
        "bg": {"freq": float(bg_freq), "orientation": float(bg_dir),
               "amp": gcfg.bg_amp},
        "noise_sigma": gcfg.noise_sigma,
    }
    return PairedSample(image=image, mask=mask[None], meta=meta)


def generate_dataset(n: int, gcfg: GeneratorConfig, seed: int) -> list[PairedSample]:
    if n < 1:
        raise ValueError("n must be >= 1")
    return [generate_sample(gcfg, seed, i) for i in range(n)]


# --------------------------------------------------------------------------
# Mask transforms ("random" mask regime)
# --------------------------------------------------------------------------


@dataclass
class MaskTransform:
    kind: str = "scale"     # scale | translate | rotate | elastic
    scale_range: tuple[float, float] = (0.7, 1.4)
    translate_range: tuple[float, float] = (-6.0, 6.0)
    rotate_range: tuple[float, float] = (-3.14159, 3.14159)
    elastic_alpha: float = 3.0
    elastic_sigma: float = 4.0
    seed: int = 0
    min_area: int = 16

    KINDS = ("scale", "translate", "rotate", "elastic")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")


def _warp_binary(mask2d: np.ndarray, inv_map) -> np.ndarray:
    ys, xs = np.mgrid[0:mask2d.shape[0], 0:mask2d.shape[1]].astype(np.float64)
    sy, sx = inv_map(ys, xs)
    out = ndimage.map_coordinates(mask2d, [sy, sx], order=0, mode="constant",
                                  cval=0.0)
    return out.astype(np.float64)


def _apply_once(mask2d: np.ndarray, t: MaskTransform, rng) -> np.ndarray:
    if mask2d.sum() == 0:
        return mask2d.copy()
    cy, cx = ndimage.center_of_mass(mask2d)
    if t.kind == "scale":
        f = rng.uniform(*t.scale_range)
        if f == 1.0:
            return mask2d.copy()
        return _warp_binary(mask2d, lambda y, x: ((y - cy) / f + cy,
                                                  (x - cx) / f + cx))
    if t.kind == "translate":
        dy, dx = rng.uniform(*t.translate_range, size=2)
        if dy == 0.0 and dx == 0.0:
            return mask2d.copy()
        return _warp_binary(mask2d, lambda y, x: (y - dy, x - dx))
    if t.kind == "rotate":
        ang = rng.uniform(*t.rotate_range)
        if ang == 0.0:
            return mask2d.copy()
        ct, st = math.cos(ang), math.sin(ang)
        return _warp_binary(
            mask2d, lambda y, x: (ct * (y - cy) + st * (x - cx) + cy,
                                  -st * (y - cy) + ct * (x - cx) + cx))
    # elastic: smoothed random displacement field
    dy = ndimage.gaussian_filter(rng.standard_normal(mask2d.shape), t.elastic_sigma)
    dx = ndimage.gaussian_filter(rng.standard_normal(mask2d.shape), t.elastic_sigma)
    for d in (dy, dx):
        m = np.abs(d).max()
        if m > 0:
            d *= t.elastic_alpha / m
    return _warp_binary(mask2d, lambda y, x: (y + dy, x + dx))


def _mask_valid(mask2d: np.ndarray, min_area: int) -> bool:
    if mask2d.sum() < min_area:
        return False
    border = np.concatenate([mask2d[0], mask2d[-1], mask2d[:, 0], mask2d[:, -1]])
    return not border.any()


def transform_mask(mask: np.ndarray, t: MaskTransform) -> np.ndarray:
    """Apply the transform, rejection-resampling its magnitude until the
    result keeps area >= min_area and stays clear of the frame border."""
    mask2d = np.asarray(mask, dtype=np.float64)
    squeeze = mask2d.ndim == 3
    if squeeze:
        mask2d = mask2d[0]
    rng = rng_for(t.seed, "mask_transform", t.kind)
    for _ in range(100):
        out = _apply_once(mask2d, t, rng)
        if _mask_valid(out, t.min_area):
            return out[None] if squeeze else out
    raise DataError(f"{t.kind} transform produced no valid mask in 100 attempts")


# --------------------------------------------------------------------------
# PNG + sidecar I/O (directory layout: images/ masks/ meta/ NNNN.*)
# --------------------------------------------------------------------------


def save_image_png(path, image: np.ndarray) -> None:
    arr = quantize_image(np.asarray(image))
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
        if arr.shape[2] == 1:
            arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")


def load_image_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return dequantize_image(arr)


def save_mask_png(path, mask: np.ndarray) -> None:
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == 3:
        m = m[0]
    Image.fromarray(np.where(m >= 0.5, 255, 0).astype(np.uint8)).save(path, "PNG")


def load_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= 128).astype(np.float64)[None]


def save_dataset(out_dir, samples: list[PairedSample], gcfg: GeneratorConfig | None = None) -> None:
    out_dir = Path(out_dir)
    for sub in ("images", "masks", "meta"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    for i, sample in enumerate(samples):
        stem = f"{i:04d}"
        save_image_png(out_dir / "images" / f"{stem}.png", sample.image)
        save_mask_png(out_dir / "masks" / f"{stem}.png", sample.mask)
        if sample.meta is not None:
            (out_dir / "meta" / f"{stem}.json").write_text(
                json.dumps(sample.meta, indent=2, sort_keys=True))
    if gcfg is not None:
        (out_dir / "generator_config.json").write_text(
            json.dumps(gcfg.to_dict(), indent=2, sort_keys=True))


def load_dataset(data_dir) -> list[PairedSample]:
    """Load image/mask/meta triples; a missing sidecar degrades to meta=None."""
    data_dir = Path(data_dir)
    img_dir = data_dir / "images"
    if not img_dir.is_dir():
        raise DataError(f"no images/ directory under {data_dir}")
    samples = []
    for img_path in sorted(img_dir.glob("*.png")):
        stem = img_path.stem
        mask_path = data_dir / "masks" / f"{stem}.png"
        if not mask_path.exists():
            raise DataError(f"mask missing for {img_path.name}")
        image = load_image_png(img_path)
        mask = load_mask_png(mask_path)
        if image.shape[-2:] != mask.shape[-2:]:
            raise DataError(f"image/mask size mismatch for {stem}")
        meta_path = data_dir / "meta" / f"{stem}.json"
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else None
        samples.append(PairedSample(image=image, mask=mask, meta=meta))
    if not samples:
        raise DataError(f"no samples found under {data_dir}")
    return samples


def load_generator_config(data_dir) -> GeneratorConfig | None:
    path = Path(data_dir) / "generator_config.json"
    if not path.exists():
        return None
    return GeneratorConfig.from_dict(json.loads(path.read_text()))


def stack_arrays(samples: list[PairedSample]):
    """(images, masks) float64 arrays ready for the trainer."""
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])
    return images, masks
