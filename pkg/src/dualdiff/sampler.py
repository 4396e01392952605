"""Mask-only image synthesis: multi-step deterministic sampling with
classifier-free guidance.

Each job derives its own Philox stream from (seed, job index), so grids are
reproducible and order-independent.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tz
from .tensor import Tensor
from .schedule import NoiseSchedule, ddim_step
from .model import DualBranchModel, guided_noise
from .common import rng_for, atomic_write_json


@dataclass
class SampleConfig:
    steps: int = 50
    eta: float = 0.0
    guidance: float = 9.0      # lambda; 1 = conditional only, 0 = unconditional
    seed: int = 0
    batch: int = 1
    stride: tuple[int, ...] | None = None   # explicit descending timestep list

    def __post_init__(self):
        if self.eta != 0.0:
            raise ValueError("only eta = 0 sampling is supported")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


def timestep_ladder(T: int, steps: int, stride=None) -> list[int]:
    """Descending timesteps, uniformly strided from T-1 down to 0 inclusive."""
    if stride is not None:
        ts = [int(t) for t in stride]
        if ts != sorted(set(ts), reverse=True) or ts[0] >= T or ts[-1] < 0:
            raise ValueError("stride must be strictly descending within [0, T)")
        return ts
    if steps > T:
        raise ValueError(f"steps {steps} exceeds schedule length {T}")
    return sorted({int(round(v)) for v in np.linspace(T - 1, 0, steps)},
                  reverse=True)


def quantize_image(img: np.ndarray) -> np.ndarray:
    """[-1, 1] floats to uint8 via round-half-away-from-zero on (x+1)*127.5."""
    x = (np.clip(img, -1.0, 1.0) + 1.0) * 127.5
    return (np.floor(x + 0.5)).astype(np.uint8)


def dequantize_image(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float64) / 127.5 - 1.0


def sample(model: DualBranchModel, mask: np.ndarray, cfg: SampleConfig,
           s: NoiseSchedule, rng=None) -> np.ndarray:
    """Generate one image (C, H, W) in [-1, 1] from a binary mask (1, H, W)."""
    size = model.denoiser_config.image_size
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 2:
        mask = mask[None]
    if mask.shape[-2:] != (size, size):
        raise ValueError(f"mask must be {size}x{size}, got {mask.shape[-2:]}")
    if rng is None:
        rng = rng_for(cfg.seed, "sample")
    shape = (1, model.denoiser_config.channels, size, size)
    ladder = timestep_ladder(s.T, cfg.steps, cfg.stride)
    with tz.no_grad():
        c_m = model.extract_control(Tensor(mask[None]))
        z = Tensor(rng.standard_normal(shape))
        for i, t in enumerate(ladder):
            t_prev = ladder[i + 1] if i + 1 < len(ladder) else -1
            eps_hat = guided_noise(model, z, t, c_m, cfg.guidance)
            z = ddim_step(z, t, t_prev, eps_hat, cfg.eta, s)
    return np.clip(z.data[0], -1.0, 1.0)


def sample_grid(model: DualBranchModel, masks, cfg: SampleConfig,
                s: NoiseSchedule, out_dir: str | Path,
                seeds_per_mask: int = 1, mask_names=None) -> dict:
    """Sample every (mask, seed) pair, write PNGs, and return the manifest."""
    from .dataset import save_image_png, save_mask_png

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for mi, mask in enumerate(masks):
        mask_name = mask_names[mi] if mask_names else f"mask_{mi:04d}.png"
        save_mask_png(out_dir / mask_name, np.asarray(mask))
        for si in range(seeds_per_mask):
            job_seed = rng_for(cfg.seed, "grid", mi, si)
            img = sample(model, mask, cfg, s, rng=job_seed)
            out_name = f"sample_{mi:04d}_{si:02d}.png"
            save_image_png(out_dir / out_name, img)
            entries.append({"mask": mask_name, "seed": cfg.seed,
                            "job": [mi, si], "image": out_name})
    manifest = {"config": {"steps": cfg.steps, "eta": cfg.eta,
                           "guidance": cfg.guidance, "seed": cfg.seed},
                "entries": entries}
    atomic_write_json(out_dir / "grid_manifest.json", manifest)
    return manifest


def load_grid(out_dir: str | Path):
    """Load a sample grid back as (manifest, images, masks) float arrays."""
    from .dataset import load_image_png, load_mask_png

    out_dir = Path(out_dir)
    manifest = json.loads((out_dir / "grid_manifest.json").read_text())
    images, masks = [], []
    for e in manifest["entries"]:
        images.append(load_image_png(out_dir / e["image"]))
        masks.append(load_mask_png(out_dir / e["mask"]))
    return manifest, images, masks
