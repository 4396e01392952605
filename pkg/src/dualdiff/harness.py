"""Downstream segmentation experiments and the component/weight ablation grid."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace, asdict
from pathlib import Path

import numpy as np

from . import tensor as tz
from .tensor import Tensor, backward, fresh_tape
from .common import rng_for, config_hash, sha256_bytes, atomic_write_json
from .dataset import PairedSample, GeneratorConfig, MaskTransform, transform_mask
from .model import (DualBranchModel, DenoiserConfig, ControlEncoderConfig)
from .optim import AdamW
from .trainer import TrainConfig, train
from .sampler import SampleConfig, sample, quantize_image
from . import metrics


# --------------------------------------------------------------------------
# Tiny convolutional segmenter
# --------------------------------------------------------------------------


@dataclass
class SegmenterConfig:
    width: int = 12
    lr: float = 5e-3
    weight_decay: float = 0.0
    iterations: int = 400
    batch_size: int = 8
    seed: int = 0


class TinySegmenter:
    """Three 3x3 conv layers with SiLU, sigmoid head; per-pixel probability."""

    def __init__(self, channels: int, cfg: SegmenterConfig):
        rng = rng_for(cfg.seed, "segmenter_init")
        w = cfg.width

        def conv_init(out_c, in_c):
            return rng.standard_normal((out_c, in_c, 3, 3)) * np.sqrt(2.0 / (in_c * 9))

        self.cfg = cfg
        self.params = {
            "c1.w": Tensor(conv_init(w, channels), requires_grad=True),
            "c1.b": Tensor(np.zeros(w), requires_grad=True),
            "c2.w": Tensor(conv_init(w, w), requires_grad=True),
            "c2.b": Tensor(np.zeros(w), requires_grad=True),
            "c3.w": Tensor(conv_init(1, w), requires_grad=True),
            "c3.b": Tensor(np.zeros(1), requires_grad=True),
        }

    def forward(self, x: Tensor) -> Tensor:
        p = self.params
        h = tz.add_channel(tz.conv2d(x, p["c1.w"], 1, 1), p["c1.b"])
        h = tz.silu(h)
        h = tz.add_channel(tz.conv2d(h, p["c2.w"], 1, 1), p["c2.b"])
        h = tz.silu(h)
        h = tz.add_channel(tz.conv2d(h, p["c3.w"], 1, 1), p["c3.b"])
        return tz.sigmoid(h)

    def predict(self, images: np.ndarray) -> np.ndarray:
        with tz.no_grad():
            return self.forward(Tensor(images)).data


def train_segmenter(images: np.ndarray, masks: np.ndarray,
                    cfg: SegmenterConfig) -> TinySegmenter:
    seg = TinySegmenter(images.shape[1], cfg)
    opt = AdamW(seg.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = rng_for(cfg.seed, "segmenter_train")
    n = images.shape[0]
    for _ in range(cfg.iterations):
        idx = rng.integers(0, n, size=min(cfg.batch_size, n))
        with fresh_tape():
            prob = seg.forward(Tensor(images[idx]))
            loss = tz.mse(prob, Tensor(masks[idx]))
            for p in seg.params.values():
                p.grad = None
            backward(loss)
            opt.step()
    return seg


def evaluate_segmenter(seg: TinySegmenter, images: np.ndarray,
                       masks: np.ndarray) -> tuple[float, float]:
    prob = seg.predict(images)
    dices, ious = [], []
    for i in range(images.shape[0]):
        d, j = metrics.dice_iou(prob[i, 0] >= 0.5, masks[i, 0] >= 0.5)
        dices.append(d)
        ious.append(j)
    return float(np.mean(dices)), float(np.mean(ious))


# --------------------------------------------------------------------------
# Downstream experiment (real vs copy-paste vs real+synthetic arms)
# --------------------------------------------------------------------------


def _content_hashes(samples: list[PairedSample]) -> set[str]:
    return {sha256_bytes(quantize_image(s.image).tobytes()) for s in samples}


def downstream_experiment(real: list[PairedSample], synth: list[PairedSample],
                          scfg: SegmenterConfig,
                          test: list[PairedSample]) -> dict:
    """Train one segmenter per arm with identical seeds; report test Dice/IoU.

    Arms: real only; real plus |synth| duplicated real samples (copy-paste);
    real plus the synthetic set. Train/test overlap is rejected by content
    hash.
    """
    if _content_hashes(real + synth) & _content_hashes(test):
        raise ValueError("train and test sets overlap (content hash collision)")

    dup_rng = rng_for(scfg.seed, "copypaste")
    copies = [real[int(i)] for i in dup_rng.integers(0, len(real), len(synth))]
    arms = {
        "real_only": real,
        "copy_paste": real + copies,
        "real_synth": real + synth,
    }
    test_images = np.stack([s.image for s in test])
    test_masks = np.stack([s.mask for s in test])
    results = {}
    for arm, samples in arms.items():
        images = np.stack([s.image for s in samples])
        masks = np.stack([s.mask for s in samples])
        seg = train_segmenter(images, masks, scfg)
        dice, iou = evaluate_segmenter(seg, test_images, test_masks)
        results[arm] = {"dice": dice, "iou": iou, "n_train": len(samples)}
    return results


def synthesize_from_transformed_masks(model: DualBranchModel, s, real,
                                      n: int, seed: int,
                                      scfg: SampleConfig) -> list[PairedSample]:
    """Generate paired samples from randomly transformed real masks."""
    out = []
    kinds = MaskTransform.KINDS
    pick = rng_for(seed, "synth_pick")
    for i in range(n):
        src = real[int(pick.integers(0, len(real)))]
        t = MaskTransform(kind=kinds[int(pick.integers(0, len(kinds)))],
                          seed=int(pick.integers(0, 2 ** 31)))
        mask = transform_mask(src.mask, t)
        job = replace(scfg, seed=int(pick.integers(0, 2 ** 31)))
        img = sample(model, mask, job, s)
        out.append(PairedSample(image=img, mask=mask, meta=None))
    return out


# --------------------------------------------------------------------------
# Ablation grid (component lattice + consistency-weight sweep)
# --------------------------------------------------------------------------

# (setting id, dense hint widths, online augmentation, consistency loss)
COMPONENT_SETTINGS = [
    (1, False, False, False),
    (2, True, False, False),
    (3, False, True, False),
    (4, False, False, True),
    (5, False, True, True),
    (6, True, True, False),
    (7, True, False, True),
    (8, True, True, True),
]
WC_SWEEP = [0.0, 0.5, 1.0, 1.5, 2.0]

ABLATION_HEADER = ["row", "setting", "dhi", "online_aug", "l_c", "w_c", "seed",
                   "config_hash", "frechet", "kid", "texture_fidelity"]


def sparse_control_config(dense: ControlEncoderConfig) -> ControlEncoderConfig:
    """Narrow single-block hint encoder standing in for a sparse hint module."""
    return ControlEncoderConfig(
        stage_channels=tuple(max(2, c // 2) for c in dense.stage_channels),
        blocks_per_stage=1, merge=dense.merge)


def ablation_cell(base_train: TrainConfig, dense_ctrl: ControlEncoderConfig,
                  dhi: bool, online_aug: bool, l_c: bool,
                  w_c: float | None = None):
    """(TrainConfig, ControlEncoderConfig) for one grid cell."""
    ctrl = dense_ctrl if dhi else sparse_control_config(dense_ctrl)
    if w_c is None:
        w_c = base_train.w_c if l_c else 0.0
    cfg = replace(base_train, w_c=w_c, online_aug=online_aug)
    return cfg, ctrl


def controlnet_mode_config(base_train: TrainConfig,
                           dense_ctrl: ControlEncoderConfig):
    """Baseline mode: no consistency loss, no augmentation, sparse hints.

    Identical to component setting 1 of the ablation grid.
    """
    return ablation_cell(base_train, dense_ctrl, False, False, False)


def cell_hash(train_cfg: TrainConfig, ctrl: ControlEncoderConfig,
              dcfg: DenoiserConfig) -> str:
    return config_hash({"train": asdict(train_cfg), "control": asdict(ctrl),
                        "denoiser": asdict(dcfg)})


def run_ablation(real: list[PairedSample], s, dcfg: DenoiserConfig,
                 dense_ctrl: ControlEncoderConfig, base_train: TrainConfig,
                 sample_cfg: SampleConfig, gcfg: GeneratorConfig,
                 out_dir: str | Path, n_sample_masks: int = 8,
                 rows_filter=None) -> list[dict]:
    """Train and score every grid row; writes ablation_grid.csv + summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = np.stack([r.image for r in real])
    masks = np.stack([r.mask for r in real])
    real_feats = metrics.feature_matrix([r.image for r in real],
                                        [r.mask for r in real])

    cells = [{"row": f"setting{sid}", "setting": sid, "dhi": dhi,
              "online_aug": aug, "l_c": lc, "w_c": None}
             for sid, dhi, aug, lc in COMPONENT_SETTINGS]
    cells += [{"row": f"wc_{wc:g}", "setting": 8, "dhi": True,
               "online_aug": True, "l_c": True, "w_c": wc}
              for wc in WC_SWEEP]
    if rows_filter is not None:
        cells = [c for c in cells if c["row"] in rows_filter]

    rows = []
    for cell in cells:
        t_cfg, ctrl = ablation_cell(base_train, dense_ctrl, cell["dhi"],
                                    cell["online_aug"], cell["l_c"], cell["w_c"])
        model = DualBranchModel(dcfg, ctrl, seed=t_cfg.seed)
        train(model, s, images, masks, t_cfg)
        synth_imgs, synth_masks = [], []
        for mi in range(min(n_sample_masks, len(real))):
            job = replace(sample_cfg,
                          seed=int(rng_for(t_cfg.seed, "ablate", mi).integers(2 ** 31)))
            synth_imgs.append(sample(model, real[mi].mask, job, s))
            synth_masks.append(real[mi].mask)
        synth_feats = metrics.feature_matrix(synth_imgs, synth_masks)
        fidelity = float(np.mean([metrics.texture_fidelity(im, mk, gcfg)
                                  for im, mk in zip(synth_imgs, synth_masks)]))
        row = dict(cell)
        row["w_c"] = t_cfg.w_c
        row["seed"] = t_cfg.seed
        row["config_hash"] = cell_hash(t_cfg, ctrl, dcfg)
        row["frechet"] = metrics.frechet_distance(real_feats, synth_feats)
        row["kid"] = metrics.kid(real_feats, synth_feats)
        row["texture_fidelity"] = fidelity
        rows.append(row)

    with open(out_dir / "ablation_grid.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(ABLATION_HEADER)
        for row in rows:
            writer.writerow([row[k] for k in ABLATION_HEADER])
    atomic_write_json(out_dir / "ablation_summary.json", {"rows": rows})
    return rows
