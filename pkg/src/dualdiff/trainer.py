"""Training loop: dual-branch denoising losses, consistency anchor, gated
online augmentation, and AdamW updates.

Iterations are 0-based (k in {0, ..., n_iter-1}); the image-control ramp is
w_i = k / n_iter. Per sample the loop draws one timestep t, one noise tensor,
and one control-dropout decision; the same noise drives the two denoising
losses and (by default) the augmentation re-noising.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tz
from .tensor import Tensor, backward, fresh_tape, tape_region
from .schedule import NoiseSchedule, forward_diffuse, single_step_x0
from .model import DualBranchModel, ControlFeatures, mix_controls
from .optim import AdamW
from .common import rng_for, sha256_bytes


@dataclass
class TrainConfig:
    n_iter: int = 3000
    batch_size: int = 4
    w_m: float = 1.0
    w_c: float = 1.0
    k_tau: int | None = None          # defaults to n_iter // 3
    t_tau: int | None = None          # defaults to 200 scaled by T / 1000
    lr: float = 1e-3
    weight_decay: float = 1e-2
    p_drop: float = 0.05
    seed: int = 0
    image_branch_gradients: str = "shared"   # or "detached"
    online_aug: bool = True
    reuse_eps_in_aug: bool = True
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    checkpoint_every: int | None = None      # defaults to n_iter // 10

    def __post_init__(self):
        if self.image_branch_gradients not in ("shared", "detached"):
            raise ValueError("image_branch_gradients must be shared or detached")
        if self.w_c < 0:
            raise ValueError("w_c must be >= 0")
        if self.n_iter < 1 or self.batch_size < 1:
            raise ValueError("n_iter and batch_size must be >= 1")
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError("p_drop must lie in [0, 1]")

    def resolved_k_tau(self) -> int:
        k_tau = self.n_iter // 3 if self.k_tau is None else self.k_tau
        if not 0 < k_tau < self.n_iter:
            raise ValueError(f"k_tau {k_tau} outside (0, n_iter)")
        return k_tau

    def resolved_t_tau(self, T: int) -> int:
        t_tau = max(1, round(200 * T / 1000)) if self.t_tau is None else self.t_tau
        if not 0 < t_tau <= T:
            raise ValueError(f"t_tau {t_tau} outside (0, T]")
        return t_tau


LOG_HEADER = ["k", "t", "loss_m", "loss_i", "loss_c", "loss_m_prime",
              "total", "w_i", "w_a"]


@dataclass
class LossReport:
    k: int
    t: int                       # first sample's draw; batches mix timesteps
    loss_m: float
    loss_i: float
    loss_c: float
    loss_m_prime: float
    total: float
    w_i: float
    w_a: float                   # fraction of the batch with the gate open
    w_c: float
    instrumentation: dict = field(default_factory=dict)

    def csv_row(self) -> list:
        return [self.k, self.t, repr(self.loss_m), repr(self.loss_i),
                repr(self.loss_c), repr(self.loss_m_prime), repr(self.total),
                repr(self.w_i), repr(self.w_a)]


def gate_w_a(k: int, t: int, k_tau: int, t_tau: int) -> int:
    """Augmentation gate: 1 iff k > k_tau and t < t_tau (strict on both)."""
    return 1 if (k > k_tau and t < t_tau) else 0


def loss_mask(model: DualBranchModel, z_t: Tensor, t, c_m: ControlFeatures | None,
              eps: Tensor) -> Tensor:
    """Denoising loss of the mask branch: mean squared prediction error."""
    return tz.mse(model.predict_noise(z_t, t, c_m), eps)


def loss_image(model: DualBranchModel, z_t: Tensor, t, c_mix: ControlFeatures,
               eps: Tensor, gradients: str = "shared") -> Tensor:
    """Denoising loss of the image branch; ``detached`` reports the value but
    routes no gradient (the literal parameter-copy reading)."""
    pred = model.predict_noise(z_t, t, c_mix)
    if gradients == "detached":
        pred = tz.stop_gradient(pred)
    return tz.mse(pred, eps)


def loss_consistency(eps_m: Tensor, eps_mix: Tensor, w_c: float) -> Tensor:
    """w_c * mse(eps_m, sg(eps_mix)); gradient reaches only the mask branch.

    w_c = 0 short-circuits to a graph-free zero.
    """
    if w_c == 0.0:
        return Tensor(0.0)
    return tz.mul(tz.mse(eps_m, tz.stop_gradient(eps_mix)), float(w_c))


def online_augment_loss(model: DualBranchModel, z_t: Tensor, t,
                        c_m: ControlFeatures | None, eps_mix: Tensor, eps: Tensor,
                        s: NoiseSchedule, w_a: int) -> Tensor:
    """Re-noise the single-step denoised estimate and train the mask branch
    on it. ``w_a`` = 0 short-circuits without any forward pass."""
    if not w_a:
        return Tensor(0.0)
    z0p = single_step_x0(z_t, t, tz.stop_gradient(eps_mix), s)
    z_tp = forward_diffuse(z0p, t, eps, s)
    return tz.mse(model.predict_noise(z_tp, t, c_m), eps)


@dataclass
class Draws:
    """Per-iteration random draws, held explicitly so loss evaluation is a
    deterministic function of (parameters, draws)."""
    t: np.ndarray            # (N,) int timesteps
    eps: np.ndarray          # (N, C, H, W) noise shared by the loss terms
    drop: np.ndarray         # (N,) bool, mask-branch control dropout
    eps_aug: np.ndarray      # re-noising draw (same array as eps when reused)


def make_draws(rng, n: int, shape, T: int, cfg: TrainConfig) -> Draws:
    t = rng.integers(0, T, size=n)
    eps = rng.standard_normal((n,) + tuple(shape))
    drop = rng.random(n) < cfg.p_drop
    eps_aug = eps if cfg.reuse_eps_in_aug else rng.standard_normal(eps.shape)
    return Draws(t=t, eps=eps, drop=drop, eps_aug=eps_aug)


def _row_mask_like(rows: np.ndarray, shape) -> Tensor:
    expand = rows.astype(np.float64).reshape((len(rows),) + (1,) * (len(shape) - 1))
    return Tensor(np.broadcast_to(expand, shape).copy())


def compute_losses(model: DualBranchModel, s: NoiseSchedule, images: np.ndarray,
                   masks: np.ndarray, k: int, cfg: TrainConfig, draws: Draws):
    """Evaluate the four loss terms for one batch.

    Returns (total, LossReport, parts) where parts carries the individual
    loss tensors for instrumented gradient-routing checks.
    """
    n = images.shape[0]
    k_tau = cfg.resolved_k_tau()
    t_tau = cfg.resolved_t_tau(s.T)
    w_i = k / cfg.n_iter

    z0 = Tensor(images)
    eps = Tensor(draws.eps)

    with tape_region("mask_control"):
        c_m = model.extract_control(Tensor(masks))
    with tape_region("image_branch"):
        c_i = model.extract_control(z0)
        c_mix = mix_controls(c_i, c_m, k, cfg.n_iter, cfg.w_m)

    # Mask branch sees dropped-out controls (the unconditional branch is an
    # all-zero pyramid, which per-row zeroing realizes exactly).
    if draws.drop.any():
        keep = ~draws.drop
        c_m_used = c_m.map(lambda l: tz.mul(l, _row_mask_like(keep, l.shape)))
    else:
        c_m_used = c_m

    z_t = forward_diffuse(z0, draws.t, eps, s)

    eps_m = model.predict_noise(z_t, draws.t, c_m_used)
    with tape_region("image_branch"):
        eps_mix = model.predict_noise(z_t, draws.t, c_mix)

    l_m = tz.mse(eps_m, eps)
    if cfg.image_branch_gradients == "detached":
        l_i = tz.mse(tz.stop_gradient(eps_mix), eps)
    else:
        l_i = tz.mse(eps_mix, eps)
    l_c = loss_consistency(eps_m, eps_mix, cfg.w_c)

    if cfg.online_aug:
        gates = np.array([gate_w_a(k, int(ti), k_tau, t_tau) for ti in draws.t])
    else:
        gates = np.zeros(n, dtype=int)
    if gates.any():
        eps_aug = eps if draws.eps_aug is draws.eps else Tensor(draws.eps_aug)
        z0p = single_step_x0(z_t, draws.t, tz.stop_gradient(eps_mix), s)
        z_tp = forward_diffuse(z0p, draws.t, eps_aug, s)
        eps_mp = model.predict_noise(z_tp, draws.t, c_m_used)
        diff = tz.sub(eps_mp, eps_aug)
        # mean over the full batch with per-row gates == (1/N) sum_i w_a_i mse_i
        l_mp = tz.tmean(tz.mul(tz.mul(diff, diff),
                               _row_mask_like(gates.astype(bool), diff.shape)))
    else:
        l_mp = Tensor(0.0)

    total = tz.add(tz.add(tz.add(l_m, l_i), l_c), l_mp)
    report = LossReport(
        k=k, t=int(draws.t[0]), loss_m=l_m.item(), loss_i=l_i.item(),
        loss_c=l_c.item(), loss_m_prime=l_mp.item(), total=total.item(),
        w_i=w_i, w_a=float(gates.mean()), w_c=cfg.w_c)
    parts = {"l_m": l_m, "l_i": l_i, "l_c": l_c, "l_mp": l_mp,
             "eps_hash_m": sha256_bytes(draws.eps.tobytes()),
             "eps_hash_i": sha256_bytes(draws.eps.tobytes()),
             "eps_hash_aug": sha256_bytes(draws.eps_aug.tobytes())}
    return total, report, parts


def _traced_regions(loss: Tensor, model: DualBranchModel) -> set:
    regions = backward(loss, trace=True)
    model.zero_grads()
    return regions


def train_step(model: DualBranchModel, s: NoiseSchedule, images: np.ndarray,
               masks: np.ndarray, k: int, cfg: TrainConfig, opt: AdamW,
               rng, instrument: bool = False) -> LossReport:
    """One optimizer update from one batch. With ``instrument`` the report
    carries gradient-routing traces and the noise-draw hashes."""
    if images.shape[0] == 0:
        raise ValueError("empty batch")
    draws = make_draws(rng, images.shape[0], images.shape[1:], s.T, cfg)
    with fresh_tape():
        total, report, parts = compute_losses(model, s, images, masks, k, cfg, draws)
        if instrument:
            model.zero_grads()
            report.instrumentation = {
                "regions_l_c": sorted(_traced_regions(parts["l_c"], model)),
                "regions_l_m_prime": sorted(_traced_regions(parts["l_mp"], model)),
                "regions_l_i": sorted(_traced_regions(parts["l_i"], model)),
                "eps_hash_m": parts["eps_hash_m"],
                "eps_hash_i": parts["eps_hash_i"],
                "eps_hash_aug": parts["eps_hash_aug"],
            }
        model.zero_grads()
        backward(total)
        opt.step()
    return report


def param_interpolation_diagnostic(theta_a: dict[str, np.ndarray],
                                   theta_b: dict[str, np.ndarray],
                                   w_c: float) -> dict[str, np.ndarray]:
    """Elementwise a + w_c * (b - a) over two equal parameter manifests.

    Visualization aid only; the result is never fed back into training.
    """
    if list(theta_a) != list(theta_b):
        raise ValueError("parameter manifests differ")
    out = {}
    for name in theta_a:
        a, b = np.asarray(theta_a[name]), np.asarray(theta_b[name])
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch for {name!r}")
        out[name] = a + w_c * (b - a)
    return out


def total_loss_gradcheck(model: DualBranchModel, s: NoiseSchedule,
                         images: np.ndarray, masks: np.ndarray, k: int,
                         cfg: TrainConfig, draws: Draws, fraction: float = 0.01,
                         h: float = 1e-5, seed: int = 0):
    """Central-difference check of the full four-term loss on a random
    sample of trainable parameter elements.

    Stop-gradient values recorded on the analytic pass are replayed during
    the probes, so both sides differentiate the same sg-frozen objective.
    Returns (max_rel_error, n_checked).
    """
    store: list[np.ndarray] = []
    with fresh_tape():
        model.zero_grads()
        with tz.record_stop_gradients(store):
            total, _, _ = compute_losses(model, s, images, masks, k, cfg, draws)
        backward(total)

    names = list(model.trainable_parameters())
    sizes = np.array([model.params[n].size for n in names])
    bounds = np.cumsum(sizes)
    total_elems = int(bounds[-1])
    n_check = max(1, int(round(fraction * total_elems)))
    rng = rng_for(seed, "gradcheck")
    picks = rng.choice(total_elems, size=n_check, replace=False)

    def eval_total() -> float:
        with tz.no_grad(), tz.replay_stop_gradients(store):
            val, _, _ = compute_losses(model, s, images, masks, k, cfg, draws)
        return val.item()

    max_rel = 0.0
    for flat_idx in picks:
        pi = int(np.searchsorted(bounds, flat_idx, side="right"))
        local = int(flat_idx - (bounds[pi - 1] if pi else 0))
        p = model.params[names[pi]]
        flat = p.data.reshape(-1)
        analytic = p.grad.reshape(-1)[local] if p.grad is not None else 0.0
        orig = flat[local]
        flat[local] = orig + h
        lp = eval_total()
        flat[local] = orig - h
        lm = eval_total()
        flat[local] = orig
        numeric = (lp - lm) / (2.0 * h)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1.0)
        max_rel = max(max_rel, rel)
    return max_rel, n_check


def train(model: DualBranchModel, s: NoiseSchedule, images: np.ndarray,
          masks: np.ndarray, cfg: TrainConfig, out_dir: str | Path | None = None,
          schedule_cfg: dict | None = None, instrument: bool = False,
          progress=None):
    """Run the full loop over a dataset of (images, masks) arrays.

    Writes ``loss_log.csv`` and periodic checkpoints under ``out_dir`` when
    given. Returns the list of LossReports.
    """
    from .model import save_checkpoint

    cfg.resolved_k_tau()
    cfg.resolved_t_tau(s.T)
    opt = AdamW(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                betas=cfg.betas, eps=cfg.adam_eps, skip=model.frozen)
    rng = rng_for(cfg.seed, "train")
    n_data = images.shape[0]
    every = cfg.checkpoint_every or max(1, cfg.n_iter // 10)

    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = log_writer = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "loss_log.csv", "w", newline="")
        log_writer = csv.writer(log_file)
        log_writer.writerow(LOG_HEADER)

    reports = []
    try:
        for k in range(cfg.n_iter):
            idx = rng.integers(0, n_data, size=cfg.batch_size)
            report = train_step(model, s, images[idx], masks[idx], k, cfg, opt,
                                rng, instrument=instrument)
            reports.append(report)
            if log_writer is not None:
                log_writer.writerow(report.csv_row())
            if out_dir is not None and (k + 1) % every == 0 and k + 1 < cfg.n_iter:
                save_checkpoint(out_dir / f"ckpt_{k + 1:06d}.ddck", model,
                                schedule_cfg or {}, opt)
            if progress is not None:
                progress(report)
    finally:
        if log_file is not None:
            log_file.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "ckpt_final.ddck", model, schedule_cfg or {}, opt)
    return reports
