"""Noise-schedule tables and the closed-form diffusion identities.

Timesteps are 0-based: t ranges over {0, ..., T-1} and ``alpha_bar[t]``
includes the factor for step t itself, so ``alpha_bar[0] == alpha[0]``.
A ``t_prev`` of -1 denotes the clean state (alpha_bar treated as 1).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, mul


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance-schedule tables shared by the trainer and the sampler."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def __post_init__(self):
        beta = self.beta
        if beta.ndim != 1 or len(beta) < 1:
            raise ValueError("schedule needs at least one timestep")
        if np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ValueError("beta values must lie strictly in (0, 1)")
        if np.any(np.diff(beta) < 0.0):
            raise ValueError("beta must be monotonically non-decreasing")

    def validate_tables(self, tol: float = 1e-15) -> None:
        """Recompute the cumulative product and compare to the stored table."""
        ref = np.cumprod(self.alpha)
        if not np.allclose(self.alpha_bar, ref, rtol=tol, atol=tol):
            raise ValueError("alpha_bar table inconsistent with alpha")


def from_betas(beta) -> NoiseSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linearly interpolated betas, inclusive of both endpoints."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return from_betas(beta)


def _check_t(t: np.ndarray, T: int) -> None:
    if np.any(t < 0) or np.any(t >= T):
        raise ValueError(f"timestep out of range [0, {T})")


def _coeff(values: np.ndarray, like_shape: tuple[int, ...]) -> Tensor:
    """Per-sample coefficients expanded to a constant tensor of exact shape."""
    n = like_shape[0]
    expand = values.reshape((n,) + (1,) * (len(like_shape) - 1))
    return Tensor(np.broadcast_to(expand, like_shape).copy())


def _per_sample(t, n: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if t.ndim == 0:
        t = np.full(n, int(t), dtype=np.int64)
    if t.shape != (n,):
        raise ValueError(f"timestep vector shape {t.shape} does not match batch {n}")
    return t


def forward_diffuse(z0: Tensor, t, eps: Tensor, s: NoiseSchedule) -> Tensor:
    """z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps.

    ``t`` may be a scalar or a per-sample vector over the leading axis.
    """
    if z0.shape != eps.shape:
        raise ValueError(f"z0 shape {z0.shape} != eps shape {eps.shape}")
    tv = _per_sample(t, z0.shape[0])
    _check_t(tv, s.T)
    ab = s.alpha_bar[tv]
    a = mul(z0, _coeff(np.sqrt(ab), z0.shape))
    b = mul(eps, _coeff(np.sqrt(1.0 - ab), z0.shape))
    return add(a, b)


def single_step_x0(z_t: Tensor, t, eps_hat: Tensor, s: NoiseSchedule) -> Tensor:
    """Denoised estimate (z_t - sqrt(1 - abar_t) * eps_hat) / sqrt(abar_t).

    ``eps_hat`` is used as given; callers that need the estimate detached
    wrap it in stop_gradient first.
    """
    if z_t.shape != eps_hat.shape:
        raise ValueError(f"z_t shape {z_t.shape} != eps_hat shape {eps_hat.shape}")
    tv = _per_sample(t, z_t.shape[0])
    _check_t(tv, s.T)
    ab = s.alpha_bar[tv]
    inv = 1.0 / np.sqrt(ab)
    a = mul(z_t, _coeff(inv, z_t.shape))
    b = mul(eps_hat, _coeff(-np.sqrt(1.0 - ab) * inv, z_t.shape))
    return add(a, b)


def ddim_step(z_t: Tensor, t: int, t_prev: int, eps_hat: Tensor, eta: float,
              s: NoiseSchedule) -> Tensor:
    """Deterministic transition z_t -> z_{t_prev}; t_prev = -1 means clean.

    Only eta = 0 is supported; the stochastic variant is rejected outright.
    """
    if eta != 0.0:
        raise ValueError("only eta = 0 (deterministic) transitions are supported")
    if t_prev >= t:
        raise ValueError(f"t_prev ({t_prev}) must be below t ({t})")
    z0 = single_step_x0(z_t, t, eps_hat, s)
    if t_prev < 0:
        return z0
    ab_prev = float(s.alpha_bar[t_prev])
    if ab_prev == 1.0:
        return z0
    a = mul(z0, float(np.sqrt(ab_prev)))
    b = mul(eps_hat, float(np.sqrt(1.0 - ab_prev)))
    return add(a, b)


def schedule_config(T: int, beta_start: float, beta_end: float) -> dict:
    """Serializable schedule description used in checkpoint headers."""
    return {"T": int(T), "beta_start": float(beta_start),
            "beta_end": float(beta_end), "kind": "linear"}


def schedule_from_config(cfg: dict) -> NoiseSchedule:
    if cfg.get("kind", "linear") != "linear":
        raise ValueError(f"unsupported schedule kind {cfg.get('kind')!r}")
    return make_linear_schedule(cfg["T"], cfg["beta_start"], cfg["beta_end"])
