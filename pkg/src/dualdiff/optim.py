"""AdamW with decoupled weight decay.

Update per step t (bias-corrected, both terms using the pre-step value):
    p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
Frozen parameters are never registered, so they are never touched.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


class AdamW:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 weight_decay: float = 1e-2, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, skip: set[str] | None = None):
        skip = skip or set()
        self.params = {k: v for k, v in params.items() if k not in skip}
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.step_count = 0
        self.m = {k: np.zeros_like(v.data) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in self.params.items()}

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = 0.0
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= self.lr * update

    # -- checkpoint support --------------------------------------------------

    def manifest(self) -> dict:
        entries, offset = [], 0
        for name, p in self.params.items():
            entries.append({"name": name, "shape": list(p.shape), "offset": offset})
            offset += p.size
        return {"step": self.step_count, "lr": self.lr,
                "weight_decay": self.weight_decay, "betas": list(self.betas),
                "eps": self.eps, "moments": entries}

    def state_bytes(self) -> bytes:
        parts = [np.ascontiguousarray(self.m[k], dtype="<f8").tobytes()
                 for k in self.params]
        parts += [np.ascontiguousarray(self.v[k], dtype="<f8").tobytes()
                  for k in self.params]
        return b"".join(parts)

    def load_state(self, manifest: dict, blob: bytes) -> None:
        self.step_count = int(manifest["step"])
        self.lr = float(manifest["lr"])
        self.weight_decay = float(manifest["weight_decay"])
        self.betas = tuple(manifest["betas"])
        self.eps = float(manifest["eps"])
        total = sum(int(np.prod(e["shape"]) if e["shape"] else 1)
                    for e in manifest["moments"])
        for e in manifest["moments"]:
            name, shape = e["name"], tuple(e["shape"])
            size = int(np.prod(shape)) if shape else 1
            if name not in self.params:
                raise ValueError(f"optimizer state for unknown parameter {name!r}")
            self.m[name] = np.frombuffer(
                blob, "<f8", size, e["offset"] * 8).reshape(shape).copy()
            self.v[name] = np.frombuffer(
                blob, "<f8", size, (total + e["offset"]) * 8).reshape(shape).copy()
