"""Shared denoiser network and control-feature extractor.

One parameter set realizes both conditioning branches: the denoiser predicts
the noise component of a latent given a timestep and (optionally) a pyramid
of control features, and a single control encoder turns either an image or a
mask into that pyramid. Control features are injected into the decoder by
addition, so "no control" and "all-zero control" are the same computation.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as tz
from .tensor import Tensor, ShapeError
from .common import rng_for


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 32
    channels: int = 3
    base_width: int = 8
    depth: int = 2
    time_embed_dim: int = 32
    injection: str = "decoder_stage"  # or "skip"

    def __post_init__(self):
        if self.image_size % (1 << self.depth):
            raise ValueError(
                f"image_size {self.image_size} not divisible by 2^{self.depth}")
        if min(self.base_width, self.time_embed_dim, self.channels) < 1:
            raise ValueError("widths must be >= 1")
        if self.injection not in ("decoder_stage", "skip"):
            raise ValueError(f"unknown injection mode {self.injection!r}")

    @property
    def stage_widths(self) -> list[int]:
        return [self.base_width << d for d in range(self.depth + 1)]


@dataclass(frozen=True)
class ControlEncoderConfig:
    stage_channels: tuple[int, ...] = (8, 16, 32)
    blocks_per_stage: int = 2
    merge: str = "space_to_depth"

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        if any(b >= a for a, b in zip(self.stage_channels[1:], self.stage_channels)):
            raise ValueError("stage_channels must be strictly increasing")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")
        if self.merge != "space_to_depth":
            raise ValueError(f"unknown merge mode {self.merge!r}")


class ControlFeatures:
    """Feature pyramid aligned to the denoiser decoder stages.

    Level i lives at resolution image_size / 2^i with the decoder's stage
    width; alignment is validated at construction.
    """

    def __init__(self, levels, expected_shapes=None):
        levels = tuple(levels)
        for a, b in zip(levels, levels[1:]):
            if b.shape[2] * 2 != a.shape[2] or b.shape[3] * 2 != a.shape[3]:
                raise ShapeError("control pyramid levels must halve in resolution")
        if expected_shapes is not None:
            for lvl, exp in zip(levels, expected_shapes):
                if tuple(lvl.shape[1:]) != tuple(exp):
                    raise ShapeError(
                        f"control level shape {lvl.shape[1:]} != expected {exp}")
        self.levels = levels

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i) -> Tensor:
        return self.levels[i]

    def __iter__(self):
        return iter(self.levels)

    def map(self, fn) -> "ControlFeatures":
        return ControlFeatures([fn(l) for l in self.levels])


def timestep_embedding(t, dim: int, n: int | None = None) -> np.ndarray:
    """Sinusoidal embedding of (per-sample) timesteps, shape (N, dim)."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(n if n is not None else 1, float(t))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


def _conv_init(rng, out_c, in_c, kh, kw):
    std = np.sqrt(2.0 / (in_c * kh * kw))
    return rng.standard_normal((out_c, in_c, kh, kw)) * std


def _linear_init(rng, out_f, in_f):
    return rng.standard_normal((out_f, in_f)) * np.sqrt(1.0 / in_f)


class DualBranchModel:
    """Single parameter storage serving every conditioning branch.

    Encoder-side denoiser parameters (stem, down blocks, downsamplers) are
    frozen; the decoder, time projection, and the whole control encoder
    train. Forward passes never mutate parameters.
    """

    def __init__(self, denoiser: DenoiserConfig | None = None,
                 control: ControlEncoderConfig | None = None, seed: int = 0):
        self.denoiser_config = denoiser or DenoiserConfig()
        self.control_config = control or ControlEncoderConfig()
        dcfg, ccfg = self.denoiser_config, self.control_config
        if len(ccfg.stage_channels) != dcfg.depth + 1:
            raise ValueError(
                f"control encoder needs {dcfg.depth + 1} stages to align with "
                f"the denoiser, got {len(ccfg.stage_channels)}")
        self.params: dict[str, Tensor] = {}
        self.frozen: set[str] = set()
        self._build(rng_for(seed, "init"))

    # -- construction ------------------------------------------------------

    def _add(self, name: str, value: np.ndarray, frozen: bool = False) -> None:
        self.params[name] = Tensor(value, requires_grad=not frozen)
        if frozen:
            self.frozen.add(name)

    def _add_conv(self, rng, name, out_c, in_c, k, frozen=False, zero=False):
        w = np.zeros((out_c, in_c, k, k)) if zero else _conv_init(rng, out_c, in_c, k, k)
        self._add(f"{name}.w", w, frozen)
        self._add(f"{name}.b", np.zeros(out_c), frozen)

    def _add_block(self, rng, name, width, emb_dim=None, frozen=False):
        self._add_conv(rng, f"{name}.conv1", width, width, 3, frozen)
        if emb_dim is not None:
            self._add(f"{name}.temb.w", _linear_init(rng, width, emb_dim), frozen)
            self._add(f"{name}.temb.b", np.zeros(width), frozen)
        # second conv opens at zero so blocks start as identities and the
        # residual stack cannot inflate activations at init; frozen blocks
        # keep a damped random draw instead (zero would freeze them trivial)
        self._add_conv(rng, f"{name}.conv2", width, width, 3, frozen,
                       zero=not frozen)
        if frozen:
            self.params[f"{name}.conv2.w"].data *= 0.3

    def _build(self, rng):
        dcfg, ccfg = self.denoiser_config, self.control_config
        widths = dcfg.stage_widths
        e = dcfg.time_embed_dim
        self._add("time.w1", _linear_init(rng, e, e))
        self._add("time.b1", np.zeros(e))
        self._add("time.w2", _linear_init(rng, e, e))
        self._add("time.b2", np.zeros(e))
        self._add_conv(rng, "stem", widths[0], dcfg.channels, 3, frozen=True)
        for d in range(dcfg.depth):
            self._add_block(rng, f"enc{d}", widths[d], e, frozen=True)
            self._add_conv(rng, f"down{d}", widths[d + 1], widths[d], 3, frozen=True)
        self._add_block(rng, "mid", widths[-1], e)
        for d in reversed(range(dcfg.depth)):
            self._add_conv(rng, f"dec{d}.up", widths[d], widths[d + 1], 3)
            self._add_block(rng, f"dec{d}", widths[d], e)
        # zero head: the untrained model predicts zero noise, loss starts near 1
        self._add_conv(rng, "head", dcfg.channels, widths[0], 3, zero=True)

        sc = ccfg.stage_channels
        self._add_conv(rng, "ctrl.stem", sc[0], dcfg.channels, 3)
        for i, width in enumerate(sc):
            for j in range(ccfg.blocks_per_stage):
                self._add_block(rng, f"ctrl.s{i}.b{j}", width)
            # zero-initialized so training starts from the uncontrolled model
            self._add_conv(rng, f"ctrl.proj{i}", widths[i], width, 1, zero=True)
            if i + 1 < len(sc):
                self._add_conv(rng, f"ctrl.merge{i}", sc[i + 1], width * 4, 1)

    # -- parameter access ---------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k not in self.frozen}

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def flat_parameter_vector(self, names=None) -> np.ndarray:
        names = list(self.params) if names is None else list(names)
        return np.concatenate([self.params[k].data.reshape(-1) for k in names])

    # -- forward helpers ----------------------------------------------------

    def _conv(self, x, name, stride=1, padding=1):
        y = tz.conv2d(x, self.params[f"{name}.w"], stride, padding)
        return tz.add_channel(y, self.params[f"{name}.b"])

    def _block(self, x, name, emb=None):
        h = self._conv(x, f"{name}.conv1")
        if emb is not None:
            tv = tz.linear(emb, self.params[f"{name}.temb.w"],
                           self.params[f"{name}.temb.b"])
            h = tz.add_channel(h, tv)
        h = tz.silu(h)
        h = self._conv(h, f"{name}.conv2")
        return tz.add(x, h)

    def _check_spatial(self, x: Tensor, what: str) -> None:
        s = self.denoiser_config.image_size
        if x.data.ndim != 4 or x.shape[2] != s or x.shape[3] != s:
            raise ShapeError(f"{what} must be (N, C, {s}, {s}), got {x.shape}")

    def expected_control_shapes(self) -> list[tuple[int, int, int]]:
        dcfg = self.denoiser_config
        return [(w, dcfg.image_size >> d, dcfg.image_size >> d)
                for d, w in enumerate(dcfg.stage_widths)]

    # -- control extraction -------------------------------------------------

    def extract_control(self, x: Tensor | np.ndarray) -> ControlFeatures:
        """Encode an image (C channels, [-1, 1]) or mask (1 channel, [0, 1])
        into the control pyramid. The same weights serve both; masks are
        replicated across channels first."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        self._check_spatial(x, "control input")
        c = self.denoiser_config.channels
        if x.shape[1] == 1 and c != 1:
            x = tz.repeat_channels(x, c)
        elif x.shape[1] != c:
            raise ShapeError(f"control input needs 1 or {c} channels")
        ccfg = self.control_config
        h = self._conv(x, "ctrl.stem")
        levels = []
        for i in range(len(ccfg.stage_channels)):
            for j in range(ccfg.blocks_per_stage):
                h = self._block(h, f"ctrl.s{i}.b{j}")
            levels.append(self._conv(h, f"ctrl.proj{i}", padding=0))
            if i + 1 < len(ccfg.stage_channels):
                h = tz.space_to_depth(h, 2)
                h = self._conv(h, f"ctrl.merge{i}", padding=0)
        return ControlFeatures(levels, self.expected_control_shapes())

    # -- denoiser -----------------------------------------------------------

    def predict_noise(self, z_t: Tensor, t, control: ControlFeatures | None) -> Tensor:
        """Noise prediction for latent z_t at timestep t under the given
        control (None selects the unconditional branch)."""
        self._check_spatial(z_t, "z_t")
        dcfg = self.denoiser_config
        if z_t.shape[1] != dcfg.channels:
            raise ShapeError(f"z_t needs {dcfg.channels} channels, got {z_t.shape[1]}")
        tv = np.asarray(t)
        if np.any(tv < 0):
            raise ValueError("timestep must be non-negative")
        if control is not None:
            expected = self.expected_control_shapes()
            if len(control) != len(expected):
                raise ShapeError("control pyramid has wrong number of levels")
            for lvl, exp in zip(control, expected):
                if lvl.shape[0] != z_t.shape[0] or tuple(lvl.shape[1:]) != exp:
                    raise ShapeError(
                        f"control level {lvl.shape} does not align with {exp}")

        emb = Tensor(timestep_embedding(t, dcfg.time_embed_dim, n=z_t.shape[0]))
        emb = tz.linear(emb, self.params["time.w1"], self.params["time.b1"])
        emb = tz.silu(emb)
        emb = tz.linear(emb, self.params["time.w2"], self.params["time.b2"])

        inject_stage = dcfg.injection == "decoder_stage"
        x = self._conv(z_t, "stem")
        skips = []
        for d in range(dcfg.depth):
            x = self._block(x, f"enc{d}", emb)
            skips.append(x)
            x = self._conv(x, f"down{d}", stride=2)
        if control is not None:
            x = tz.add(x, control[dcfg.depth])
        x = self._block(x, "mid", emb)
        for d in reversed(range(dcfg.depth)):
            x = tz.upsample_nearest(x, 2)
            x = self._conv(x, f"dec{d}.up")
            skip = skips[d]
            if control is not None and not inject_stage:
                skip = tz.add(skip, control[d])
            x = tz.add(x, skip)
            if control is not None and inject_stage:
                x = tz.add(x, control[d])
            x = self._block(x, f"dec{d}", emb)
        return self._conv(x, "head")


def mix_controls(c_i: ControlFeatures, c_m: ControlFeatures, k: int, n_iter: int,
                 w_m: float) -> ControlFeatures:
    """Blend image and mask pyramids: w_i * c_i + w_m * sg(c_m), w_i = k/n_iter.

    The mask term is detached, so gradients reach parameters only along the
    image path.
    """
    if len(c_i) != len(c_m):
        raise ShapeError("control pyramids differ in depth")
    if not 0 <= k <= n_iter:
        raise ValueError(f"iteration {k} outside [0, {n_iter}]")
    w_i = k / n_iter
    levels = []
    for a, b in zip(c_i, c_m):
        if a.shape != b.shape:
            raise ShapeError(f"control level mismatch {a.shape} vs {b.shape}")
        levels.append(tz.add(tz.mul(a, w_i),
                             tz.mul(tz.stop_gradient(b), float(w_m))))
    return ControlFeatures(levels)


def guided_noise(model: DualBranchModel, z_t: Tensor, t,
                 c_m: ControlFeatures, lam: float) -> Tensor:
    """Classifier-free guided prediction eps_u + lam * (eps_c - eps_u).

    lam = 1 collapses to the conditional branch and lam = 0 to the
    unconditional branch, both exactly (no arithmetic applied).
    """
    if lam < 0:
        raise ValueError("guidance scale must be >= 0")
    if lam == 1.0:
        return model.predict_noise(z_t, t, c_m)
    eps_u = model.predict_noise(z_t, t, None)
    if lam == 0.0:
        return eps_u
    eps_c = model.predict_noise(z_t, t, c_m)
    return tz.add(eps_u, tz.mul(tz.sub(eps_c, eps_u), float(lam)))


# --------------------------------------------------------------------------
# Checkpoint I/O: one JSON header line, then raw float64 little-endian blobs.
# --------------------------------------------------------------------------


def _manifest(params: dict[str, Tensor], frozen: set[str]):
    entries, offset = [], 0
    for name, p in params.items():
        entries.append({"name": name, "shape": list(p.shape), "offset": offset,
                        "frozen": name in frozen})
        offset += p.size
    return entries, offset


def save_checkpoint(path, model: DualBranchModel, schedule_cfg: dict,
                    optimizer=None) -> None:
    entries, total = _manifest(model.params, model.frozen)
    header = {
        "format": "dualdiff-checkpoint-v1",
        "denoiser": asdict(model.denoiser_config),
        "control": asdict(model.control_config),
        "schedule": schedule_cfg,
        "params": entries,
        "optimizer": optimizer.manifest() if optimizer is not None else None,
    }
    buf = io.BytesIO()
    buf.write(json.dumps(header, sort_keys=True).encode("utf-8"))
    buf.write(b"\n")
    for p in model.params.values():
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    if optimizer is not None:
        buf.write(optimizer.state_bytes())
    from .common import atomic_write_bytes
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path):
    """Returns (model, schedule_cfg, header, optimizer_blob_bytes)."""
    raw = open(path, "rb").read()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("format") != "dualdiff-checkpoint-v1":
        raise ValueError(f"not a recognized checkpoint: {path}")
    ctrl = dict(header["control"])
    ctrl["stage_channels"] = tuple(ctrl["stage_channels"])
    model = DualBranchModel(DenoiserConfig(**header["denoiser"]),
                            ControlEncoderConfig(**ctrl))
    blob = raw[nl + 1:]
    cursor = 0
    for entry in header["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size,
                            offset=entry["offset"] * 8).reshape(shape)
        if name not in model.params or model.params[name].shape != shape:
            raise ValueError(f"checkpoint parameter {name!r} does not match model")
        model.params[name].data = arr.copy()
        cursor = entry["offset"] * 8 + size * 8
    opt_blob = blob[cursor:] if header.get("optimizer") else b""
    return model, header["schedule"], header, opt_blob
