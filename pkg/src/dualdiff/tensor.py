"""Minimal float64 tensor algebra with tape-based reverse-mode differentiation.

Tensors wrap C-contiguous ``numpy.float64`` arrays. Differentiable ops append
entries to a global :class:`Tape`; :func:`backward` replays the tape in
reverse. Broadcasting is restricted to exact-shape and scalar operands; the
few channel-wise patterns the networks need are explicit ops
(:func:`add_channel`, :func:`upsample_nearest`, :func:`space_to_depth`).
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf was produced while debug checks are enabled."""


_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf detection on every op result (off by default)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


@contextlib.contextmanager
def debug_checks():
    global _DEBUG_CHECKS
    prev = _DEBUG_CHECKS
    _DEBUG_CHECKS = True
    try:
        yield
    finally:
        _DEBUG_CHECKS = prev


def _check_finite(arr: np.ndarray) -> None:
    if _DEBUG_CHECKS and not np.all(np.isfinite(arr)):
        raise NonFiniteError("non-finite value in op result")


class Tensor:
    """N-dimensional double-precision value, optionally tracked for gradients.

    ``grad`` accumulates across :func:`backward` calls and is ``None`` until
    the first backward pass reaches this tensor.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        _check_finite(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g)  # own copy; g may alias tape internals
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalar operands are allowed on either side.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape))


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------


class TapeEntry:
    """One differentiable op: output, inputs, and the local backward rule.

    ``backward(grad_out)`` returns one gradient array (or ``None``) per input.
    """

    __slots__ = ("output", "inputs", "backward", "region")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...],
                 backward: Callable[[np.ndarray], tuple], region: str | None):
        self.output = output
        self.inputs = inputs
        self.backward = backward
        self.region = region


class Tape:
    """Ordered record of differentiable ops (execution order == topo order)."""

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def clear(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


_TAPE = Tape()
_GRAD_ENABLED = True
_REGION: str | None = None


def active_tape() -> Tape:
    return _TAPE


def reset_tape() -> None:
    """Drop all recorded ops. Call between training steps to bound memory."""
    _TAPE.clear()


@contextlib.contextmanager
def fresh_tape():
    """Run a block on a new tape, restoring the previous one afterwards."""
    global _TAPE
    prev = _TAPE
    _TAPE = Tape()
    try:
        yield _TAPE
    finally:
        _TAPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable taping; ops produce requires_grad=False results."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def tape_region(name: str):
    """Label tape entries created within the block (for gradient-flow audits)."""
    global _REGION
    prev = _REGION
    _REGION = name
    try:
        yield
    finally:
        _REGION = prev


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPE.record(TapeEntry(out, tuple(inputs), backward_fn, _REGION))
    return out


# --------------------------------------------------------------------------
# Stop-gradient (with record/replay used by finite-difference checking)
# --------------------------------------------------------------------------

_SG_MODE = "off"  # off | record | replay
_SG_STORE: list[np.ndarray] = []
_SG_CURSOR = 0


def stop_gradient(a: Tensor) -> Tensor:
    """Value-identical copy that contributes zero gradient upstream.

    Under :func:`record_stop_gradients` the emitted values are stored; under
    :func:`replay_stop_gradients` stored values are returned instead of the
    (possibly perturbed) recomputed ones, so a finite-difference probe
    differentiates the same sg-frozen function the analytic pass saw.
    """
    global _SG_CURSOR
    if _SG_MODE == "replay":
        val = _SG_STORE[_SG_CURSOR]
        _SG_CURSOR += 1
        return Tensor(val.copy())
    val = a.data.copy()
    if _SG_MODE == "record":
        _SG_STORE.append(val.copy())
    return Tensor(val)


@contextlib.contextmanager
def record_stop_gradients(store: list):
    global _SG_MODE, _SG_STORE
    prev_mode, prev_store = _SG_MODE, _SG_STORE
    _SG_MODE, _SG_STORE = "record", store
    try:
        yield store
    finally:
        _SG_MODE, _SG_STORE = prev_mode, prev_store


@contextlib.contextmanager
def replay_stop_gradients(store: list):
    global _SG_MODE, _SG_STORE, _SG_CURSOR
    prev = (_SG_MODE, _SG_STORE, _SG_CURSOR)
    _SG_MODE, _SG_STORE, _SG_CURSOR = "replay", store, 0
    try:
        yield
    finally:
        _SG_MODE, _SG_STORE, _SG_CURSOR = prev


# --------------------------------------------------------------------------
# Elementwise ops
# --------------------------------------------------------------------------


def _binary_operands(a, b, op_name: str):
    """Resolve (tensor|scalar, tensor|scalar) to arrays; enforce exact-shape
    or scalar broadcasting only."""
    at = isinstance(a, Tensor)
    bt = isinstance(b, Tensor)
    if not at and not bt:
        raise TypeError(f"{op_name} needs at least one Tensor operand")
    av = a.data if at else np.float64(a)
    bv = b.data if bt else np.float64(b)
    if at and bt and a.shape != b.shape:
        raise ShapeError(f"{op_name}: shape mismatch {a.shape} vs {b.shape}")
    return av, bv, at, bt


def add(a, b) -> Tensor:
    av, bv, at, bt = _binary_operands(a, b, "add")
    out = Tensor(av + bv)
    if at and bt:
        return _record(out, (a, b), lambda g: (g, g))
    return _record(out, (a if at else b,), lambda g: (g,))


def sub(a, b) -> Tensor:
    av, bv, at, bt = _binary_operands(a, b, "sub")
    out = Tensor(av - bv)
    if at and bt:
        return _record(out, (a, b), lambda g: (g, -g))
    if at:
        return _record(out, (a,), lambda g: (g,))
    return _record(out, (b,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    av, bv, at, bt = _binary_operands(a, b, "mul")
    out = Tensor(av * bv)
    if at and bt:
        return _record(out, (a, b), lambda g: (g * bv, g * av))
    if at:
        return _record(out, (a,), lambda g: (g * bv,))
    return _record(out, (b,), lambda g: (g * av,))


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar (alias of ``mul`` with a scalar operand)."""
    return mul(a, float(s))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    from scipy.special import expit

    return expit(x)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _sigmoid(a.data)
    out = Tensor(a.data * s)
    return _record(out, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = Tensor(s)
    return _record(out, (a,), lambda g: (g * s * (1.0 - s),))


# --------------------------------------------------------------------------
# Reductions
# --------------------------------------------------------------------------


def tsum(a: Tensor) -> Tensor:
    out = Tensor(np.sum(a.data))

    def bwd(g):
        return (np.full_like(a.data, float(g)),)

    return _record(out, (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    n = a.size
    out = Tensor(np.sum(a.data) / n)

    def bwd(g):
        return (np.full_like(a.data, float(g) / n),)

    return _record(out, (a,), bwd)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """mean((a - b)^2), fused into one tape node."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = Tensor(np.sum(diff * diff) / n)

    def bwd(g):
        base = (2.0 * float(g) / n) * diff
        return (base, -base)

    return _record(out, (a, b), bwd)


# --------------------------------------------------------------------------
# Structured ops: conv2d, linear, channel bias, resampling
# --------------------------------------------------------------------------


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p))
    out[:, :, p:p + h, p:p + w] = x
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    """Channel-first columns of the padded input: (C*kh*kw, N*OH*OW).

    Channel-first keeps every copied chunk a contiguous spatial row, which is
    several times faster than a channels-last gather at these sizes.
    """
    n, c, h, w = xp.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    buf = np.empty((c, kh, kw, n, oh, ow))
    for i in range(kh):
        he = i + (oh - 1) * stride + 1
        for j in range(kw):
            we = j + (ow - 1) * stride + 1
            buf[:, i, j] = xp[:, :, i:he:stride, j:we:stride].swapaxes(0, 1)
    return buf.reshape(c * kh * kw, n * oh * ow), oh, ow


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with (K, C, kh, kw) kernel."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects 4-d input and kernel")
    n, c, h, w = x.shape
    ko, kc, kh, kw = kernel.shape
    if c != kc:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {kc}")
    xp = _pad_hw(x.data, padding)
    if kh > xp.shape[2] or kw > xp.shape[3]:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{xp.shape[2]}x{xp.shape[3]}")
    cols, oh, ow = _im2col(xp, kh, kw, stride)
    kmat = kernel.data.reshape(ko, kc * kh * kw)
    y = np.ascontiguousarray((kmat @ cols).reshape(ko, n, oh, ow).swapaxes(0, 1))
    _check_finite(y)
    out = Tensor(y)

    def bwd(g):
        gm = np.ascontiguousarray(g.swapaxes(0, 1)).reshape(ko, n * oh * ow)
        gk = None
        if kernel.requires_grad:
            gk = (gm @ cols.T).reshape(ko, kc, kh, kw)
        gx = None
        if x.requires_grad:
            # col2im: expand grads to per-tap columns, scatter-add back
            gcols = (kmat.T @ gm).reshape(kc, kh, kw, n, oh, ow)
            hp, wp = h + 2 * padding, w + 2 * padding
            gxp = np.zeros((kc, n, hp, wp))
            for i in range(kh):
                he = i + (oh - 1) * stride + 1
                for j in range(kw):
                    we = j + (ow - 1) * stride + 1
                    gxp[:, :, i:he:stride, j:we:stride] += gcols[:, i, j]
            gxp = gxp.swapaxes(0, 1)
            if padding:
                gxp = gxp[:, :, padding:-padding, padding:-padding]
            gx = np.ascontiguousarray(gxp)
        return (gx, gk)

    return _record(out, (x, kernel), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """(N, in) @ weight(out, in)^T + bias(out,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError("linear expects 2-d input and weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"linear: input width {x.shape[1]} vs weight width {weight.shape[1]}")
    y = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError("linear: bias shape mismatch")
        y = y + bias.data
    out = Tensor(y)

    if bias is None:
        def bwd(g):
            gx = g @ weight.data if x.requires_grad else None
            gw = g.T @ x.data if weight.requires_grad else None
            return (gx, gw)
        return _record(out, (x, weight), bwd)

    def bwd_b(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return (gx, gw, gb)

    return _record(out, (x, weight, bias), bwd_b)


def add_channel(x: Tensor, v: Tensor) -> Tensor:
    """Add a per-channel vector to an NCHW tensor.

    ``v`` of shape (C,) is shared across the batch; (N, C) is per-sample.
    This is the only channel-wise broadcast the stack needs, kept explicit
    instead of enabling general broadcasting.
    """
    n, c = x.shape[0], x.shape[1]
    if v.shape == (c,):
        y = x.data + v.data[None, :, None, None]

        def bwd(g):
            gx = g if x.requires_grad else None
            gv = g.sum(axis=(0, 2, 3)) if v.requires_grad else None
            return (gx, gv)
    elif v.shape == (n, c):
        y = x.data + v.data[:, :, None, None]

        def bwd(g):
            gx = g if x.requires_grad else None
            gv = g.sum(axis=(2, 3)) if v.requires_grad else None
            return (gx, gv)
    else:
        raise ShapeError(f"add_channel: vector shape {v.shape} does not match "
                         f"({c},) or ({n}, {c})")
    return _record(Tensor(y), (x, v), bwd)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour spatial upsampling of an NCHW tensor."""
    n, c, h, w = x.shape
    y = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)
    out = Tensor(y)

    def bwd(g):
        gr = g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))
        return (gr,)

    return _record(out, (x,), bwd)


def repeat_channels(x: Tensor, reps: int) -> Tensor:
    """Tile an NCHW tensor along the channel axis (each channel repeated
    ``reps`` times consecutively)."""
    n, c, h, w = x.shape
    out = Tensor(np.repeat(x.data, reps, axis=1))

    def bwd(g):
        return (g.reshape(n, c, reps, h, w).sum(axis=2),)

    return _record(out, (x,), bwd)


def space_to_depth(x: Tensor, factor: int = 2) -> Tensor:
    """Fold factor x factor spatial blocks into channels (patch merging)."""
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"space_to_depth: {h}x{w} not divisible by {factor}")
    hh, ww = h // factor, w // factor
    y = (x.data.reshape(n, c, hh, factor, ww, factor)
         .transpose(0, 1, 3, 5, 2, 4)
         .reshape(n, c * factor * factor, hh, ww))
    out = Tensor(np.ascontiguousarray(y))

    def bwd(g):
        gr = (g.reshape(n, c, factor, factor, hh, ww)
              .transpose(0, 1, 4, 2, 5, 3)
              .reshape(n, c, h, w))
        return (np.ascontiguousarray(gr),)

    return _record(out, (x,), bwd)


# --------------------------------------------------------------------------
# Backward pass
# --------------------------------------------------------------------------


def backward(loss: Tensor, trace: bool = False):
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients of one call are computed in a transient map and then added into
    the persistent ``grad`` buffers, so repeated calls accumulate exactly.
    With ``trace=True`` returns the set of region labels whose tape entries
    actually propagated gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: dict[int, Tensor] = {id(loss): loss}
    visited_regions: set[str] = set()
    for entry in reversed(_TAPE.entries):
        g_out = grads.get(id(entry.output))
        if g_out is None:
            continue
        if entry.region is not None:
            visited_regions.add(entry.region)
        for inp, g in zip(entry.inputs, entry.backward(g_out)):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            acc = grads.get(key)
            # rebind, never mutate: arrays here may be shared pass-throughs
            grads[key] = g if acc is None else acc + g
            touched[key] = inp
    for key, t in touched.items():
        if t.requires_grad:
            t.accumulate_grad(grads[key])
    if trace:
        return visited_regions
    return None


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------


class GradCheckReport:
    """Per-element relative errors between analytic and central differences."""

    def __init__(self, max_rel_error: float, rel_errors: np.ndarray, tol: float):
        self.max_rel_error = max_rel_error
        self.rel_errors = rel_errors
        self.tol = tol
        self.passed = bool(max_rel_error < tol)

    def __repr__(self):
        return (f"GradCheckReport(max_rel_error={self.max_rel_error:.3e}, "
                f"tol={self.tol:.1e}, passed={self.passed})")


def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
              tol: float = 1e-6) -> GradCheckReport:
    """Check backward() of scalar-valued ``f`` against central differences.

    Stop-gradient outputs are recorded on the analytic pass and replayed
    during the probes, so the numeric gradient differentiates the same
    sg-frozen function the tape saw.
    """
    x = Tensor(x.data.copy(), requires_grad=True)
    store: list[np.ndarray] = []
    with fresh_tape():
        with record_stop_gradients(store):
            loss = f(x)
        if loss.size != 1:
            raise ShapeError("gradcheck requires a scalar-valued function")
        backward(loss)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        with no_grad(), replay_stop_gradients(store):
            flat[i] = orig + h
            lp = f(x).item()
        with no_grad(), replay_stop_gradients(store):
            flat[i] = orig - h
            lm = f(x).item()
        flat[i] = orig
        nflat[i] = (lp - lm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    rel = np.abs(analytic - numeric) / denom
    return GradCheckReport(float(rel.max()) if rel.size else 0.0, rel, tol)
