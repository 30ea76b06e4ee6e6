"""Rank-4 tensors with reverse-mode differentiation.

Values are immutable (batch, channels, height, width) arrays, float32 by
default.  Every operation here is a primitive with a paired backward rule;
while a :class:`GradTape` is active the primitives record themselves, and
replaying the tape in reverse yields exact loss gradients for arbitrary
compositions.  float64 is supported throughout so numerical checks can run
at higher precision than the training path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class Tensor:
    """Immutable rank-4 value: (batch, channels, height, width).

    The wrapped array is treated as read-only after construction; all
    operations return fresh tensors.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are rank-4 (n, c, h, w); got rank {arr.ndim}")
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def numel(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


def tensor(data, dtype=DEFAULT_DTYPE) -> Tensor:
    """Build a tensor from array-like data, casting to the given dtype."""
    return Tensor(np.asarray(data, dtype=dtype))


def zeros(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def full(shape, value, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype))


def scalar(value, dtype=DEFAULT_DTYPE) -> Tensor:
    """A (1, 1, 1, 1) tensor holding one value."""
    return Tensor(np.full((1, 1, 1, 1), value, dtype=dtype))


# ---------------------------------------------------------------------------
# Gradient tape
# ---------------------------------------------------------------------------

# A backward rule receives the output cotangents (one ndarray per output,
# zeros substituted for unused outputs) and a per-input "wanted" mask, and
# returns one cotangent ndarray (or None) per recorded input.
_BackwardFn = Callable[[tuple, tuple], tuple]


class _Recorded:
    __slots__ = ("name", "inputs", "outputs", "backward")

    def __init__(self, name: str, inputs: tuple, outputs: tuple, backward: _BackwardFn):
        self.name = name
        self.inputs = inputs
        self.outputs = outputs
        self.backward = backward


class GradTape:
    """Records primitive applications in execution order.

    One tape per training step; tapes cannot be nested.  Use as a context
    manager: operations executed inside the block are recorded, and
    :meth:`gradients` replays their backward rules in reverse.
    """

    _active: "GradTape | None" = None

    def __init__(self):
        self._records: list[_Recorded] = []

    def __enter__(self) -> "GradTape":
        if GradTape._active is not None:
            raise RuntimeError("a GradTape is already active; tapes are single-writer")
        GradTape._active = self
        return self

    def __exit__(self, exc_type, exc, tb):
        GradTape._active = None
        return False

    def __len__(self) -> int:
        return len(self._records)

    def gradients(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Cotangent of ``loss`` for each tensor in ``params``.

        ``loss`` must be a scalar produced through recorded primitives.
        Parameters the loss does not depend on get zero cotangents.
        """
        if loss.numel != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")

        # Forward sweep: which tensors can influence a requested parameter's
        # gradient (i.e. are parameters or are computed from one).
        needed: set[int] = {id(p) for p in params}
        for rec in self._records:
            if any(id(t) in needed for t in rec.inputs):
                needed.update(id(o) for o in rec.outputs)

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        # arrays we created by accumulation and may therefore update in place
        owned: set[int] = set()
        for rec in reversed(self._records):
            if not any(id(o) in needed for o in rec.outputs):
                continue
            out_grads = tuple(grads.get(id(o)) for o in rec.outputs)
            if all(g is None for g in out_grads):
                continue
            out_grads = tuple(
                g if g is not None else np.zeros_like(o.data)
                for g, o in zip(out_grads, rec.outputs)
            )
            wanted = tuple(id(t) in needed for t in rec.inputs)
            in_grads = rec.backward(out_grads, wanted)
            for t, g, w in zip(rec.inputs, in_grads, wanted):
                if not w or g is None:
                    continue
                tid = id(t)
                acc = grads.get(tid)
                if acc is None:
                    # may alias an array a backward rule also handed elsewhere,
                    # so it must not be mutated until we own a copy
                    grads[tid] = g
                elif tid in owned:
                    acc += g
                else:
                    grads[tid] = acc + g
                    owned.add(tid)
        return [grads.get(id(p), np.zeros_like(p.data)) for p in params]


def backward(tape: GradTape, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Replay ``tape`` in reverse, returning d(loss)/d(param) per parameter."""
    return tape.gradients(loss, params)


def _record(name: str, inputs: tuple, outputs: tuple, backward_fn: _BackwardFn) -> None:
    tape = GradTape._active
    if tape is not None:
        tape._records.append(_Recorded(name, inputs, outputs, backward_fn))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


# ---------------------------------------------------------------------------
# Elementwise primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    """Elementwise a + b with numpy broadcasting; b may be a Python scalar."""
    if isinstance(b, Tensor):
        out = Tensor(a.data + b.data)

        def bwd(gs, wanted):
            g = gs[0]
            return (
                _unbroadcast(g, a.shape) if wanted[0] else None,
                _unbroadcast(g, b.shape) if wanted[1] else None,
            )

        _record("add", (a, b), (out,), bwd)
        return out

    out = Tensor(a.data + a.data.dtype.type(b))
    _record("add", (a,), (out,), lambda gs, wanted: (gs[0],))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def bwd(gs, wanted):
        g = gs[0]
        return (
            _unbroadcast(g, a.shape) if wanted[0] else None,
            -_unbroadcast(g, b.shape) if wanted[1] else None,
        )

    _record("sub", (a, b), (out,), bwd)
    return out


def mul(a: Tensor, b) -> Tensor:
    """Elementwise a * b with numpy broadcasting; b may be a Python scalar."""
    if isinstance(b, Tensor):
        out = Tensor(a.data * b.data)

        def bwd(gs, wanted):
            g = gs[0]
            return (
                _unbroadcast(g * b.data, a.shape) if wanted[0] else None,
                _unbroadcast(g * a.data, b.shape) if wanted[1] else None,
            )

        _record("mul", (a, b), (out,), bwd)
        return out

    k = a.data.dtype.type(b)
    out = Tensor(a.data * k)
    _record("mul", (a,), (out,), lambda gs, wanted: (gs[0] * k,))
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    _record("neg", (a,), (out,), lambda gs, wanted: (-gs[0],))
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data))
    _record("exp", (a,), (out,), lambda gs, wanted: (gs[0] * out.data,))
    return out


def absolute(a: Tensor) -> Tensor:
    """Elementwise |a|; the backward rule uses sign with sign(0) = 0."""
    out = Tensor(np.abs(a.data))
    _record("abs", (a,), (out,), lambda gs, wanted: (gs[0] * np.sign(a.data),))
    return out


def sum_all(a: Tensor) -> Tensor:
    """Total of all elements as a (1, 1, 1, 1) tensor."""
    out = Tensor(a.data.sum(dtype=a.data.dtype).reshape(1, 1, 1, 1))

    def bwd(gs, wanted):
        return (np.full_like(a.data, gs[0].reshape(())),)

    _record("sum_all", (a,), (out,), bwd)
    return out


def mean_all(a: Tensor) -> Tensor:
    """Mean of all elements as a (1, 1, 1, 1) tensor."""
    inv = a.data.dtype.type(1.0 / a.numel)
    out = Tensor((a.data.sum(dtype=a.data.dtype) * inv).reshape(1, 1, 1, 1))

    def bwd(gs, wanted):
        return (np.full_like(a.data, gs[0].reshape(()) * inv),)

    _record("mean_all", (a,), (out,), bwd)
    return out


def logsumexp(a: Tensor, axis: int) -> Tensor:
    """log(sum(exp(a))) along one axis, keepdims, max-shifted for stability."""
    m = a.data.max(axis=axis, keepdims=True)
    shifted = np.subtract(a.data, m)
    np.exp(shifted, out=shifted)
    total = shifted.sum(axis=axis, keepdims=True)
    out_data = np.log(total)
    out_data += m
    out = Tensor(out_data)

    def bwd(gs, wanted):
        # d/dx is the softmax along the reduced axis
        return ((gs[0] / total) * shifted,)

    _record("logsumexp", (a,), (out,), bwd)
    return out


def transpose(a: Tensor, axes: tuple[int, int, int, int]) -> Tensor:
    """Permute axes; the result stays rank-4."""
    if sorted(axes) != [0, 1, 2, 3]:
        raise ShapeError(f"axes must be a permutation of (0, 1, 2, 3), got {axes}")
    out = Tensor(np.ascontiguousarray(np.transpose(a.data, axes)))
    inverse = tuple(np.argsort(axes))

    def bwd(gs, wanted):
        return (np.ascontiguousarray(np.transpose(gs[0], inverse)),)

    _record("transpose", (a,), (out,), bwd)
    return out


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    """Stride-1 cross-correlation with zero "same" padding.

    ``kernel`` is laid out (out_ch, in_ch_per_group, kh, kw).  Effective
    kernel extents (k - 1) * dilation + 1 must be odd so the symmetric
    padding ((k - 1) * d) / 2 reproduces the input spatial size exactly.
    """

    out_ch: int
    in_ch: int
    kh: int
    kw: int
    groups: int = 1
    dilation: tuple[int, int] = (1, 1)

    def __post_init__(self):
        if self.groups < 1:
            raise ShapeError(f"groups must be positive, got {self.groups}")
        if self.in_ch % self.groups:
            raise ShapeError(f"in_ch {self.in_ch} not divisible by groups {self.groups}")
        if self.out_ch % self.groups:
            raise ShapeError(f"out_ch {self.out_ch} not divisible by groups {self.groups}")
        dh, dw = self.dilation
        if dh < 1 or dw < 1:
            raise ShapeError(f"dilation must be >= 1, got {self.dilation}")
        if ((self.kh - 1) * dh) % 2 or ((self.kw - 1) * dw) % 2:
            raise ShapeError(
                f"effective kernel extent must be odd for exact same padding; "
                f"got kernel ({self.kh}, {self.kw}) with dilation {self.dilation}"
            )

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_ch, self.in_ch // self.groups, self.kh, self.kw)

    @property
    def padding(self) -> tuple[int, int]:
        return ((self.kh - 1) * self.dilation[0] // 2, (self.kw - 1) * self.dilation[1] // 2)


_einsum_paths: dict = {}


def _einsum(subscripts: str, *ops: np.ndarray) -> np.ndarray:
    # np.einsum with the contraction path cached per (subscripts, shapes)
    key = (subscripts, tuple(op.shape for op in ops))
    path = _einsum_paths.get(key)
    if path is None:
        path = np.einsum_path(subscripts, *ops, optimize="optimal")[0]
        _einsum_paths[key] = path
    return np.einsum(subscripts, *ops, optimize=path)


def _pad_spatial(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    out[:, :, ph:ph + h, pw:pw + w] = x
    return out


def _dilated_windows(padded: np.ndarray, kh: int, kw: int, dh: int, dw: int) -> np.ndarray:
    # view of shape (n, c, h_out, w_out, kh, kw); no copy
    eh, ew = (kh - 1) * dh + 1, (kw - 1) * dw + 1
    win = np.lib.stride_tricks.sliding_window_view(padded, (eh, ew), axis=(2, 3))
    return win[..., ::dh, ::dw]


def _conv_windows(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    padded = _pad_spatial(x, *spec.padding)
    return _dilated_windows(padded, spec.kh, spec.kw, *spec.dilation)


def _to_batch_major(flat: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    # (out_ch, n*h*w) -> (n, out_ch, h, w); free reshape when n == 1
    if n == 1:
        return flat.reshape(1, -1, h, w)
    return flat.reshape(-1, n, h, w).transpose(1, 0, 2, 3)


def _im2col(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    # (in_ch * kh * kw, n * h * w), duplicating the receptive fields
    n, cin, h, wd = x.shape
    win = _conv_windows(x, spec)
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(cin * spec.kh * spec.kw, n * h * wd)


def _conv_forward(x: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    n, cin, h, wd = x.shape
    dh, dw_ = spec.dilation
    if spec.groups == cin and spec.out_ch == cin:
        # depthwise: accumulate shifted slices, one per kernel tap
        padded = _pad_spatial(x, *spec.padding)
        out = np.zeros((n, cin, h, wd), dtype=x.dtype)
        for i in range(spec.kh):
            for j in range(spec.kw):
                out += padded[:, :, i * dh:i * dh + h, j * dw_:j * dw_ + wd] \
                    * w[:, 0, i, j].reshape(1, cin, 1, 1)
        return out
    if spec.groups == 1:
        if spec.kh == 1 and spec.kw == 1:
            if n == 1:
                flat = w.reshape(spec.out_ch, cin) @ x.reshape(cin, h * wd)
                return flat.reshape(1, spec.out_ch, h, wd)
            return _einsum("oc,nchw->nohw", w.reshape(spec.out_ch, cin), x)
        flat = w.reshape(spec.out_ch, -1) @ _im2col(x, spec)
        return _to_batch_major(flat, n, h, wd)
    g = spec.groups
    win = _conv_windows(x, spec)
    wing = win.reshape(n, g, cin // g, h, wd, spec.kh, spec.kw)
    wg = w.reshape(g, spec.out_ch // g, cin // g, spec.kh, spec.kw)
    out = _einsum("ngchwkl,gockl->ngohw", wing, wg)
    return out.reshape(n, spec.out_ch, h, wd)


def _conv_grad_w(x: np.ndarray, gout: np.ndarray, spec: ConvSpec) -> np.ndarray:
    n, cin, h, wd = x.shape
    if spec.groups == cin and spec.out_ch == cin:
        win = _conv_windows(x, spec)
        return _einsum("nchwkl,nchw->ckl", win, gout)[:, None]
    if spec.groups == 1:
        gm = gout.reshape(spec.out_ch, -1) if n == 1 \
            else gout.transpose(1, 0, 2, 3).reshape(spec.out_ch, -1)
        if spec.kh == 1 and spec.kw == 1:
            xm = x.reshape(cin, -1) if n == 1 else x.transpose(1, 0, 2, 3).reshape(cin, -1)
            return (gm @ xm.T).reshape(spec.weight_shape)
        return (gm @ _im2col(x, spec).T).reshape(spec.weight_shape)
    g = spec.groups
    win = _conv_windows(x, spec)
    wing = win.reshape(n, g, cin // g, h, wd, spec.kh, spec.kw)
    goutg = gout.reshape(n, g, spec.out_ch // g, h, wd)
    dw = _einsum("ngchwkl,ngohw->gockl", wing, goutg)
    return dw.reshape(spec.out_ch, cin // g, spec.kh, spec.kw)


def _conv_grad_x(gout: np.ndarray, w: np.ndarray, spec: ConvSpec) -> np.ndarray:
    # Cross-correlate the output gradient with the spatially flipped kernel,
    # in/out channel roles swapped within each group.
    g = spec.groups
    cpg, opg = spec.in_ch // g, spec.out_ch // g
    wt = w.reshape(g, opg, cpg, spec.kh, spec.kw).transpose(0, 2, 1, 3, 4)
    wt = np.ascontiguousarray(wt[..., ::-1, ::-1]).reshape(spec.in_ch, opg, spec.kh, spec.kw)
    spec_t = ConvSpec(
        out_ch=spec.in_ch, in_ch=spec.out_ch, kh=spec.kh, kw=spec.kw,
        groups=g, dilation=spec.dilation,
    )
    return _conv_forward(gout, wt, spec_t)


def conv2d(x: Tensor, spec: ConvSpec, weights: Tensor, bias: Tensor) -> Tensor:
    """2-D cross-correlation per ``spec`` plus a per-output-channel bias."""
    if x.c != spec.in_ch:
        raise ShapeError(f"input has {x.c} channels, spec expects in_ch={spec.in_ch}")
    if weights.shape != spec.weight_shape:
        raise ShapeError(f"weights shaped {weights.shape}, spec expects {spec.weight_shape}")
    if bias.shape != (1, spec.out_ch, 1, 1):
        raise ShapeError(f"bias shaped {bias.shape}, expected (1, {spec.out_ch}, 1, 1)")

    out = Tensor(_conv_forward(x.data, weights.data, spec) + bias.data)

    def bwd(gs, wanted):
        g = gs[0]
        dx = _conv_grad_x(g, weights.data, spec) if wanted[0] else None
        dw = _conv_grad_w(x.data, g, spec) if wanted[1] else None
        db = g.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1) if wanted[2] else None
        return dx, dw, db

    _record("conv2d", (x, weights, bias), (out,), bwd)
    return out


# ---------------------------------------------------------------------------
# Normalization, gating, pooling, rearrangement
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each (n, h, w) site's channel vector to zero mean / unit
    variance, then scale by ``gain`` and offset by ``shift`` (both (1, c, 1, 1))."""
    if gain.shape != (1, x.c, 1, 1) or shift.shape != (1, x.c, 1, 1):
        raise ShapeError(
            f"gain/shift must be (1, {x.c}, 1, 1); got {gain.shape} and {shift.shape}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = np.square(centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = centered * inv
    out = Tensor(gain.data * xhat + shift.data)

    def bwd(gs, wanted):
        g = gs[0]
        dgain = (g * xhat).sum(axis=(0, 2, 3), keepdims=True) if wanted[1] else None
        dshift = g.sum(axis=(0, 2, 3), keepdims=True) if wanted[2] else None
        dx = None
        if wanted[0]:
            dxh = g * gain.data
            dx = dxh - dxh.mean(axis=1, keepdims=True)
            dx -= xhat * (dxh * xhat).mean(axis=1, keepdims=True)
            dx *= inv
        return dx, dgain, dshift

    _record("layer_norm", (x, gain, shift), (out,), bwd)
    return out


def simple_gate(x: Tensor) -> Tensor:
    """Split channels in half and multiply the halves elementwise."""
    if x.c % 2:
        raise ShapeError(f"simple_gate needs an even channel count, got {x.c}")
    half = x.c // 2
    a, b = x.data[:, :half], x.data[:, half:]
    out = Tensor(a * b)

    def bwd(gs, wanted):
        g = gs[0]
        return (np.concatenate([g * b, g * a], axis=1),)

    _record("simple_gate", (x,), (out,), bwd)
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel; output shape (n, c, 1, 1)."""
    out = Tensor(x.data.mean(axis=(2, 3), keepdims=True))
    inv = x.data.dtype.type(1.0 / (x.h * x.w))

    def bwd(gs, wanted):
        return (np.broadcast_to(gs[0] * inv, x.shape).copy(),)

    _record("global_avg_pool", (x,), (out,), bwd)
    return out


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange r*r channel groups into an r-times-larger spatial grid.

    out[n, c, h*r + i, w*r + j] = in[n, c*r*r + i*r + j, h, w]
    """
    if r < 1:
        raise ShapeError(f"upscale factor must be >= 1, got {r}")
    if x.c % (r * r):
        raise ShapeError(f"channel count {x.c} not divisible by r^2 = {r * r}")
    n, c, h, w = x.shape
    cout = c // (r * r)
    out_data = (
        x.data.reshape(n, cout, r, r, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, cout, h * r, w * r)
    )
    out = Tensor(np.ascontiguousarray(out_data))

    def bwd(gs, wanted):
        g = gs[0].reshape(n, cout, h, r, w, r).transpose(0, 1, 3, 5, 2, 4)
        return (np.ascontiguousarray(g.reshape(n, c, h, w)),)

    _record("pixel_shuffle", (x,), (out,), bwd)
    return out


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    if r < 1:
        raise ShapeError(f"downscale factor must be >= 1, got {r}")
    if x.h % r or x.w % r:
        raise ShapeError(f"spatial size {x.h}x{x.w} not divisible by r = {r}")
    n, c, h, w = x.shape
    out_data = (
        x.data.reshape(n, c, h // r, r, w // r, r)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, c * r * r, h // r, w // r)
    )
    out = Tensor(np.ascontiguousarray(out_data))

    def bwd(gs, wanted):
        g = gs[0].reshape(n, c, r, r, h // r, w // r).transpose(0, 1, 4, 2, 5, 3)
        return (np.ascontiguousarray(g.reshape(n, c, h, w)),)

    _record("pixel_unshuffle", (x,), (out,), bwd)
    return out


# ---------------------------------------------------------------------------
# Fourier transform and batched matrix product
# ---------------------------------------------------------------------------

def dft2(x: Tensor) -> tuple[Tensor, Tensor]:
    """Unnormalized 2-D discrete Fourier transform over (h, w) per channel.

    X[u, v] = sum_{h, w} x[h, w] * exp(-2*pi*i*(u*h/H + v*w/W)), returned as
    separate real and imaginary tensors.
    """
    n, c, h, w = x.shape
    coeffs = np.fft.fft2(x.data, axes=(2, 3))
    re = Tensor(coeffs.real.astype(x.data.dtype))
    im = Tensor(coeffs.imag.astype(x.data.dtype))

    def bwd(gs, wanted):
        g_re, g_im = gs
        grad = np.fft.ifft2(g_re + 1j * g_im, axes=(2, 3)).real * (h * w)
        return (grad.astype(x.data.dtype),)

    _record("dft2", (x,), (re, im), bwd)
    return re, im


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batched over the first two.

    (n, B, X, K) @ (n, B, K, Y) -> (n, B, X, Y), with a fixed accumulation
    order along K for every output value.
    """
    if a.shape[:2] != b.shape[:2]:
        raise ShapeError(f"batch dims differ: {a.shape[:2]} vs {b.shape[:2]}")
    if a.shape[3] != b.shape[2]:
        raise ShapeError(
            f"inner dimensions disagree: a has K={a.shape[3]}, b has K={b.shape[2]}"
        )
    out = Tensor(np.matmul(a.data, b.data))

    def bwd(gs, wanted):
        g = gs[0]
        da = np.matmul(g, b.data.swapaxes(2, 3)) if wanted[0] else None
        db = np.matmul(a.data.swapaxes(2, 3), g) if wanted[1] else None
        return da, db

    _record("batched_matmul", (a, b), (out,), bwd)
    return out


# ---------------------------------------------------------------------------
# Bilinear interpolation
# ---------------------------------------------------------------------------

def _bilinear_axis(size_in: int, r: int, dtype):
    pos = (np.arange(size_in * r, dtype=np.float64) + 0.5) / r - 0.5
    pos = np.clip(pos, 0.0, size_in - 1.0)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, size_in - 1)
    t = (pos - i0).astype(dtype)
    return i0, i1, t


def bilinear_upsample(x: Tensor, r: int) -> Tensor:
    """Bilinear interpolation to (h*r, w*r), half-pixel (align-corners-false)
    sample positions with edge clamping."""
    if r < 1:
        raise ShapeError(f"upscale factor must be >= 1, got {r}")
    n, c, h, w = x.shape
    dt = x.data.dtype
    i0, i1, th = _bilinear_axis(h, r, dt)
    j0, j1, tw = _bilinear_axis(w, r, dt)
    th_col = th[:, None]
    rows = x.data[:, :, i0, :] * (1 - th_col) + x.data[:, :, i1, :] * th_col
    out = Tensor(rows[:, :, :, j0] * (1 - tw) + rows[:, :, :, j1] * tw)

    def bwd(gs, wanted):
        g = gs[0]
        grows = np.zeros_like(rows)
        np.add.at(grows, (slice(None), slice(None), slice(None), j0), g * (1 - tw))
        np.add.at(grows, (slice(None), slice(None), slice(None), j1), g * tw)
        dx = np.zeros_like(x.data)
        np.add.at(dx, (slice(None), slice(None), i0, slice(None)), grows * (1 - th_col))
        np.add.at(dx, (slice(None), slice(None), i1, slice(None)), grows * th_col)
        return (dx,)

    _record("bilinear_upsample", (x,), (out,), bwd)
    return out


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[list[Tensor]], Tensor], params: Sequence[Tensor],
               eps: float = 1e-3) -> float:
    """Max relative error between tape gradients of ``f`` and central
    finite differences.

    ``f`` maps a list of tensors to a scalar tensor and must be pure.  The
    whole check runs in float64 regardless of the parameters' dtype; the
    error denominator is max(1, |analytic|, |numeric|) per coordinate.
    """
    base = [p.data.astype(np.float64) for p in params]
    p64 = [Tensor(b) for b in base]
    with GradTape() as tape:
        loss = f(p64)
    analytic = tape.gradients(loss, p64)

    worst = 0.0
    for k in range(len(base)):
        flat = base[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            plus = base[k].copy()
            plus.reshape(-1)[i] = orig + eps
            minus = base[k].copy()
            minus.reshape(-1)[i] = orig - eps
            f_plus = f([Tensor(plus) if j == k else p64[j] for j in range(len(base))]).item()
            f_minus = f([Tensor(minus) if j == k else p64[j] for j in range(len(base))]).item()
            numeric = (f_plus - f_minus) / (2.0 * eps)
            exact = float(analytic[k].reshape(-1)[i])
            err = abs(exact - numeric) / max(1.0, abs(exact), abs(numeric))
            if err > worst:
                worst = err
    return worst
