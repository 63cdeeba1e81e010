"""Convolutional building blocks, LUT interpolation and activations.

Signals are laid out as ``[C, T]`` or batched ``[B, C, T]`` (channels,
time). All convolutions are stride-1 correlations along the time axis::

    y[o, i] = sum_k sum_c w[o, c, k] * x[c, i + r*k] + b[o]

Weight layouts:
    standard   ``[c_out, c_in, k]``
    depthwise  ``[c_in, k]``
    pointwise  ``[c_out, c_in, 1]``
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor, as_tensor, record

CONV_KINDS = ("standard", "depthwise", "pointwise")
PADDINGS = ("none", "zero-symmetric")


@dataclass(frozen=True)
class ConvSpec:
    kind: str
    c_in: int
    c_out: int
    k: int = 1
    r: int = 1
    padding: str = "none"
    bias: bool = True

    def __post_init__(self):
        if self.kind not in CONV_KINDS:
            raise ValueError(f"unknown conv kind {self.kind!r}")
        if self.padding not in PADDINGS:
            raise ValueError(f"unknown padding {self.padding!r}")
        if min(self.c_in, self.c_out, self.k, self.r) < 1:
            raise ValueError(f"conv sizes must be positive: {self}")
        if self.kind == "depthwise" and self.c_out != self.c_in:
            raise ValueError(f"depthwise conv needs c_out == c_in, got {self.c_in} -> {self.c_out}")
        if self.kind == "pointwise" and (self.k != 1 or self.r != 1):
            raise ValueError("pointwise conv needs k == 1 and r == 1")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "depthwise":
            return (self.c_in, self.k)
        return (self.c_out, self.c_in, self.k)

    @property
    def weight_count(self) -> int:
        return int(np.prod(self.weight_shape))

    @property
    def param_count(self) -> int:
        return self.weight_count + (self.c_out if self.bias else 0)

    @property
    def span(self) -> int:
        """Samples consumed by one output: ``k + (k-1)(r-1)``."""
        return self.k + (self.k - 1) * (self.r - 1)


@dataclass(frozen=True)
class LutSpec:
    q: int = 64
    a: float = 4.0
    per_channel: bool = True

    def __post_init__(self):
        if self.q < 2:
            raise ValueError(f"LUT needs q >= 2, got {self.q}")
        if not self.a > 0:
            raise ValueError(f"LUT range must be positive, got {self.a}")

    def param_count(self, channels: int) -> int:
        return self.q * channels if self.per_channel else self.q

    def identity_table(self, channels: int) -> np.ndarray:
        ramp = np.linspace(-self.a, self.a, self.q)
        return np.tile(ramp, (channels, 1)) if self.per_channel else ramp


@dataclass(frozen=True)
class NormSpec:
    kind: str = "none"
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.kind not in ("none", "channel-norm"):
            raise ValueError(f"unknown norm kind {self.kind!r}")
        if not self.epsilon > 0:
            raise ValueError("norm epsilon must be positive")

    def param_count(self, channels: int) -> int:
        return 0 if self.kind == "none" else 2 * channels


def _batched(x: np.ndarray) -> np.ndarray:
    return x[None] if x.ndim == 2 else x


def _pad_amounts(span: int, padding: str) -> tuple[int, int]:
    if padding == "none":
        return 0, 0
    total = span - 1
    return total // 2, total - total // 2


def _prepare(x: Tensor, k: int, dilation: int, padding: str, op: str):
    span = k + (k - 1) * (dilation - 1)
    left, right = _pad_amounts(span, padding)
    xb = _batched(x.data)
    if left or right:
        xb = np.pad(xb, ((0, 0), (0, 0), (left, right)))
    t_out = xb.shape[-1] - (k - 1) * dilation
    if t_out < 1:
        raise ShapeError(f"{op}: kernel span {span} wider than input length {x.shape[-1]}")
    return xb, left, right, t_out


def _bias_inputs(b) -> tuple:
    return () if b is None else (as_tensor(b),)


def conv1d(x, w, b=None, dilation: int = 1, padding: str = "none") -> Tensor:
    """Dense dilated convolution. ``w`` is ``[c_out, c_in, k]``, ``b`` is ``[c_out]``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim not in (2, 3) or w.ndim != 3 or x.shape[-2] != w.shape[1]:
        raise ShapeError(f"conv1d: input {list(x.shape)} incompatible with weight {list(w.shape)}")
    extra = _bias_inputs(b)
    if extra and extra[0].shape != (w.shape[0],):
        raise ShapeError(f"conv1d: bias {list(extra[0].shape)} does not match {w.shape[0]} output channels")
    k = w.shape[2]
    xb, left, right, t_out = _prepare(x, k, dilation, padding, "conv1d")
    t_in = xb.shape[-1]
    wd = w.data
    if k == 1:
        y = np.matmul(wd[:, :, 0], xb)
    else:
        # im2col: [B, k*c_in, t_out] against [c_out, k*c_in]
        cols = np.concatenate([xb[:, :, j * dilation:j * dilation + t_out] for j in range(k)], axis=1)
        w2 = wd.transpose(0, 2, 1).reshape(wd.shape[0], -1)
        y = np.matmul(w2, cols)
    if extra:
        y += extra[0].data[:, None]
    if x.ndim == 2:
        y = y[0]

    def backward(g):
        gb = _batched(g)
        c_in = wd.shape[1]
        if k == 1:
            gw = np.tensordot(gb, xb, axes=([0, 2], [0, 2]))[:, :, None]
            gx = np.matmul(wd[:, :, 0].T, gb)
        else:
            gw2 = np.tensordot(gb, cols, axes=([0, 2], [0, 2]))
            gw = gw2.reshape(wd.shape[0], k, c_in).transpose(0, 2, 1)
            gcols = np.matmul(w2.T, gb)
            gx = np.zeros_like(xb)
            for j in range(k):
                gx[:, :, j * dilation:j * dilation + t_out] += gcols[:, j * c_in:(j + 1) * c_in]
        if left or right:
            gx = gx[:, :, left:t_in - right]
        out = [gx[0] if x.ndim == 2 else gx, np.ascontiguousarray(gw)]
        if extra:
            out.append(gb.sum(axis=(0, 2)))
        return out

    return record("conv1d", (x, w) + extra, y, backward)


def depthwise_conv1d(x, w, b=None, dilation: int = 1, padding: str = "none") -> Tensor:
    """Per-channel dilated convolution. ``w`` is ``[c, k]``, ``b`` is ``[c]``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim not in (2, 3) or w.ndim != 2 or x.shape[-2] != w.shape[0]:
        raise ShapeError(f"depthwise_conv1d: input {list(x.shape)} incompatible with weight {list(w.shape)}")
    extra = _bias_inputs(b)
    if extra and extra[0].shape != (w.shape[0],):
        raise ShapeError(f"depthwise_conv1d: bias {list(extra[0].shape)} does not match {w.shape[0]} channels")
    k = w.shape[1]
    xb, left, right, t_out = _prepare(x, k, dilation, padding, "depthwise_conv1d")
    t_in = xb.shape[-1]
    wd = w.data
    y = xb[:, :, 0:t_out] * wd[None, :, 0:1]
    if extra:
        y += extra[0].data[:, None]
    tmp = np.empty_like(y)
    for j in range(1, k):
        np.multiply(xb[:, :, j * dilation:j * dilation + t_out], wd[None, :, j:j + 1], out=tmp)
        y += tmp
    if x.ndim == 2:
        y = y[0]

    def backward(g):
        gb = _batched(g)
        gx = np.zeros_like(xb)
        gw = np.empty_like(wd)
        for j in range(k):
            sl = slice(j * dilation, j * dilation + t_out)
            gw[:, j] = np.einsum("bct,bct->c", gb, xb[:, :, sl])
            gx[:, :, sl] += wd[None, :, j:j + 1] * gb
        if left or right:
            gx = gx[:, :, left:t_in - right]
        out = [gx[0] if x.ndim == 2 else gx, gw]
        if extra:
            out.append(gb.sum(axis=(0, 2)))
        return out

    return record("depthwise_conv1d", (x, w) + extra, y, backward)


def add_bias(x, b) -> Tensor:
    """Add a per-channel bias ``b[C]`` to ``x[..., C, T]`` (or ``x[C]``)."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1:
        raise ShapeError(f"add_bias: bias must be 1-D, got {list(b.shape)}")
    if x.ndim == 1:
        if x.shape != b.shape:
            raise ShapeError(f"add_bias: input {list(x.shape)} vs bias {list(b.shape)}")
        return ad.add(x, b)
    if x.shape[-2] != b.shape[0]:
        raise ShapeError(f"add_bias: input {list(x.shape)} has {x.shape[-2]} channels, bias has {b.shape[0]}")
    sum_axes = tuple(i for i in range(x.ndim) if i != x.ndim - 2)
    return record("add_bias", (x, b), x.data + b.data[:, None],
                  lambda g: (g, g.sum(axis=sum_axes)))


def conv1d_dilated(x, spec: ConvSpec, weight, bias=None) -> Tensor:
    """Apply one convolution described by ``spec``.

    Output length is ``T - (k-1)*r`` with ``padding="none"`` and ``T`` with
    ``"zero-symmetric"``.

    Raises:
        ShapeError: weight shape disagrees with the spec, or the kernel
            span exceeds the input with ``padding="none"``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if tuple(weight.shape) != spec.weight_shape:
        raise ShapeError(f"{spec.kind} conv: weight shape {list(weight.shape)} != expected {list(spec.weight_shape)}")
    if x.ndim < 2 or x.shape[-2] != spec.c_in:
        raise ShapeError(f"{spec.kind} conv: input {list(x.shape)} does not have {spec.c_in} channels")
    if spec.kind == "depthwise":
        return depthwise_conv1d(x, weight, bias, spec.r, spec.padding)
    return conv1d(x, weight, bias, spec.r, spec.padding)


def depthwise_separable(x, dw_spec: ConvSpec, dw_weight, dw_bias,
                        pw_spec: ConvSpec, pw_weight, pw_bias,
                        act: Callable[[Tensor], Tensor] | None = None) -> Tensor:
    """``pointwise(act(depthwise(x)))``."""
    if dw_spec.kind != "depthwise" or pw_spec.kind != "pointwise":
        raise ValueError("depthwise_separable needs a depthwise and a pointwise spec")
    x = as_tensor(x)
    if x.shape[-2] != dw_spec.c_in:
        raise ShapeError(f"depthwise_separable: input has {x.shape[-2]} channels, depthwise expects {dw_spec.c_in}")
    if pw_spec.c_in != dw_spec.c_out:
        raise ShapeError(f"depthwise_separable: pointwise c_in {pw_spec.c_in} != depthwise c_out {dw_spec.c_out}")
    h = conv1d_dilated(x, dw_spec, dw_weight, dw_bias)
    if act is not None:
        h = act(h)
    return conv1d_dilated(h, pw_spec, pw_weight, pw_bias)


def separable_weight_count(k: int, c_in: int, c_out: int) -> int:
    return k * c_in + c_in * c_out


def lut_forward(x, table, spec: LutSpec) -> Tensor:
    """Trainable piecewise-linear lookup applied elementwise.

    Inputs are clamped to ``[-a, a]`` and mapped onto ``q`` equally spaced
    knots; the output interpolates linearly between neighbouring table
    entries. With ``per_channel`` the table is ``[C, q]`` and channel ``c``
    of ``x[..., C, T]`` uses row ``c``; otherwise a single ``[q]`` table is
    shared.

    The gradient with respect to ``x`` is zero wherever ``|x| >= a``; edge
    table entries still receive gradient there.
    """
    x, table = as_tensor(x), as_tensor(table)
    q, a = spec.q, spec.a
    if spec.per_channel:
        if table.ndim != 2 or table.shape[1] != q or x.ndim < 2 or x.shape[-2] != table.shape[0]:
            raise ShapeError(f"lut: table {list(table.shape)} incompatible with input {list(x.shape)} (q={q})")
    elif table.shape != (q,):
        raise ShapeError(f"lut: shared table must have shape [{q}], got {list(table.shape)}")

    xd = x.data
    scale = (q - 1) / (2.0 * a)
    inside = np.abs(xd) < a
    u = (np.clip(xd, -a, a) + a) * scale
    idx = np.minimum(np.floor(u).astype(np.int64), q - 2)
    frac = u - idx
    if spec.per_channel:
        c = table.shape[0]
        chan = np.arange(c).reshape((c, 1))
        flat_idx = chan * q + idx
    else:
        flat_idx = idx
    tflat = table.data.reshape(-1)
    lo, hi = tflat[flat_idx], tflat[flat_idx + 1]
    y = lo + (hi - lo) * frac
    slope = np.where(inside, (hi - lo) * scale, 0.0)
    n_table = table.size

    def backward(g):
        gf = g.reshape(-1)
        fi = np.broadcast_to(flat_idx, g.shape).reshape(-1)
        fr = frac.reshape(-1)
        gt = np.bincount(fi, weights=gf * (1.0 - fr), minlength=n_table)
        gt += np.bincount(fi + 1, weights=gf * fr, minlength=n_table)[:n_table]
        return g * slope, gt.reshape(table.shape)

    return record("lut", (x, table), y, backward)


def channel_norm(x, scale, shift, epsilon: float = 1e-5) -> Tensor:
    """Normalise each channel over the time axis, then apply scale/shift."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    c = x.shape[-2]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"channel_norm: scale/shift must be [{c}], got {list(scale.shape)}/{list(shift.shape)}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + epsilon)
    xhat = xc * inv
    gam = scale.data[:, None]
    y = xhat * gam + shift.data[:, None]
    sum_axes = tuple(i for i in range(xd.ndim) if i != xd.ndim - 2)

    def backward(g):
        gxhat = g * gam
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=sum_axes), g.sum(axis=sum_axes)

    return record("channel_norm", (x, scale, shift), y, backward)


def fully_connected(x, w, b=None) -> Tensor:
    """``W x + b`` for ``x[c_in]``; time-distributed for ``x[..., c_in, T]``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2:
        raise ShapeError(f"fully_connected: weight must be 2-D, got {list(w.shape)}")
    c_out, c_in = w.shape
    if x.ndim == 1:
        if x.shape[0] != c_in:
            raise ShapeError(f"fully_connected: input {list(x.shape)} vs weight {list(w.shape)}")
        wd, xd = w.data, x.data
        y = record("fc", (x, w), wd @ xd, lambda g: (wd.T @ g, np.outer(g, xd)))
        return y if b is None else add_bias(y, b)
    if x.shape[-2] != c_in:
        raise ShapeError(f"fully_connected: input {list(x.shape)} vs weight {list(w.shape)}")
    return conv1d(x, Tensor._wrap(w.data[:, :, None], False) if not w.requires_grad else _as_kernel(w), b)


def _as_kernel(w: Tensor) -> Tensor:
    """View ``[c_out, c_in]`` as a differentiable ``[c_out, c_in, 1]`` kernel."""
    return record("as_kernel", (w,), w.data[:, :, None], lambda g: (g[:, :, 0],))


relu = ad.relu
leaky_relu = ad.leaky_relu
sigmoid = ad.sigmoid
centered_sigmoid = ad.centered_sigmoid

ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": ad.relu,
    "leaky_relu": ad.leaky_relu,
    "sigmoid": ad.sigmoid,
    "centered_sigmoid": ad.centered_sigmoid,
    "identity": lambda t: t,
}
