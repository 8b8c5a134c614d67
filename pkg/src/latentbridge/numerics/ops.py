"""Primitive tensor ops with hand-derived backward rules.

Every op validates operand shapes up front, computes the forward value,
rejects non-finite outputs, and (when a GradTape is open) records a
backward closure. Shapes are written in the docstrings as contracts,
e.g. `x (N,H,W,C)`. Mixed float32/float64 operands are promoted to
float64; that only happens inside grad_check's shadow mode.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import NonFiniteError, ShapeError, Tensor, active_tape

__all__ = [
    "matmul",
    "conv2d",
    "add",
    "sub",
    "mul",
    "scale",
    "add_bias",
    "add_rows",
    "silu",
    "tanh",
    "group_norm",
    "softmax",
    "log_softmax",
    "resize_nearest",
    "concat",
    "reshape",
    "transpose",
    "reduce_sum",
    "reduce_mean",
    "embed",
    "broadcast0",
]

_GN_EPS = 1e-5


def _result(op: str, inputs: tuple, out: np.ndarray, bwd) -> Tensor:
    # single-pass finiteness probe: any NaN/Inf element poisons the sum
    if not np.isfinite(out.sum()):
        raise NonFiniteError(f"{op}: non-finite values in output")
    t = Tensor._wrap(out)
    tape = active_tape()
    if tape is not None:
        tape.record(op, inputs, t, bwd)
    return t


def _aligned(op: str, *tensors: Tensor) -> tuple[np.ndarray, ...]:
    """Promote operands to a common float dtype (f64 wins over f32)."""
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) == 1:
        return tuple(t.data for t in tensors)
    common = np.result_type(*dtypes)
    return tuple(
        t.data if t.data.dtype == common else t.data.astype(common) for t in tensors
    )


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a (...,m,k) @ b (...,k,n) -> (...,m,n); leading dims must match exactly."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2D, got {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape {a.shape} @ {b.shape}")
    ad, bd = _aligned("matmul", a, b)
    out = np.matmul(ad, bd)

    def bwd(dout):
        da = np.matmul(dout, bd.swapaxes(-1, -2))
        db = np.matmul(ad.swapaxes(-1, -2), dout)
        return da, db

    return _result("matmul", (a, b), out, bwd)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """x (N,H,W,Cin), w (kh,kw,Cin,Cout) -> (N,Ho,Wo,Cout).

    Zero padding; the strided extent must tile exactly:
    (H + 2*padding - kh) and (W + 2*padding - kw) divisible by stride.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: need 4D input/kernel, got {x.shape}, {w.shape}")
    n, h, wid, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input channels {cin} vs kernel {w.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: bad stride/padding ({stride}, {padding})")
    hp, wp = h + 2 * padding, wid + 2 * padding
    if hp < kh or wp < kw or (hp - kh) % stride or (wp - kw) % stride:
        raise ShapeError(
            f"conv2d: kernel {w.shape[:2]} stride {stride} padding {padding} "
            f"does not tile input {x.shape}"
        )
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xd, wd = _aligned("conv2d", x, w)
    wmat = wd.reshape(kh * kw * cin, cout)

    if kh == kw == 1 and stride == 1 and padding == 0:
        # pointwise fast path: a plain GEMM over flattened positions
        mat = xd.reshape(n * h * wid, cin)
        out = (mat @ wmat).reshape(n, h, wid, cout)

        def bwd_pointwise(dout):
            dmat = dout.reshape(-1, cout)
            dx = (dmat @ wmat.T).reshape(n, h, wid, cin)
            dw = (mat.T @ dmat).reshape(kh, kw, cin, cout)
            return dx, dw

        return _result("conv2d", (x, w), out, bwd_pointwise)

    if padding:
        xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    else:
        xp = xd
    # im2col, materialized once and reused by the backward GEMMs
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))  # (N,Ho,Wo,kh,kw,Cin)
    mat = cols.reshape(n * ho * wo, kh * kw * cin)
    out = (mat @ wmat).reshape(n, ho, wo, cout)

    def bwd(dout):
        dmat = dout.reshape(-1, cout)
        dw = (mat.T @ dmat).reshape(kh, kw, cin, cout)
        dcols = (dmat @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[
                    :,
                    i : i + stride * (ho - 1) + 1 : stride,
                    j : j + stride * (wo - 1) + 1 : stride,
                    :,
                ] += dcols[:, :, :, i, j, :]
        dx = dxp[:, padding : padding + h, padding : padding + wid, :] if padding else dxp
        return dx, dw

    return _result("conv2d", (x, w), out, bwd)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a + b, identical shapes."""
    _same_shape("add", a, b)
    ad, bd = _aligned("add", a, b)
    return _result("add", (a, b), ad + bd, lambda dout: (dout, dout))


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a - b, identical shapes."""
    _same_shape("sub", a, b)
    ad, bd = _aligned("sub", a, b)
    return _result("sub", (a, b), ad - bd, lambda dout: (dout, -dout))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a * b, identical shapes."""
    _same_shape("mul", a, b)
    ad, bd = _aligned("mul", a, b)
    return _result("mul", (a, b), ad * bd, lambda dout: (dout * bd, dout * ad))


def scale(a: Tensor, s: float) -> Tensor:
    """a * s for a python scalar s (dtype preserved)."""
    s = float(s)
    return _result("scale", (a,), a.data * s, lambda dout: (dout * s,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x (...,C) + b (C,), broadcast over all leading axes."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: shape {x.shape} + {b.shape}")
    xd, bd = _aligned("add_bias", x, b)
    lead = tuple(range(x.ndim - 1))
    return _result(
        "add_bias", (x, b), xd + bd, lambda dout: (dout, dout.sum(axis=lead))
    )


def add_rows(x: Tensor, v: Tensor) -> Tensor:
    """x (N,H,W,C) + v (N,C) broadcast over the spatial axes."""
    if x.ndim != 4 or v.ndim != 2 or x.shape[0] != v.shape[0] or x.shape[3] != v.shape[1]:
        raise ShapeError(f"add_rows: shape {x.shape} + {v.shape}")
    xd, vd = _aligned("add_rows", x, v)
    out = xd + vd[:, None, None, :]
    return _result("add_rows", (x, v), out, lambda dout: (dout, dout.sum(axis=(1, 2))))


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def bwd(dout):
        return (dout * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _result("silu", (x,), out, bwd)


def tanh(x: Tensor) -> Tensor:
    """Hyperbolic tangent."""
    y = np.tanh(x.data)
    return _result("tanh", (x,), y, lambda dout: (dout * (1.0 - y * y),))


# ---------------------------------------------------------------------------
# normalization / attention
# ---------------------------------------------------------------------------


def group_norm(x: Tensor, gain: Tensor, bias: Tensor, groups: int = 8) -> Tensor:
    """Normalize x (N,H,W,C) per (sample, channel group), then scale/shift.

    gain, bias (C,). Channels must divide `groups`; callers fall back to
    groups=1 (layer norm over H,W,C) when C < 8.
    """
    if x.ndim != 4:
        raise ShapeError(f"group_norm: need (N,H,W,C), got {x.shape}")
    n, h, w, c = x.shape
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"group_norm: gain/bias {gain.shape}/{bias.shape} for C={c}")
    if groups < 1 or c % groups:
        raise ShapeError(f"group_norm: {groups} groups do not divide C={c}")
    xd, gd, bd = _aligned("group_norm", x, gain, bias)
    xg = xd.reshape(n, h, w, groups, c // groups)
    mu = xg.mean(axis=(1, 2, 4), keepdims=True)
    var = xg.var(axis=(1, 2, 4), keepdims=True)
    inv = 1.0 / np.sqrt(var + _GN_EPS)
    xhat_g = (xg - mu) * inv
    xhat = xhat_g.reshape(n, h, w, c)
    out = xhat * gd + bd

    def bwd(dout):
        dgain = (dout * xhat).sum(axis=(0, 1, 2))
        dbias = dout.sum(axis=(0, 1, 2))
        dxh = (dout * gd).reshape(n, h, w, groups, c // groups)
        m1 = dxh.mean(axis=(1, 2, 4), keepdims=True)
        m2 = (dxh * xhat_g).mean(axis=(1, 2, 4), keepdims=True)
        dx = ((dxh - m1 - xhat_g * m2) * inv).reshape(n, h, w, c)
        return dx, dgain, dbias

    return _result("group_norm", (x, gain, bias), out, bwd)


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; masked positions (mask False) get weight 0.

    mask is a boolean array broadcastable to x.shape; it is data, not a
    differentiable input. Every row must keep at least one position.
    """
    xd = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        if not mask.any(axis=-1).all():
            raise ShapeError("softmax: some rows are fully masked")
        xd = np.where(mask, xd, np.asarray(-1e30, dtype=xd.dtype))
    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(dout):
        s = (dout * y).sum(axis=-1, keepdims=True)
        return (y * (dout - s),)

    return _result("softmax", (x,), y, bwd)


def log_softmax(x: Tensor) -> Tensor:
    """log(softmax(x)) over the last axis, computed stably."""
    m = x.data.max(axis=-1, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def bwd(dout):
        return (dout - np.exp(y) * dout.sum(axis=-1, keepdims=True),)

    return _result("log_softmax", (x,), y, bwd)


# ---------------------------------------------------------------------------
# shape / gather ops
# ---------------------------------------------------------------------------


def resize_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor upsample of x (N,H,W,C) by an integer factor."""
    if x.ndim != 4:
        raise ShapeError(f"resize_nearest: need (N,H,W,C), got {x.shape}")
    if factor < 1:
        raise ShapeError(f"resize_nearest: factor {factor} < 1")
    n, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def bwd(dout):
        return (dout.reshape(n, h, factor, w, factor, c).sum(axis=(2, 4)),)

    return _result("resize_nearest", (x,), out, bwd)


def concat(parts, axis: int) -> Tensor:
    """Concatenate tensors along `axis`; all other dims must agree."""
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat: no inputs")
    ref = list(parts[0].shape)
    for p in parts[1:]:
        s = list(p.shape)
        s[axis] = ref[axis]
        if s != ref:
            raise ShapeError(f"concat: shape {p.shape} vs {parts[0].shape} on axis {axis}")
    arrays = _aligned("concat", *parts)
    out = np.concatenate(arrays, axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(dout):
        return tuple(np.ascontiguousarray(g) for g in np.split(dout, splits, axis=axis))

    return _result("concat", parts, out, bwd)


def reshape(x: Tensor, shape) -> Tensor:
    """Row-major reshape; element count must be preserved."""
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size and -1 not in shape:
        raise ShapeError(f"reshape: {x.shape} -> {shape}")
    out = x.data.reshape(shape)
    in_shape = x.shape
    return _result("reshape", (x,), out, lambda dout: (dout.reshape(in_shape),))


def transpose(x: Tensor, axes) -> Tensor:
    """Permute axes (materialized row-major)."""
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _result(
        "transpose", (x,), out, lambda dout: (np.ascontiguousarray(dout.transpose(inv)),)
    )


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def _expand(dout: np.ndarray, shape: tuple, axes: tuple[int, ...]) -> np.ndarray:
    for a in axes:
        dout = np.expand_dims(dout, a)
    return np.broadcast_to(dout, shape)


def reduce_sum(x: Tensor, axes=None) -> Tensor:
    """Sum over `axes` (all axes when None); reduced axes are squeezed."""
    axes = _norm_axes(axes, x.ndim)
    out = x.data.sum(axis=axes)
    shape = x.shape
    return _result(
        "reduce_sum", (x,), np.asarray(out), lambda dout: (_expand(dout, shape, axes) * 1.0,)
    )


def reduce_mean(x: Tensor, axes=None) -> Tensor:
    """Mean over `axes` (all axes when None); reduced axes are squeezed."""
    axes = _norm_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes], dtype=np.int64))
    out = x.data.mean(axis=axes)
    shape = x.shape
    return _result(
        "reduce_mean",
        (x,),
        np.asarray(out),
        lambda dout: (_expand(dout, shape, axes) / count,),
    )


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows: table (V,d), ids int (...,) -> (...,d).

    ids are data (non-differentiable); the backward scatters into the table.
    """
    if table.ndim != 2:
        raise ShapeError(f"embed: table must be (V,d), got {table.shape}")
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embed: ids must be integers")
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise ShapeError(f"embed: id out of range [0,{v}) in {ids.ravel()[:8]}...")
    out = table.data[ids]
    d = table.shape[1]

    def bwd(dout):
        dtab = np.zeros_like(table.data)
        np.add.at(dtab, ids.reshape(-1), dout.reshape(-1, d))
        return (dtab,)

    return _result("embed", (table,), out, bwd)


def broadcast0(x: Tensor, n: int) -> Tensor:
    """Tile x along a new leading axis of length n."""
    if n < 1:
        raise ShapeError(f"broadcast0: n={n}")
    out = np.ascontiguousarray(np.broadcast_to(x.data, (n,) + x.shape))
    return _result("broadcast0", (x,), out, lambda dout: (dout.sum(axis=0),))
