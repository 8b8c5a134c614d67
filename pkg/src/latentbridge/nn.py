"""Shared network building blocks: initializers, norm helpers, time features.

Models keep their weights in a flat {name: Tensor} dict; the helpers here
create entries and apply common layer patterns on top of the primitive ops.
"""

from __future__ import annotations

import numpy as np

from .numerics import ops
from .numerics.tensor import ShapeError, Tensor

GN_GROUPS = 8


def ensure_batched(x: Tensor, what: str) -> tuple[Tensor, bool]:
    """Promote (H,W,C) to (1,H,W,C); returns (tensor, was_unbatched)."""
    if x.ndim == 3:
        return ops.reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"{what}: need (H,W,C) or (N,H,W,C), got {x.shape}")
    return x, False


def conv_init(rng: np.random.Generator, kh: int, kw: int, cin: int, cout: int) -> Tensor:
    """He-normal conv kernel (kh,kw,cin,cout)."""
    std = float(np.sqrt(2.0 / (kh * kw * cin)))
    return Tensor(rng.normal(0.0, std, (kh, kw, cin, cout)), trainable=True)


def dense_init(rng: np.random.Generator, nin: int, nout: int) -> Tensor:
    """He-normal dense matrix (nin,nout)."""
    std = float(np.sqrt(2.0 / nin))
    return Tensor(rng.normal(0.0, std, (nin, nout)), trainable=True)


def zeros_param(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), trainable=True)


def ones_param(*shape: int) -> Tensor:
    return Tensor(np.ones(shape), trainable=True)


def norm_groups(channels: int) -> int:
    """8 groups, falling back to layer norm (1 group) when channels < 8."""
    if channels < GN_GROUPS or channels % GN_GROUPS:
        return 1
    return GN_GROUPS


def add_norm_params(params: dict[str, Tensor], name: str, channels: int) -> None:
    params[f"{name}.g"] = ones_param(channels)
    params[f"{name}.b"] = zeros_param(channels)


def apply_norm(params: dict[str, Tensor], name: str, x: Tensor) -> Tensor:
    c = x.shape[-1]
    return ops.group_norm(x, params[f"{name}.g"], params[f"{name}.b"], norm_groups(c))


def add_conv(
    params: dict[str, Tensor],
    rng: np.random.Generator,
    name: str,
    kh: int,
    kw: int,
    cin: int,
    cout: int,
    zero: bool = False,
) -> None:
    params[f"{name}.w"] = (
        Tensor(np.zeros((kh, kw, cin, cout)), trainable=True)
        if zero
        else conv_init(rng, kh, kw, cin, cout)
    )
    params[f"{name}.b"] = zeros_param(cout)


def apply_conv(
    params: dict[str, Tensor], name: str, x: Tensor, stride: int = 1, padding: int = 0
) -> Tensor:
    h = ops.conv2d(x, params[f"{name}.w"], stride=stride, padding=padding)
    return ops.add_bias(h, params[f"{name}.b"])


def add_dense(
    params: dict[str, Tensor],
    rng: np.random.Generator,
    name: str,
    nin: int,
    nout: int,
    zero: bool = False,
) -> None:
    params[f"{name}.w"] = (
        Tensor(np.zeros((nin, nout)), trainable=True) if zero else dense_init(rng, nin, nout)
    )
    params[f"{name}.b"] = zeros_param(nout)


def apply_dense(params: dict[str, Tensor], name: str, x: Tensor) -> Tensor:
    return ops.add_bias(ops.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def sinusoidal_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features of diffusion time t; accepts scalars or (N,) arrays.

    Returns float32 (N, dim). Works for fractional t, which keeps refined
    step grids smooth.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb.astype(np.float32)
