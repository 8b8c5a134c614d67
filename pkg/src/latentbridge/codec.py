"""Latent autoencoder pair: pixel space <-> downsampled latent space.

A plain deterministic autoencoder (no KL term, no sampling at encode):
the translation pipeline never uses encoder stochasticity, and a
deterministic encoder keeps cycle-consistency checks exact. The encoder
output passes through tanh so latents live in (-1, 1), image-like
statistics for the diffusion process.

The encoder is a patchify stack: one stride-4 conv whose window equals
its stride, followed by pointwise convs, and no normalization. Its
receptive field is therefore exactly one patch per latent cell, and a
pixel edit moves only the latent cells it maps to - group statistics or
overlapping windows would couple distant cells. The decoder (which has
no locality obligation) mixes neighbors with 3x3 convs and group norm.

The decoder upsamples progressively (nearest resize + conv) and each
post-resize conv also sees a few fixed positional channels (pixel-parity
and short-period sinusoids of the row index). Convs alone cannot tell a
pixel's position inside an upsampled block, so without these channels
sub-block detail and short-period textures decode to their block
average.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .numerics import AdamState, adam_step, ops
from .numerics.tensor import GradTape, ShapeError, Tensor, backward

__all__ = ["CodecConfig", "Codec", "CodecTrainReport", "train_codec"]

_N_POS = 6  # positional channels appended after each decoder resize
_POS_CACHE: dict[tuple, np.ndarray] = {}


def _positional_channels(h: int, w: int) -> np.ndarray:
    """(h, w, 6): row/col parity and period-3/4 sinusoids of the row index."""
    key = (h, w)
    if key not in _POS_CACHE:
        y = np.arange(h, dtype=np.float64)[:, None] * np.ones((1, w))
        x = np.arange(w, dtype=np.float64)[None, :] * np.ones((h, 1))
        ch = np.stack(
            [
                y % 2 - 0.5,
                x % 2 - 0.5,
                np.sin(2 * np.pi * y / 3.0),
                np.cos(2 * np.pi * y / 3.0),
                np.sin(2 * np.pi * y / 4.0),
                np.cos(2 * np.pi * y / 4.0),
            ],
            axis=-1,
        ).astype(np.float32)
        ch.flags.writeable = False
        _POS_CACHE[key] = ch
    return _POS_CACHE[key]


@dataclass(frozen=True)
class CodecConfig:
    factor: int = 4  # 4 for 32x32 toy images; 8 matches the large-image preset
    latent_channels: int = 4
    width: int = 32

    def __post_init__(self):
        if self.factor not in (4, 8):
            raise ShapeError(f"codec factor must be 4 or 8, got {self.factor}")


class Codec:
    """Encoder/decoder pair over {name: Tensor} parameters."""

    PREFIX = "codec."

    def __init__(self, config: CodecConfig, params: dict[str, Tensor] | None = None, rng=None):
        self.config = config
        if params is not None:
            self.params = dict(params)
        else:
            if rng is None:
                rng = np.random.default_rng(0)
            self.params = self._build(rng)

    def _build(self, rng) -> dict[str, Tensor]:
        c = self.config
        w, w2 = c.width, 2 * c.width
        p: dict[str, Tensor] = {}
        nn.add_conv(p, rng, "enc.c1", 4, 4, 3, w2)
        if c.factor == 8:
            nn.add_conv(p, rng, "enc.c1b", 2, 2, w2, w2)
        nn.add_conv(p, rng, "enc.c2", 1, 1, w2, w2)
        nn.add_conv(p, rng, "enc.c3", 1, 1, w2, w2)
        nn.add_conv(p, rng, "enc.c4", 1, 1, w2, c.latent_channels)

        nn.add_conv(p, rng, "dec.c1", 1, 1, c.latent_channels, w2)
        nn.add_norm_params(p, "dec.n1", w2)
        nn.add_conv(p, rng, "dec.c2", 3, 3, w2, w2)
        nn.add_norm_params(p, "dec.n2", w2)
        if c.factor == 8:
            nn.add_conv(p, rng, "dec.c2b", 3, 3, w2, w2)
            nn.add_norm_params(p, "dec.n2b", w2)
        nn.add_conv(p, rng, "dec.c3", 1, 1, w2, w)
        nn.add_norm_params(p, "dec.n3", w)
        nn.add_conv(p, rng, "dec.c4", 3, 3, w + _N_POS, w)
        nn.add_norm_params(p, "dec.n4", w)
        nn.add_conv(p, rng, "dec.c5", 1, 1, w, w // 2)
        nn.add_norm_params(p, "dec.n5", w // 2)
        nn.add_conv(p, rng, "dec.c6", 3, 3, w // 2 + _N_POS, w // 2)
        nn.add_norm_params(p, "dec.n6", w // 2)
        nn.add_conv(p, rng, "dec.c7", 3, 3, w // 2, 3)
        return p

    # -- forward ------------------------------------------------------------

    def _encode_t(self, x: Tensor) -> Tensor:
        p = self.params
        h = ops.silu(nn.apply_conv(p, "enc.c1", x, stride=4))
        if self.config.factor == 8:
            h = ops.silu(nn.apply_conv(p, "enc.c1b", h, stride=2))
        h = ops.silu(nn.apply_conv(p, "enc.c2", h))
        h = ops.silu(nn.apply_conv(p, "enc.c3", h))
        return ops.tanh(nn.apply_conv(p, "enc.c4", h))

    def _decode_t(self, z: Tensor) -> Tensor:
        p = self.params
        h = ops.silu(nn.apply_norm(p, "dec.n1", nn.apply_conv(p, "dec.c1", z)))
        h = ops.silu(nn.apply_norm(p, "dec.n2", nn.apply_conv(p, "dec.c2", h, padding=1)))
        if self.config.factor == 8:
            h = ops.resize_nearest(h, 2)
            h = ops.silu(nn.apply_norm(p, "dec.n2b", nn.apply_conv(p, "dec.c2b", h, padding=1)))
        h = ops.silu(nn.apply_norm(p, "dec.n3", nn.apply_conv(p, "dec.c3", h)))
        h = self._with_pos(ops.resize_nearest(h, 2))
        h = ops.silu(nn.apply_norm(p, "dec.n4", nn.apply_conv(p, "dec.c4", h, padding=1)))
        h = ops.silu(nn.apply_norm(p, "dec.n5", nn.apply_conv(p, "dec.c5", h)))
        h = self._with_pos(ops.resize_nearest(h, 2))
        h = ops.silu(nn.apply_norm(p, "dec.n6", nn.apply_conv(p, "dec.c6", h, padding=1)))
        return ops.tanh(nn.apply_conv(p, "dec.c7", h, padding=1))

    @staticmethod
    def _with_pos(h: Tensor) -> Tensor:
        n, hh, ww, _ = h.shape
        pos = np.broadcast_to(_positional_channels(hh, ww), (n, hh, ww, _N_POS))
        return ops.concat((h, Tensor._wrap(np.ascontiguousarray(pos))), axis=3)

    def encode(self, x: Tensor) -> Tensor:
        """Image tensor in [-1,1], spatial dims divisible by the factor -> latent."""
        xb, squeeze = nn.ensure_batched(x, "encode")
        n, h, w, c = xb.shape
        f = self.config.factor
        if c != 3 or h % f or w % f:
            raise ShapeError(f"encode: need (..,{f}k,{f}k,3), got {x.shape}")
        lo, hi = float(xb.data.min()), float(xb.data.max())
        if lo < -1.0001 or hi > 1.0001:
            raise ShapeError(f"encode: values outside [-1,1] (min {lo:.3f}, max {hi:.3f})")
        z = self._encode_t(xb)
        return ops.reshape(z, z.shape[1:]) if squeeze else z

    def decode(self, z: Tensor) -> Tensor:
        """Latent -> image tensor in [-1,1] with shape (.., H, W, 3)."""
        zb, squeeze = nn.ensure_batched(z, "decode")
        if zb.shape[-1] != self.config.latent_channels:
            raise ShapeError(
                f"decode: latent channels {zb.shape[-1]} != {self.config.latent_channels}"
            )
        x = self._decode_t(zb)
        return ops.reshape(x, x.shape[1:]) if squeeze else x

    # -- persistence ----------------------------------------------------------

    def named_tensors(self) -> dict[str, Tensor]:
        return {self.PREFIX + k: v for k, v in self.params.items()}

    @classmethod
    def from_arrays(cls, config: CodecConfig, arrays: dict[str, np.ndarray]) -> "Codec":
        params = {
            k[len(cls.PREFIX) :]: Tensor(v, trainable=True)
            for k, v in arrays.items()
            if k.startswith(cls.PREFIX)
        }
        if not params:
            raise ShapeError("no codec.* tensors in checkpoint")
        return cls(config, params=params)


@dataclass
class CodecTrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    holdout_mse: float = float("nan")
    holdout_mae: float = float("nan")


def train_codec(
    images: np.ndarray,
    epochs: int,
    lr: float,
    seed: int,
    config: CodecConfig | None = None,
    batch_size: int = 64,
    holdout: np.ndarray | None = None,
) -> tuple[Codec, CodecTrainReport]:
    """Train the autoencoder with pixel MSE. Deterministic given seed.

    When no holdout set is passed, the last 10% of a seeded shuffle is
    held out for the reconstruction report.
    """
    if images.ndim != 4 or images.shape[0] == 0:
        raise ShapeError(f"train_codec: empty or malformed dataset {images.shape}")
    config = config or CodecConfig()
    rng = np.random.default_rng(seed)
    codec = Codec(config, rng=rng)

    if holdout is None:
        perm = rng.permutation(images.shape[0])
        n_hold = max(1, images.shape[0] // 10)
        holdout = images[perm[-n_hold:]]
        images = images[perm[:-n_hold]]

    state = AdamState.init(codec.params)
    report = CodecTrainReport()
    n = images.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            xb = Tensor(images[order[start : start + batch_size]])
            with GradTape() as tape:
                recon = codec._decode_t(codec._encode_t(xb))
                diff = ops.sub(recon, xb)
                loss = ops.reduce_mean(ops.mul(diff, diff))
            grads = backward(tape, loss, codec.params)
            codec.params, state = adam_step(codec.params, grads, state, lr)
            losses.append(loss.item())
        report.epoch_losses.append(float(np.mean(losses)))

    errs = []
    for start in range(0, holdout.shape[0], batch_size):
        xb = Tensor(holdout[start : start + batch_size])
        recon = codec._decode_t(codec._encode_t(xb))
        errs.append(recon.data - xb.data)
    err = np.concatenate(errs, axis=0)
    report.holdout_mse = float(np.mean(err**2))
    report.holdout_mae = float(np.mean(np.abs(err)))
    return codec, report
