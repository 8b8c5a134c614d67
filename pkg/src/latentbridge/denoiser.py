"""Conditional noise-prediction UNet with cross-attention over prompt tokens.

The condition side is a tiny fixed vocabulary rather than a learned text
encoder: a null token (for unconditional prediction), a pad token, the
template words, and one token per class. Prompt templates map to token
sequences, so the prompt ablations are an enum rather than free text.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .codec import Codec
from .numerics import AdamState, adam_step, ops
from .numerics.tensor import GradTape, ShapeError, Tensor, backward
from .schedule import NoiseSchedule

__all__ = [
    "Vocabulary",
    "VocabError",
    "TEMPLATES",
    "CLASS_TEMPLATES",
    "template_tokens",
    "ConditionEmbedding",
    "DenoiserConfig",
    "Denoiser",
    "DenoiserTrainReport",
    "train_denoiser",
]

NULL_TOKEN = "<null>"
PAD_TOKEN = "<pad>"

TEMPLATES = ("head_of_class", "generic", "class_only", "class_head")
# templates that carry the class token (usable as training conditions)
CLASS_TEMPLATES = ("head_of_class", "class_only", "class_head")


class VocabError(ValueError):
    """Unknown token or malformed vocabulary."""


def template_tokens(template: str, class_name: str | None = None) -> tuple[str, ...]:
    """Token sequence for a prompt template id."""
    if template == "generic":
        return ("photo", "head")
    if class_name is None:
        raise VocabError(f"template {template!r} needs a class name")
    if template == "head_of_class":
        return ("photo", "head", class_name)
    if template == "class_only":
        return (class_name,)
    if template == "class_head":
        return (class_name, "head")
    raise VocabError(f"unknown template {template!r}")


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token list; ids are positions. tokens[0]/tokens[1] are null/pad."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(self.tokens) < 3 or self.tokens[0] != NULL_TOKEN or self.tokens[1] != PAD_TOKEN:
            raise VocabError(f"vocabulary must start with ({NULL_TOKEN}, {PAD_TOKEN})")
        if len(set(self.tokens)) != len(self.tokens):
            raise VocabError("duplicate tokens in vocabulary")

    @classmethod
    def for_classes(cls, class_names: Sequence[str]) -> "Vocabulary":
        return cls((NULL_TOKEN, PAD_TOKEN, "photo", "head", "skull", *class_names))

    @property
    def null_id(self) -> int:
        return 0

    @property
    def pad_id(self) -> int:
        return 1

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise VocabError(f"unknown token {token!r}") from None

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.id(t) for t in tokens]


@dataclass
class ConditionEmbedding:
    """Token embeddings (..., M, d) with an attention mask over the M slots."""

    emb: Tensor
    mask: np.ndarray
    is_unconditional: bool = False


@dataclass(frozen=True)
class DenoiserConfig:
    vocab: tuple[str, ...]
    latent_channels: int = 4
    base_width: int = 32
    temb_dim: int = 128
    cond_dim: int = 64
    cond_len: int = 8
    heads: int = 4
    time_max: int = 100

    def __post_init__(self):
        if (2 * self.base_width) % self.heads:
            raise ShapeError("attention width must divide heads")


class Denoiser:
    """UNet predicting the noise component of a noisy latent.

    Two resolution levels (channel multipliers 1 and 2), two residual
    blocks per level on each path, one cross-attention block at the end
    of the lowest-resolution down path and one in the bottleneck.
    """

    PREFIX = "denoiser."

    def __init__(self, config: DenoiserConfig, params: dict[str, Tensor] | None = None, rng=None):
        self.config = config
        self.vocab = Vocabulary(tuple(config.vocab))
        if params is not None:
            self.params = dict(params)
        else:
            if rng is None:
                rng = np.random.default_rng(0)
            self.params = self._build(rng)

    # -- parameter construction ---------------------------------------------

    def _add_resblock(self, p, rng, name, cin, cout):
        nn.add_norm_params(p, f"{name}.n1", cin)
        nn.add_conv(p, rng, f"{name}.c1", 3, 3, cin, cout)
        nn.add_dense(p, rng, f"{name}.t", self.config.temb_dim, cout)
        nn.add_norm_params(p, f"{name}.n2", cout)
        nn.add_conv(p, rng, f"{name}.c2", 3, 3, cout, cout, zero=True)
        if cin != cout:
            nn.add_conv(p, rng, f"{name}.sc", 1, 1, cin, cout)

    def _add_attn(self, p, rng, name, channels):
        nn.add_norm_params(p, f"{name}.n", channels)
        nn.add_dense(p, rng, f"{name}.q", channels, channels)
        nn.add_dense(p, rng, f"{name}.k", self.config.cond_dim, channels)
        nn.add_dense(p, rng, f"{name}.v", self.config.cond_dim, channels)
        nn.add_dense(p, rng, f"{name}.o", channels, channels, zero=True)

    def _build(self, rng) -> dict[str, Tensor]:
        c = self.config
        w1, w2 = c.base_width, 2 * c.base_width
        p: dict[str, Tensor] = {}
        p["emb.table"] = Tensor(
            rng.normal(0.0, 0.1, (len(c.vocab), c.cond_dim)), trainable=True
        )
        nn.add_dense(p, rng, "tmlp1", c.temb_dim, c.temb_dim)
        nn.add_dense(p, rng, "tmlp2", c.temb_dim, c.temb_dim)
        nn.add_conv(p, rng, "in", 3, 3, c.latent_channels, w1)
        self._add_resblock(p, rng, "d0a", w1, w1)
        self._add_resblock(p, rng, "d0b", w1, w1)
        nn.add_conv(p, rng, "down", 4, 4, w1, w2)
        self._add_resblock(p, rng, "d1a", w2, w2)
        self._add_resblock(p, rng, "d1b", w2, w2)
        self._add_attn(p, rng, "attn_d", w2)
        self._add_resblock(p, rng, "ma", w2, w2)
        self._add_attn(p, rng, "attn_m", w2)
        self._add_resblock(p, rng, "mb", w2, w2)
        self._add_resblock(p, rng, "u1a", 2 * w2, w2)
        self._add_resblock(p, rng, "u1b", 2 * w2, w2)
        nn.add_conv(p, rng, "up", 3, 3, w2, w1)
        self._add_resblock(p, rng, "u0a", 2 * w1, w1)
        self._add_resblock(p, rng, "u0b", 2 * w1, w1)
        nn.add_norm_params(p, "out.n", w1)
        nn.add_conv(p, rng, "out", 3, 3, w1, c.latent_channels, zero=True)
        return p

    # -- condition embedding --------------------------------------------------

    def _pad_ids(self, token_ids: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        m = self.config.cond_len
        ids = list(token_ids)
        if not ids:
            raise VocabError("empty token sequence")
        if len(ids) > m:
            raise VocabError(f"sequence length {len(ids)} exceeds {m}")
        v = len(self.vocab)
        for i in ids:
            if not (0 <= int(i) < v):
                raise VocabError(f"unknown token id {i}")
        mask = np.zeros(m, dtype=bool)
        mask[: len(ids)] = True
        padded = np.full(m, self.vocab.pad_id, dtype=np.int64)
        padded[: len(ids)] = ids
        return padded, mask

    def embed_condition(self, token_ids: Sequence[int]) -> ConditionEmbedding:
        """Token ids -> (M, d) embedding matrix with padding masked out."""
        ids, mask = self._pad_ids(token_ids)
        emb = ops.embed(self.params["emb.table"], ids)
        uncond = list(token_ids) == [self.vocab.null_id]
        return ConditionEmbedding(emb=emb, mask=mask, is_unconditional=uncond)

    def embed_condition_batch(self, sequences: Sequence[Sequence[int]]) -> ConditionEmbedding:
        """Stack of sequences -> (N, M, d) embeddings."""
        ids = []
        masks = []
        for seq in sequences:
            i, m = self._pad_ids(seq)
            ids.append(i)
            masks.append(m)
        emb = ops.embed(self.params["emb.table"], np.stack(ids))
        return ConditionEmbedding(emb=emb, mask=np.stack(masks), is_unconditional=False)

    def unconditional(self) -> ConditionEmbedding:
        return self.embed_condition([self.vocab.null_id])

    def condition_for(self, template: str, class_name: str | None = None) -> ConditionEmbedding:
        return self.embed_condition(self.vocab.encode(template_tokens(template, class_name)))

    # -- forward ------------------------------------------------------------

    def _resblock(self, name, x, temb):
        p = self.params
        h = ops.silu(nn.apply_norm(p, f"{name}.n1", x))
        h = nn.apply_conv(p, f"{name}.c1", h, padding=1)
        h = ops.add_rows(h, nn.apply_dense(p, f"{name}.t", temb))
        h = ops.silu(nn.apply_norm(p, f"{name}.n2", h))
        h = nn.apply_conv(p, f"{name}.c2", h, padding=1)
        if f"{name}.sc.w" in p:
            x = nn.apply_conv(p, f"{name}.sc", x)
        return ops.add(h, x)

    def _attn(self, name, x, cond_emb, mask, sink=None):
        p = self.params
        n, hh, ww, c = x.shape
        heads = self.config.heads
        dh = c // heads
        m = cond_emb.shape[1]
        hn = nn.apply_norm(p, f"{name}.n", x)
        q = nn.apply_dense(p, f"{name}.q", ops.reshape(hn, (n * hh * ww, c)))
        q = ops.transpose(ops.reshape(q, (n, hh * ww, heads, dh)), (0, 2, 1, 3))
        flat_cond = ops.reshape(cond_emb, (n * m, cond_emb.shape[2]))
        k = ops.transpose(
            ops.reshape(nn.apply_dense(p, f"{name}.k", flat_cond), (n, m, heads, dh)),
            (0, 2, 1, 3),
        )
        v = ops.transpose(
            ops.reshape(nn.apply_dense(p, f"{name}.v", flat_cond), (n, m, heads, dh)),
            (0, 2, 1, 3),
        )
        scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), dh**-0.5)
        attn = ops.softmax(scores, mask=mask[:, None, None, :])
        if sink is not None:
            sink.append(attn.data)
        ctx = ops.matmul(attn, v)
        ctx = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (n * hh * ww, c))
        ctx = nn.apply_dense(p, f"{name}.o", ctx)
        return ops.add(x, ops.reshape(ctx, (n, hh, ww, c)))

    def predict_noise(self, z_t: Tensor, t, cond: ConditionEmbedding, attn_sink=None) -> Tensor:
        """Noisy latent (.., h, w, c) at time t plus condition -> predicted noise.

        t may be a scalar or an (N,) array; fractional times are accepted
        for refined step grids, but must stay in (0, T].
        """
        zb, squeeze = nn.ensure_batched(z_t, "predict_noise")
        n = zb.shape[0]
        if zb.shape[-1] != self.config.latent_channels:
            raise ShapeError(
                f"predict_noise: latent channels {zb.shape[-1]} != "
                f"{self.config.latent_channels}"
            )
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        if (t_arr <= 0).any() or (t_arr > self.config.time_max).any():
            raise ShapeError(
                f"predict_noise: t outside (0, {self.config.time_max}]: {t_arr[:4]}"
            )

        emb = cond.emb
        mask = cond.mask
        if emb.ndim == 2:
            emb = ops.broadcast0(emb, n)
            mask = np.broadcast_to(mask, (n,) + mask.shape)
        if emb.shape[0] != n or mask.shape != emb.shape[:2]:
            raise ShapeError(
                f"predict_noise: condition {emb.shape}/{mask.shape} for batch {n}"
            )

        p = self.params
        sinus = Tensor(nn.sinusoidal_embedding(t_arr, self.config.temb_dim))
        temb = ops.silu(nn.apply_dense(p, "tmlp1", sinus))
        temb = ops.silu(nn.apply_dense(p, "tmlp2", temb))

        h0 = nn.apply_conv(p, "in", zb, padding=1)
        h1 = self._resblock("d0a", h0, temb)
        h2 = self._resblock("d0b", h1, temb)
        d = nn.apply_conv(p, "down", h2, stride=2, padding=1)
        h3 = self._resblock("d1a", d, temb)
        h4 = self._resblock("d1b", h3, temb)
        h4 = self._attn("attn_d", h4, emb, mask, sink=attn_sink)
        mid = self._resblock("ma", h4, temb)
        mid = self._attn("attn_m", mid, emb, mask, sink=attn_sink)
        mid = self._resblock("mb", mid, temb)
        u = self._resblock("u1a", ops.concat((mid, h4), axis=3), temb)
        u = self._resblock("u1b", ops.concat((u, h3), axis=3), temb)
        u = nn.apply_conv(p, "up", ops.resize_nearest(u, 2), padding=1)
        u = self._resblock("u0a", ops.concat((u, h2), axis=3), temb)
        u = self._resblock("u0b", ops.concat((u, h1), axis=3), temb)
        out = nn.apply_conv(p, "out", ops.silu(nn.apply_norm(p, "out.n", u)), padding=1)
        return ops.reshape(out, out.shape[1:]) if squeeze else out

    # -- persistence ----------------------------------------------------------

    def named_tensors(self) -> dict[str, Tensor]:
        return {self.PREFIX + k: v for k, v in self.params.items()}

    @classmethod
    def from_arrays(cls, config: DenoiserConfig, arrays: dict[str, np.ndarray]) -> "Denoiser":
        params = {
            k[len(cls.PREFIX) :]: Tensor(v, trainable=True)
            for k, v in arrays.items()
            if k.startswith(cls.PREFIX)
        }
        if not params:
            raise ShapeError("no denoiser.* tensors in checkpoint")
        return cls(config, params=params)


@dataclass
class DenoiserTrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    val_mse_true: float = float("nan")
    val_mse_wrong: float = float("nan")


def train_denoiser(
    images: np.ndarray,
    labels: np.ndarray,
    class_names: Sequence[str],
    codec: Codec,
    sched: NoiseSchedule,
    epochs: int,
    lr: float,
    cond_dropout: float,
    seed: int,
    batch_size: int = 64,
    config: DenoiserConfig | None = None,
    templates: Sequence[str] = CLASS_TEMPLATES,
    ema_decay: float = 0.995,
) -> tuple[Denoiser, DenoiserTrainReport]:
    """Train noise prediction on encoded target-domain images.

    Each example gets a random class-bearing template; with probability
    cond_dropout the whole sequence collapses to the null token so the
    model also learns the unconditional branch (required for guidance).
    The learning rate follows a half-cosine down to 10% and the returned
    weights are an exponential moving average (the smoother averaged
    model is what sampling and inversion quality depend on).
    Deterministic given seed.
    """
    if images.ndim != 4 or images.shape[0] == 0:
        raise ShapeError(f"train_denoiser: empty or malformed dataset {images.shape}")
    if codec is None:
        raise ShapeError("train_denoiser: codec required")
    if not (0.0 <= cond_dropout < 1.0):
        raise ShapeError(f"cond_dropout must be in [0,1), got {cond_dropout}")
    rng = np.random.default_rng(seed)
    if config is None:
        config = DenoiserConfig(
            vocab=Vocabulary.for_classes(class_names).tokens,
            latent_channels=codec.config.latent_channels,
            time_max=sched.steps,
        )
    model = Denoiser(config, rng=rng)
    vocab = model.vocab

    latents = encode_dataset(codec, images)
    n = latents.shape[0]
    labels = np.asarray(labels)
    token_seqs = {
        (tpl, cid): vocab.encode(template_tokens(tpl, class_names[cid]))
        for tpl in templates
        for cid in range(len(class_names))
    }
    null_seq = [vocab.null_id]

    sab = np.sqrt(sched.alpha_bar).astype(np.float32)
    somab = np.sqrt(1.0 - sched.alpha_bar).astype(np.float32)

    state = AdamState.init(model.params)
    ema = {k: p.data.copy() for k, p in model.params.items()}
    report = DenoiserTrainReport()
    total_steps = max(1, epochs * ((n + batch_size - 1) // batch_size))
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            b = idx.size
            z0 = latents[idx]
            t = rng.integers(1, sched.steps + 1, size=b)
            eps = rng.standard_normal(z0.shape, dtype=np.float32)
            z_t = sab[t, None, None, None] * z0 + somab[t, None, None, None] * eps
            tpl_pick = rng.integers(0, len(templates), size=b)
            drop = rng.random(b) < cond_dropout
            seqs = [
                null_seq if drop[i] else token_seqs[(templates[tpl_pick[i]], int(labels[idx[i]]))]
                for i in range(b)
            ]
            with GradTape() as tape:
                cond = model.embed_condition_batch(seqs)
                pred = model.predict_noise(Tensor(z_t), t.astype(np.float64), cond)
                diff = ops.sub(pred, Tensor(eps))
                loss = ops.reduce_mean(ops.mul(diff, diff))
            grads = backward(tape, loss, model.params)
            cur_lr = lr * (0.55 + 0.45 * float(np.cos(np.pi * step / total_steps)))
            model.params, state = adam_step(model.params, grads, state, cur_lr)
            for k, p in model.params.items():
                ema[k] = ema_decay * ema[k] + (1.0 - ema_decay) * p.data
            step += 1
            losses.append(loss.item())
        report.epoch_losses.append(float(np.mean(losses)))
    model.params = {k: Tensor(v, trainable=True) for k, v in ema.items()}

    report.val_mse_true, report.val_mse_wrong = _condition_separation(
        model, latents, labels, class_names, sched, rng
    )
    return model, report


def encode_dataset(codec: Codec, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Encode an image stack to latents in batches (no tape)."""
    outs = [
        codec.encode(Tensor(images[s : s + batch_size])).data
        for s in range(0, images.shape[0], batch_size)
    ]
    return np.concatenate(outs, axis=0)


def _condition_separation(model, latents, labels, class_names, sched, rng, n_eval=256):
    """Mean noise-prediction MSE with the true vs a mismatched class condition."""
    n = min(n_eval, latents.shape[0])
    idx = rng.choice(latents.shape[0], size=n, replace=False)
    t = rng.integers(1, sched.steps + 1, size=n)
    eps = rng.standard_normal(latents[idx].shape, dtype=np.float32)
    sab = np.sqrt(sched.alpha_bar).astype(np.float32)
    somab = np.sqrt(1.0 - sched.alpha_bar).astype(np.float32)
    z_t = sab[t, None, None, None] * latents[idx] + somab[t, None, None, None] * eps
    k = len(class_names)
    true_ids = labels[idx].astype(int)
    wrong_ids = (true_ids + 1 + rng.integers(0, k - 1, size=n)) % k
    mses = []
    for ids in (true_ids, wrong_ids):
        seqs = [
            model.vocab.encode(template_tokens("head_of_class", class_names[c])) for c in ids
        ]
        pred = model.predict_noise(
            Tensor(z_t), t.astype(np.float64), model.embed_condition_batch(seqs)
        )
        mses.append(float(np.mean((pred.data - eps) ** 2)))
    return mses[0], mses[1]
