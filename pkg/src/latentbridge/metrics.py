"""Quantitative protocol: feature classifier, FID, KID, top-1 accuracies.

The classifier is a small convnet whose penultimate 64-dim pooled
activations double as the feature space for FID/KID. Next to the six
creature classes it carries a "reject" class trained on skeleton images,
so outputs that never left the source domain are not force-classified.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .codec import Codec
from .numerics import AdamState, adam_step, ops
from .numerics.tensor import GradTape, ShapeError, Tensor, backward

__all__ = [
    "ClassifierConfig",
    "Classifier",
    "ClassifierTrainReport",
    "train_classifier",
    "top1_scores",
    "fid",
    "kid",
    "MetricsReport",
]


@dataclass(frozen=True)
class ClassifierConfig:
    n_classes: int = 6
    widths: tuple = (16, 32, 64)
    feature_dim: int = 64

    @property
    def reject_id(self) -> int:
        return self.n_classes


class Classifier:
    """Strided convnet: 3 downsampling stages, global mean pool, linear head."""

    PREFIX = "classifier."

    def __init__(self, config: ClassifierConfig, params: dict[str, Tensor] | None = None, rng=None):
        self.config = config
        if params is not None:
            self.params = dict(params)
        else:
            if rng is None:
                rng = np.random.default_rng(0)
            self.params = self._build(rng)

    def _build(self, rng) -> dict[str, Tensor]:
        c = self.config
        w1, w2, w3 = c.widths
        if w3 != c.feature_dim:
            raise ShapeError(f"feature dim {c.feature_dim} must equal last width {w3}")
        p: dict[str, Tensor] = {}
        nn.add_conv(p, rng, "c1", 4, 4, 3, w1)
        nn.add_norm_params(p, "n1", w1)
        nn.add_conv(p, rng, "c2", 4, 4, w1, w2)
        nn.add_norm_params(p, "n2", w2)
        nn.add_conv(p, rng, "c3", 4, 4, w2, w3)
        nn.add_norm_params(p, "n3", w3)
        nn.add_dense(p, rng, "head", w3, c.n_classes + 1)
        return p

    def _features_t(self, x: Tensor) -> Tensor:
        p = self.params
        h = ops.silu(nn.apply_norm(p, "n1", nn.apply_conv(p, "c1", x, stride=2, padding=1)))
        h = ops.silu(nn.apply_norm(p, "n2", nn.apply_conv(p, "c2", h, stride=2, padding=1)))
        h = ops.silu(nn.apply_norm(p, "n3", nn.apply_conv(p, "c3", h, stride=2, padding=1)))
        return ops.reduce_mean(h, axes=(1, 2))

    def _logits_t(self, x: Tensor) -> Tensor:
        return nn.apply_dense(self.params, "head", self._features_t(x))

    def features(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Penultimate pooled activations (N, feature_dim)."""
        outs = [
            self._features_t(Tensor(images[s : s + batch_size])).data
            for s in range(0, images.shape[0], batch_size)
        ]
        return np.concatenate(outs, axis=0)

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Top-1 class ids; `config.reject_id` marks the reject class."""
        outs = [
            np.argmax(self._logits_t(Tensor(images[s : s + batch_size])).data, axis=1)
            for s in range(0, images.shape[0], batch_size)
        ]
        return np.concatenate(outs, axis=0)

    def named_tensors(self) -> dict[str, Tensor]:
        return {self.PREFIX + k: v for k, v in self.params.items()}

    @classmethod
    def from_arrays(cls, config: ClassifierConfig, arrays: dict[str, np.ndarray]) -> "Classifier":
        params = {
            k[len(cls.PREFIX) :]: Tensor(v, trainable=True)
            for k, v in arrays.items()
            if k.startswith(cls.PREFIX)
        }
        if not params:
            raise ShapeError("no classifier.* tensors in checkpoint")
        return cls(config, params=params)


@dataclass
class ClassifierTrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    holdout_accuracy: float = float("nan")
    skeleton_reject_rate: float = float("nan")


def train_classifier(
    creatures_images: np.ndarray,
    creatures_labels: np.ndarray,
    skeleton_images: np.ndarray,
    seed: int,
    epochs: int = 12,
    lr: float = 2e-3,
    batch_size: int = 64,
    codec: Codec | None = None,
    noise_std: float = 0.06,
    config: ClassifierConfig | None = None,
) -> tuple[Classifier, ClassifierTrainReport]:
    """Train the evaluation classifier (creature classes + reject on skeletons).

    When a trained codec is given, codec round-trips of the training
    images are added as augmentation so the classifier stays calibrated
    on decoder output statistics; small Gaussian pixel noise serves the
    same purpose. 10% of each pool is held out for the report.
    """
    if creatures_images.shape[0] == 0 or skeleton_images.shape[0] == 0:
        raise ShapeError("train_classifier: empty dataset")
    config = config or ClassifierConfig()
    rng = np.random.default_rng(seed)
    clf = Classifier(config, rng=rng)

    def holdout_split(images, labels):
        perm = rng.permutation(images.shape[0])
        n_hold = max(1, images.shape[0] // 10)
        return (
            images[perm[:-n_hold]],
            labels[perm[:-n_hold]],
            images[perm[-n_hold:]],
            labels[perm[-n_hold:]],
        )

    reject = np.full(skeleton_images.shape[0], config.reject_id, dtype=np.int64)
    cx, cy, hx, hy = holdout_split(creatures_images, np.asarray(creatures_labels))
    sx, sy, hsx, hsy = holdout_split(skeleton_images, reject)

    pools_x = [cx, sx]
    pools_y = [cy, sy]
    if codec is not None:
        from .denoiser import encode_dataset  # local import to avoid cycle

        for imgs, labs in ((cx, cy), (sx, sy)):
            z = encode_dataset(codec, imgs)
            rec = np.concatenate(
                [
                    codec.decode(Tensor(z[s : s + 128])).data
                    for s in range(0, z.shape[0], 128)
                ]
            )
            pools_x.append(rec)
            pools_y.append(labs)
    x_all = np.concatenate(pools_x)
    y_all = np.concatenate(pools_y)
    onehot = np.eye(config.n_classes + 1, dtype=np.float32)

    state = AdamState.init(clf.params)
    report = ClassifierTrainReport()
    n = x_all.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb = x_all[idx]
            if noise_std > 0:
                xb = np.clip(
                    xb + rng.normal(0.0, noise_std, xb.shape).astype(np.float32), -1.0, 1.0
                )
            yb = Tensor(onehot[y_all[idx]])
            with GradTape() as tape:
                logp = ops.log_softmax(clf._logits_t(Tensor(xb)))
                loss = ops.scale(ops.reduce_mean(ops.mul(logp, yb)), -(config.n_classes + 1))
            grads = backward(tape, loss, clf.params)
            clf.params, state = adam_step(clf.params, grads, state, lr)
            losses.append(loss.item())
        report.epoch_losses.append(float(np.mean(losses)))

    report.holdout_accuracy = float(np.mean(clf.predict(hx) == hy))
    report.skeleton_reject_rate = float(np.mean(clf.predict(hsx) == config.reject_id))
    return clf, report


# ---------------------------------------------------------------------------
# scores
# ---------------------------------------------------------------------------


def top1_scores(predictions, true_classes, reject_id: int = 6) -> tuple[float, float]:
    """(all_at1, class_at1): any non-reject prediction vs the exact class."""
    pred = np.asarray(predictions)
    true = np.asarray(true_classes)
    if pred.shape != true.shape:
        raise ShapeError(f"top1_scores: {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise ShapeError("top1_scores: empty input")
    all_at1 = float(np.mean(pred != reject_id))
    class_at1 = float(np.mean(pred == true))
    return all_at1, class_at1


def _check_features(a, b, what: str, min_n: int = 2) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"{what}: feature shapes {a.shape} vs {b.shape}")
    if a.shape[0] < min_n or b.shape[0] < min_n:
        raise ShapeError(f"{what}: need at least {min_n} samples per side")
    return a, b


def fid(features_a, features_b) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2), with the
    matrix square roots taken by symmetric eigendecomposition and
    eigenvalues clamped at zero (robust for near-singular covariances).
    """
    a, b = _check_features(features_a, features_b, "fid")
    d = a.shape[1]
    if a.shape[0] <= d or b.shape[0] <= d:
        warnings.warn(
            f"fid: sample counts ({a.shape[0]}, {b.shape[0]}) <= dim {d}; "
            "covariances are singular",
            stacklevel=2,
        )
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    ca = np.cov(a, rowvar=False)
    cb = np.cov(b, rowvar=False)
    wa, va = np.linalg.eigh((ca + ca.T) / 2.0)
    sqrt_ca = (va * np.sqrt(np.clip(wa, 0.0, None))) @ va.T
    inner = sqrt_ca @ cb @ sqrt_ca
    wi = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_sqrt = np.sum(np.sqrt(np.clip(wi, 0.0, None)))
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(ca) + np.trace(cb) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def kid(features_a, features_b) -> float:
    """Unbiased MMD^2 with kernel (x.y/d + 1)^3, diagonal terms excluded.

    May be slightly negative (unbiased estimator); a single full estimate,
    no subset averaging.
    """
    a, b = _check_features(features_a, features_b, "kid")
    n, m = a.shape[0], b.shape[0]
    d = a.shape[1]
    kxx = (a @ a.T / d + 1.0) ** 3
    kyy = (b @ b.T / d + 1.0) ** 3
    kxy = (a @ b.T / d + 1.0) ** 3
    sum_xx = (kxx.sum() - np.trace(kxx)) / (n * (n - 1))
    sum_yy = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
    return float(sum_xx + sum_yy - 2.0 * kxy.mean())


@dataclass
class MetricsReport:
    """One row of the evaluation protocol."""

    fid: float
    kid: float
    all_at1: float
    class_at1: float
    orient_agree: float

    def __post_init__(self):
        values = (self.fid, self.kid, self.all_at1, self.class_at1, self.orient_agree)
        if not all(np.isfinite(v) for v in values):
            raise ShapeError(f"metrics must be finite, got {values}")
        if self.fid < 0 or not (0 <= self.all_at1 <= 1) or not (0 <= self.class_at1 <= 1):
            raise ShapeError(f"metrics out of range: {values}")

    def csv_row(self) -> str:
        return (
            f"{self.fid:.6g},{self.kid:.6g},{self.all_at1:.6g},"
            f"{self.class_at1:.6g},{self.orient_agree:.6g}"
        )
