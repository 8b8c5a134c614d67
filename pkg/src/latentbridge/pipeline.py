"""End-to-end translation pipeline and the sweep experiments.

translate() is literally decode(reverse(forward_diffuse(encode(x), k), k))
with no hidden state; the forward noise for image index i is drawn from a
stream derived from (seed, i), so batch composition never changes a
result and runs are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .codec import Codec
from .data import DataError, ImageSet, orientation_of, write_png
from .denoiser import Denoiser, template_tokens
from .metrics import Classifier, MetricsReport, fid, kid, top1_scores
from .numerics.tensor import ShapeError, Tensor
from .sampler import SamplerConfig, reverse
from .schedule import NoiseSchedule, forward_diffuse, step_from_fraction

__all__ = [
    "TranslationConfig",
    "TranslationModels",
    "SweepResult",
    "translation_noise",
    "translate",
    "translate_batch",
    "run_sweep",
    "FRACTION_GRID",
    "SHORT_FRACTION_GRID",
    "CFG_GRID",
]

# default sweep grids
FRACTION_GRID = (0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 1.0)
SHORT_FRACTION_GRID = (0.25, 0.5, 0.75, 1.0)
CFG_GRID = (5.0, 6.0, 7.0, 7.5, 8.0, 9.0, 10.0)

CSV_HEADER = "axis_value,fid,kid,all_at1,class_at1,orient_agree"


@dataclass(frozen=True)
class TranslationConfig:
    """Everything that pins one translation run."""

    fraction: float = 0.95
    guidance_scale: float = 7.5
    steps: int = 100
    eta: float = 0.0
    seed: int = 0
    template: str = "head_of_class"


@dataclass
class TranslationModels:
    codec: Codec
    denoiser: Denoiser
    schedule: NoiseSchedule


def translation_noise(seed: int, index: int, shape: tuple) -> np.ndarray:
    """Forward-process noise for one image: stream derived from (seed, index)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))
    return rng.standard_normal(shape, dtype=np.float32)


def _condition(denoiser: Denoiser, template: str, class_name: str | None):
    return denoiser.embed_condition(
        denoiser.vocab.encode(template_tokens(template, class_name))
    )


def translate(
    image: Tensor,
    class_name: str | None,
    cfg: TranslationConfig,
    models: TranslationModels,
    index: int = 0,
) -> Tensor:
    """Source image (H,W,3) -> target-domain image (H,W,3).

    class_name may be None only for the class-free "generic" template.
    """
    out = translate_batch(
        Tensor(image.data[None] if image.ndim == 3 else image.data),
        [class_name],
        cfg,
        models,
        indices=[index],
    )
    return Tensor._wrap(out.data[0]) if image.ndim == 3 else out


def translate_batch(
    images: Tensor,
    class_names,
    cfg: TranslationConfig,
    models: TranslationModels,
    indices=None,
) -> Tensor:
    """Translate a stack (N,H,W,3); per-image noise streams keyed by index."""
    if images.ndim != 4:
        raise ShapeError(f"translate_batch: need (N,H,W,3), got {images.shape}")
    n = images.shape[0]
    if len(class_names) != n:
        raise ShapeError(f"translate_batch: {len(class_names)} names for {n} images")
    if indices is None:
        indices = range(n)
    sched = models.schedule
    if sched.steps != cfg.steps:
        raise ShapeError(f"config steps {cfg.steps} != schedule steps {sched.steps}")

    z0 = models.codec.encode(images)
    k = step_from_fraction(cfg.fraction, cfg.steps)
    eps = np.stack(
        [translation_noise(cfg.seed, idx, z0.shape[1:]) for idx in indices]
    )
    z_k = forward_diffuse(z0, k, Tensor._wrap(eps), sched)

    seqs = [
        models.denoiser.vocab.encode(template_tokens(cfg.template, cname))
        for cname in class_names
    ]
    cond = models.denoiser.embed_condition_batch(seqs)
    sampler_cfg = SamplerConfig(eta=cfg.eta, guidance_scale=cfg.guidance_scale, seed=cfg.seed)
    z_t = reverse(z_k, k, cond, sampler_cfg, sched, models.denoiser)
    out = models.codec.decode(z_t)
    return Tensor._wrap(np.clip(out.data, -1.0, 1.0))


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepResult:
    axis: str
    rows: list = field(default_factory=list)  # (value, MetricsReport)

    def to_csv(self) -> str:
        lines = [CSV_HEADER]
        for value, report in self.rows:
            lines.append(f"{value},{report.csv_row()}")
        return "\n".join(lines) + "\n"


def evaluate_translations(
    outputs: np.ndarray,
    source: ImageSet,
    reference: ImageSet,
    classifier: Classifier,
) -> MetricsReport:
    """Score one batch of translated images against the real target split."""
    feats_gen = classifier.features(outputs)
    feats_ref = classifier.features(reference.images)
    preds = classifier.predict(outputs)
    all_at1, class_at1 = top1_scores(
        preds, source.labels, reject_id=classifier.config.reject_id
    )
    agree = []
    for i in range(outputs.shape[0]):
        try:
            got = orientation_of(outputs[i])
        except DataError:  # empty foreground counts as disagreement
            agree.append(0.0)
            continue
        want = "right" if source.orientations[i] == 1 else "left"
        agree.append(1.0 if got == want else 0.0)
    return MetricsReport(
        fid=fid(feats_gen, feats_ref),
        kid=kid(feats_gen, feats_ref),
        all_at1=all_at1,
        class_at1=class_at1,
        orient_agree=float(np.mean(agree)),
    )


def run_sweep(
    axis: str,
    values,
    base_cfg: TranslationConfig,
    test_set: ImageSet,
    reference: ImageSet,
    models: TranslationModels,
    classifier: Classifier,
    out_dir=None,
) -> SweepResult:
    """Translate the whole test set once per swept value and score each run.

    axis is one of fraction | cfg_scale | template. Output images land in
    out_dir/<value>/<image-id>.png when out_dir is given.
    """
    values = list(values)
    if not values:
        raise ShapeError("run_sweep: empty value list")
    if len(test_set) == 0:
        raise ShapeError("run_sweep: empty test set")
    if axis not in ("fraction", "cfg_scale", "template"):
        raise ShapeError(f"run_sweep: unknown axis {axis!r}")

    result = SweepResult(axis=axis)
    names = [test_set.class_names[c] for c in test_set.labels]
    for value in values:
        if axis == "fraction":
            cfg = replace(base_cfg, fraction=float(value))
        elif axis == "cfg_scale":
            cfg = replace(base_cfg, guidance_scale=float(value))
        else:
            cfg = replace(base_cfg, template=str(value))
        use_names = [None] * len(names) if cfg.template == "generic" else names
        outputs = translate_batch(Tensor(test_set.images), use_names, cfg, models).data
        report = evaluate_translations(outputs, test_set, reference, classifier)
        result.rows.append((value, report))
        if out_dir is not None:
            vdir = Path(out_dir) / f"{value:g}" if not isinstance(value, str) else Path(out_dir) / value
            for i, stem in enumerate(test_set.ids):
                write_png(vdir / f"{stem}.png", outputs[i])
    return result
