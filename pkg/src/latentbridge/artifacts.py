"""Trained-model persistence: checkpoint containers plus a meta sidecar.

Weights go into one binary container per model (codec.ckpt,
denoiser.ckpt, classifier.ckpt); meta.json records the architecture
hyperparameters, schedule parameters, class names, the ordered token
vocabulary, and content hashes of the weight files, so a bundle directory
is self-describing and re-loadable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .codec import Codec, CodecConfig
from .denoiser import Denoiser, DenoiserConfig
from .metrics import Classifier, ClassifierConfig
from .numerics.checkpoint import load_checkpoint, save_checkpoint, sha256_file
from .pipeline import TranslationModels
from .schedule import NoiseSchedule, make_schedule

__all__ = ["Bundle", "save_bundle", "load_bundle"]

_FILES = {"codec": "codec.ckpt", "denoiser": "denoiser.ckpt", "classifier": "classifier.ckpt"}


@dataclass
class Bundle:
    schedule: NoiseSchedule
    class_names: tuple[str, ...]
    codec: Codec | None = None
    denoiser: Denoiser | None = None
    classifier: Classifier | None = None

    def translation_models(self) -> TranslationModels:
        if self.codec is None or self.denoiser is None:
            raise FileNotFoundError("bundle lacks trained codec/denoiser checkpoints")
        return TranslationModels(codec=self.codec, denoiser=self.denoiser, schedule=self.schedule)


def _read_meta(ckpt_dir: Path) -> dict:
    meta_path = ckpt_dir / "meta.json"
    if meta_path.exists():
        return json.loads(meta_path.read_text())
    return {}


def save_bundle(
    ckpt_dir,
    schedule: NoiseSchedule,
    class_names,
    codec: Codec | None = None,
    denoiser: Denoiser | None = None,
    classifier: Classifier | None = None,
) -> Path:
    """Write/update a bundle directory; models not passed are left as-is."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    meta = _read_meta(ckpt_dir)
    meta["schedule"] = {
        "kind": schedule.kind,
        "steps": schedule.steps,
        "beta_start": float(schedule.beta[0]),
        "beta_end": float(schedule.beta[-1]),
    }
    meta["class_names"] = list(class_names)
    hashes = meta.setdefault("hashes", {})

    for key, model in (("codec", codec), ("denoiser", denoiser), ("classifier", classifier)):
        if model is None:
            continue
        path = ckpt_dir / _FILES[key]
        save_checkpoint(path, model.named_tensors())
        hashes[_FILES[key]] = sha256_file(path)
        if key == "codec":
            meta["codec"] = {
                "factor": model.config.factor,
                "latent_channels": model.config.latent_channels,
                "width": model.config.width,
            }
        elif key == "denoiser":
            meta["denoiser"] = {
                "vocab": list(model.config.vocab),
                "latent_channels": model.config.latent_channels,
                "base_width": model.config.base_width,
                "temb_dim": model.config.temb_dim,
                "cond_dim": model.config.cond_dim,
                "cond_len": model.config.cond_len,
                "heads": model.config.heads,
                "time_max": model.config.time_max,
            }
        else:
            meta["classifier"] = {
                "n_classes": model.config.n_classes,
                "widths": list(model.config.widths),
                "feature_dim": model.config.feature_dim,
            }
    (ckpt_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return ckpt_dir


def load_bundle(ckpt_dir) -> Bundle:
    """Load whatever models exist in a bundle directory."""
    ckpt_dir = Path(ckpt_dir)
    meta = _read_meta(ckpt_dir)
    if not meta:
        raise FileNotFoundError(f"{ckpt_dir}/meta.json not found")
    s = meta["schedule"]
    schedule = make_schedule(s["kind"], s["steps"], s["beta_start"], s["beta_end"])
    bundle = Bundle(schedule=schedule, class_names=tuple(meta.get("class_names", ())))

    path = ckpt_dir / _FILES["codec"]
    if path.exists() and "codec" in meta:
        cfg = CodecConfig(**meta["codec"])
        bundle.codec = Codec.from_arrays(cfg, load_checkpoint(path))
    path = ckpt_dir / _FILES["denoiser"]
    if path.exists() and "denoiser" in meta:
        d = dict(meta["denoiser"])
        d["vocab"] = tuple(d["vocab"])
        cfg = DenoiserConfig(**d)
        bundle.denoiser = Denoiser.from_arrays(cfg, load_checkpoint(path))
    path = ckpt_dir / _FILES["classifier"]
    if path.exists() and "classifier" in meta:
        c = dict(meta["classifier"])
        c["widths"] = tuple(c["widths"])
        cfg = ClassifierConfig(**c)
        bundle.classifier = Classifier.from_arrays(cfg, load_checkpoint(path))
    return bundle
