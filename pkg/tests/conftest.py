"""Shared fixtures: the generated toy dataset and a fully trained model stack.

Both are expensive, so they are built once and cached on disk under
tests/.cache, keyed by a hash of the source modules they depend on plus
the training configuration; any code change invalidates the cache and
retrains.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

import latentbridge as lb
from latentbridge.artifacts import Bundle, load_bundle, save_bundle
from latentbridge.data import DatasetManifest, ImageSet, load_manifest, load_split
from latentbridge.denoiser import DenoiserConfig, Vocabulary
from latentbridge.metrics import train_classifier

CACHE = Path(__file__).parent / ".cache"
SRC = Path(__file__).parent.parent / "src" / "latentbridge"

TRAIN_SETTINGS = {
    "seed": 0,
    "codec": {"epochs": 24, "lr": 2e-3, "batch_size": 16},
    "denoiser": {"epochs": 60, "lr": 2e-3, "cond_dropout": 0.1, "batch_size": 32},
    "classifier": {"epochs": 12, "lr": 2e-3},
}


def _source_hash(*names: str) -> str:
    h = hashlib.sha256()
    for name in names:
        h.update((SRC / name).read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def toy_dataset() -> DatasetManifest:
    """Full-size toy dataset (1080 train / 121 test per domain), cached."""
    key = _source_hash("data.py")
    root = CACHE / f"data-{key}"
    if not (root / "manifest.jsonl").exists():
        lb.gen_toy_dataset(root, seed=0)
    return load_manifest(root)


@dataclass
class TrainedStack:
    bundle: Bundle
    manifest: DatasetManifest
    skeleton_train: ImageSet
    creature_train: ImageSet
    skeleton_test: ImageSet
    creature_test: ImageSet
    reports: dict
    ckpt_dir: Path

    @property
    def models(self):
        return self.bundle.translation_models()

    @property
    def classifier(self):
        return self.bundle.classifier


@pytest.fixture(scope="session")
def trained_stack(toy_dataset) -> TrainedStack:
    """Codec + denoiser + classifier trained at the shipped defaults, cached."""
    key = _source_hash(
        "data.py",
        "codec.py",
        "denoiser.py",
        "metrics.py",
        "schedule.py",
        "nn.py",
        "numerics/tensor.py",
        "numerics/ops.py",
        "numerics/optim.py",
    )
    cfg_key = hashlib.sha256(json.dumps(TRAIN_SETTINGS, sort_keys=True).encode()).hexdigest()[:8]
    ckpt_dir = CACHE / f"stack-{key}-{cfg_key}"

    splits = {
        (domain, split): load_split(toy_dataset, domain, split)
        for domain in ("skeleton", "creature")
        for split in ("train", "test")
    }

    try:
        bundle = load_bundle(ckpt_dir)
        assert bundle.codec and bundle.denoiser and bundle.classifier
    except (FileNotFoundError, AssertionError):
        bundle = _train_stack(ckpt_dir, toy_dataset, splits)

    return TrainedStack(
        bundle=bundle,
        manifest=toy_dataset,
        skeleton_train=splits[("skeleton", "train")],
        creature_train=splits[("creature", "train")],
        skeleton_test=splits[("skeleton", "test")],
        creature_test=splits[("creature", "test")],
        reports=json.loads((ckpt_dir / "train_reports.json").read_text()),
        ckpt_dir=ckpt_dir,
    )


def _train_stack(ckpt_dir: Path, manifest: DatasetManifest, splits) -> Bundle:
    seed = TRAIN_SETTINGS["seed"]
    sched = lb.make_schedule()
    ske_tr = splits[("skeleton", "train")]
    cre_tr = splits[("creature", "train")]

    codec, codec_report = lb.train_codec(
        np.concatenate([ske_tr.images, cre_tr.images]),
        epochs=TRAIN_SETTINGS["codec"]["epochs"],
        lr=TRAIN_SETTINGS["codec"]["lr"],
        seed=seed,
        batch_size=TRAIN_SETTINGS["codec"]["batch_size"],
    )
    save_bundle(ckpt_dir, sched, manifest.class_names, codec=codec)

    clf, clf_report = train_classifier(
        cre_tr.images,
        cre_tr.labels,
        ske_tr.images,
        seed=seed,
        epochs=TRAIN_SETTINGS["classifier"]["epochs"],
        lr=TRAIN_SETTINGS["classifier"]["lr"],
        codec=codec,
    )
    save_bundle(ckpt_dir, sched, manifest.class_names, classifier=clf)

    denoiser, den_report = lb.train_denoiser(
        cre_tr.images,
        cre_tr.labels,
        manifest.class_names,
        codec,
        sched,
        epochs=TRAIN_SETTINGS["denoiser"]["epochs"],
        lr=TRAIN_SETTINGS["denoiser"]["lr"],
        cond_dropout=TRAIN_SETTINGS["denoiser"]["cond_dropout"],
        seed=seed,
        batch_size=TRAIN_SETTINGS["denoiser"]["batch_size"],
    )
    save_bundle(ckpt_dir, sched, manifest.class_names, denoiser=denoiser)

    (ckpt_dir / "train_reports.json").write_text(
        json.dumps(
            {
                "codec": {
                    "holdout_mae": codec_report.holdout_mae,
                    "holdout_mse": codec_report.holdout_mse,
                    "epoch_losses": codec_report.epoch_losses,
                },
                "classifier": {
                    "holdout_accuracy": clf_report.holdout_accuracy,
                    "skeleton_reject_rate": clf_report.skeleton_reject_rate,
                },
                "denoiser": {
                    "epoch_losses": den_report.epoch_losses,
                    "val_mse_true": den_report.val_mse_true,
                    "val_mse_wrong": den_report.val_mse_wrong,
                },
            },
            indent=2,
        )
    )
    return load_bundle(ckpt_dir)
