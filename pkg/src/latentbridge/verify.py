"""Runnable invariant suite behind the `verify` CLI command.

Each check is a named callable returning (ok, detail). Fast numeric
checks always run; checks that need trained weights or a generated
dataset are skipped (not failed) when those artifacts are absent.
"""

from __future__ import annotations

import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as toydata
from .artifacts import load_bundle
from .metrics import fid, kid, top1_scores
from .numerics import Tensor, grad_check, ops
from .numerics.checkpoint import load_checkpoint, save_checkpoint
from .numerics.optim import AdamState, adam_step
from .sampler import SamplerConfig, cfg_combine, ddim_invert, ddim_step, reverse
from .schedule import forward_diffuse, make_schedule, step_from_fraction

__all__ = ["CheckResult", "run_all", "FAST_CHECKS", "MODEL_CHECKS"]


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    skipped: bool = False


class _PointOracle:
    """Exact noise predictor for a point-mass data distribution at z_star."""

    def __init__(self, z_star: np.ndarray, sched):
        self.z_star = z_star
        self.sched = sched

    def unconditional(self):
        return None

    def predict_noise(self, z, t, cond):
        ab = self.sched.alpha_bar_at(float(np.max(t)))
        eps = (z.data - np.sqrt(ab) * self.z_star) / np.sqrt(1.0 - ab)
        return Tensor._wrap(eps.astype(np.float32))


# ---------------------------------------------------------------------------
# fast checks
# ---------------------------------------------------------------------------


def check_op_gradients():
    rng = np.random.default_rng(0)
    x = Tensor(rng.uniform(-1, 1, (2, 6, 6, 8)), trainable=True)
    w = Tensor(rng.uniform(-0.5, 0.5, (3, 3, 8, 4)), trainable=True)
    g = Tensor(np.ones(8), trainable=True)
    b = Tensor(np.zeros(8), trainable=True)
    m = Tensor(rng.uniform(-1, 1, (5, 7)), trainable=True)

    def sq_mean(t):
        return ops.reduce_mean(ops.mul(t, t))

    def frag_conv(p):
        return sq_mean(ops.conv2d(p["x"], p["w"], padding=1))

    def frag_gn(p):
        return sq_mean(ops.group_norm(p["x"], p["g"], p["b"]))

    def frag_attnish(p):
        scores = ops.matmul(p["m"], ops.transpose(p["m"], (1, 0)))
        return sq_mean(ops.softmax(scores))

    def frag_silu_tanh(p):
        return ops.reduce_sum(ops.tanh(ops.silu(p["m"])))

    def frag_resize(p):
        up = ops.resize_nearest(p["x"], 2)
        return sq_mean(ops.concat((up, up), 3))

    cases = {
        "conv2d": ({"x": x, "w": w}, frag_conv),
        "group_norm": ({"x": x, "g": g, "b": b}, frag_gn),
        "matmul_softmax": ({"m": m}, frag_attnish),
        "silu_tanh": ({"m": m}, frag_silu_tanh),
        "resize_concat": ({"x": x}, frag_resize),
    }
    worst = 0.0
    for name, (params, fn) in cases.items():
        rep = grad_check(fn, params, samples_per_param=4, seed=1)
        worst = max(worst, rep.max_rel_error)
        if rep.max_rel_error >= 1e-3:
            return False, f"{name}: max rel error {rep.max_rel_error:.2e}"
    return True, f"max rel error {worst:.2e} over {len(cases)} composite op fragments"


def check_conv_matmul_reference():
    rng = np.random.default_rng(1)
    a = rng.uniform(-1, 1, (7, 5)).astype(np.float32)
    b = rng.uniform(-1, 1, (5, 6)).astype(np.float32)
    ref = np.zeros((7, 6))
    for i in range(7):
        for j in range(6):
            for k in range(5):
                ref[i, j] += float(a[i, k]) * float(b[k, j])
    err_mm = np.abs(ops.matmul(Tensor(a), Tensor(b)).data - ref).max()
    x = rng.uniform(-1, 1, (2, 6, 6, 3)).astype(np.float32)
    w = rng.uniform(-1, 1, (3, 3, 3, 4)).astype(np.float32)
    got = ops.conv2d(Tensor(x), Tensor(w), stride=1, padding=1).data
    xp = np.pad(x.astype(np.float64), ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref_c = np.zeros_like(got, dtype=np.float64)
    for n in range(2):
        for i in range(6):
            for j in range(6):
                for co in range(4):
                    ref_c[n, i, j, co] = np.sum(xp[n, i : i + 3, j : j + 3, :] * w[:, :, :, co])
    err_cv = np.abs(got - ref_c).max()
    ok = err_mm <= 1e-5 and err_cv <= 1e-5
    return ok, f"matmul err {err_mm:.2e}, conv err {err_cv:.2e} vs naive loops"


def check_adam_contracts():
    p = {"w": Tensor(np.array([1.5, -2.0]), trainable=True)}
    st = AdamState.init(p)
    p2, st2 = adam_step(p, {"w": np.zeros(2, dtype=np.float32)}, st, lr=0.1)
    if p2["w"].data.tobytes() != p["w"].data.tobytes():
        return False, "zero-gradient step changed parameters"
    q = {"w": Tensor(np.array(0.0), trainable=True)}
    q2, stq = adam_step(q, {"w": np.array(1.0, dtype=np.float32)}, AdamState.init(q), lr=0.1)
    if abs(float(q2["w"].data) + 0.1) > 1e-6:
        return False, f"first-step update {float(q2['w'].data):.6f}, expected -0.1"
    _, st3 = adam_step(p2, {"w": np.zeros(2, dtype=np.float32)}, st2, lr=0.1)
    if (st2.step, st3.step) != (1, 2):
        return False, f"step counter {st2.step}->{st3.step}"
    return True, "zero-grad bitwise, hand-computed first step, counter increments"


def check_checkpoint_roundtrip():
    rng = np.random.default_rng(2)
    tensors = {
        "a.w": rng.normal(size=(3, 4)).astype(np.float32),
        "b": rng.normal(size=(2, 2, 2)).astype(np.float32),
        "scalar": np.array(3.5, dtype=np.float32),
    }
    with tempfile.TemporaryDirectory() as td:
        path = Path(td) / "t.ckpt"
        save_checkpoint(path, tensors)
        back = load_checkpoint(path)
        magic = path.read_bytes()[:4]
    ok = magic == b"R2I1" and all(np.array_equal(tensors[k], back[k]) for k in tensors)
    return ok, f"magic {magic!r}, {len(back)} tensors bit-identical"


def check_schedule_invariants():
    details = []
    for kind in ("linear", "cosine"):
        s = make_schedule(kind)
        prod = np.cumprod(1.0 - s.beta.astype(np.float64))
        rel = np.abs(s.alpha_bar[1:] - prod) / prod
        snr = s.alpha_bar[:-1] / (1 - s.alpha_bar[:-1] + 1e-300)
        decreasing = np.all(np.diff(s.alpha_bar) < 0)
        if rel.max() > 1e-6 or not decreasing:
            return False, f"{kind}: product err {rel.max():.2e}, decreasing={decreasing}"
        details.append(f"{kind} ok (abar_T={s.alpha_bar[-1]:.2e})")
    return True, "; ".join(details)


def check_fraction_grids():
    grid = [step_from_fraction(f, 100) for f in (0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 1.0)]
    short = [step_from_fraction(f, 100) for f in (0.25, 0.5, 0.75, 1.0)]
    ok = grid == [50, 60, 70, 80, 90, 95, 100] and short == [25, 50, 75, 100]
    return ok, f"grid {grid}, short {short}"


def check_forward_marginals():
    s = make_schedule()
    rng = np.random.default_rng(3)
    z0 = Tensor(rng.uniform(-1, 1, (4, 4, 1)).astype(np.float32))
    fails = []
    for k in (5, 50, 100):
        draws = 10_000
        eps = rng.standard_normal((draws,) + z0.shape).astype(np.float32)
        zk = forward_diffuse(Tensor(np.broadcast_to(z0.data, eps.shape).copy()), k, Tensor(eps), s)
        ab = s.alpha_bar[k]
        mean_err = np.abs(zk.data.mean(axis=0) - np.sqrt(ab) * z0.data)
        se_mean = np.sqrt(1 - ab) / np.sqrt(draws)
        std_err = np.abs(zk.data.std(axis=0) - np.sqrt(1 - ab))
        se_std = np.sqrt(1 - ab) / np.sqrt(2 * draws)
        if mean_err.max() > 3 * se_mean or std_err.max() > 3 * se_std:
            fails.append(k)
    return not fails, f"means/stds within 3 SE at k in (5,50,100); failures: {fails or 'none'}"


def check_cfg_contracts():
    rng = np.random.default_rng(4)
    eu = Tensor(rng.normal(size=(3, 3)).astype(np.float32) * 1e4)
    ec = Tensor(rng.normal(size=(3, 3)).astype(np.float32))
    ok0 = cfg_combine(eu, ec, 0.0).data.tobytes() == eu.data.tobytes()
    ok1 = cfg_combine(eu, ec, 1.0).data.tobytes() == ec.data.tobytes()
    v = cfg_combine(Tensor(np.zeros(1)), Tensor(np.ones(1)), 7.5).data[0]
    return ok0 and ok1 and abs(v - 7.5) < 1e-6, f"s=0/1 bitwise, s=7.5 -> {v}"


def check_substitution_identity():
    s = make_schedule()
    rng = np.random.default_rng(5)
    z0 = rng.uniform(-1, 1, (2, 4, 4, 2)).astype(np.float32)
    eps = rng.standard_normal(z0.shape).astype(np.float32)
    k = 80
    zk = forward_diffuse(Tensor(z0), k, Tensor(eps), s)
    for t_to in (40, 0):
        z_to = ddim_step(zk, k, t_to, Tensor(eps), 0.0, s, None)
        want = forward_diffuse(Tensor(z0), t_to, Tensor(eps), s)
        if np.abs(z_to.data - want.data).max() > 1e-5:
            return False, f"substitution identity broke at {k}->{t_to}"
    return True, "oracle eps reproduces the forward trajectory at 80->40->0 (<=1e-5)"


def check_oracle_chain():
    s = make_schedule()
    rng = np.random.default_rng(6)
    z_star = rng.uniform(-1, 1, (3, 4, 4, 2)).astype(np.float32)
    oracle = _PointOracle(z_star, s)
    z_T = Tensor(rng.standard_normal(z_star.shape).astype(np.float32))
    out = reverse(z_T, s.steps, None, SamplerConfig(guidance_scale=1.0), s, oracle)
    err = np.abs(out.data - z_star).max()
    return err <= 1e-3, f"point-mass oracle chain reconstructs z0 to {err:.2e}"


def check_fid_oracles():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(2000, 8))
    same = fid(a, a)
    mu = np.full(8, np.sqrt(4.0 / 8))
    b = rng.normal(size=(10_000, 8))
    c = rng.normal(size=(10_000, 8)) + mu
    shifted = fid(b, c)
    av = rng.uniform(0.5, 2.0, 6)
    bv = rng.uniform(0.5, 2.0, 6)
    xa = rng.normal(size=(40_000, 6)) * np.sqrt(av)
    xb = rng.normal(size=(40_000, 6)) * np.sqrt(bv)
    diag = fid(xa, xb)
    ok = same <= 1e-6 and abs(shifted - 4.0) <= 0.2
    return ok, f"fid(A,A)={same:.2e}, shifted-gaussian {shifted:.3f} (want 4.0+-0.2), diag {diag:.3f}"


def check_kid_oracles():
    rng = np.random.default_rng(8)
    vals = [kid(rng.normal(size=(400, 6)), rng.normal(size=(400, 6))) for _ in range(20)]
    spread = 3 * np.std(vals)
    mean = abs(np.mean(vals))
    x = np.zeros((2, 3))
    y = np.ones((2, 3)) * 0.5
    got = kid(x, y)
    kxx, kyy, kxy = 1.0, (0.25 + 1) ** 3, (0 / 3 + 1) ** 3
    want = kxx + kyy - 2 * kxy
    ok = mean <= max(spread, 1e-4) and abs(got - want) <= 1e-9
    return ok, f"same-dist |mean| {mean:.2e} <= 3sd {spread:.2e}; two-point {got:.6f} = {want:.6f}"


def check_top1_bookkeeping():
    preds = np.array([0] * 112 + [6] * 9)
    trues = np.array([0] * 121)
    all1, cls1 = top1_scores(preds, trues)
    ok = round(cls1 * 100, 2) == 92.56 and all1 == 112 / 121
    return ok, f"112/121 -> Class@1 {cls1 * 100:.2f}% (want 92.56%)"


def check_data_detectors():
    with tempfile.TemporaryDirectory() as td:
        man = toydata.gen_toy_dataset(Path(td) / "d", seed=11, train_per_domain=12, test_per_domain=6)
        for rec in man.records:
            img = toydata.read_png(Path(man.root) / rec.path)
            if toydata.orientation_of(img) != rec.orientation:
                return False, f"orientation mismatch on {rec.path}"
            if toydata.class_of(img) != rec.class_id:
                return False, f"class mismatch on {rec.path}"
    return True, "detectors exact on a fresh 36-image set"


# ---------------------------------------------------------------------------
# model-dependent checks
# ---------------------------------------------------------------------------


def check_cycle_consistency(bundle, dataset):
    models = bundle.translation_models()
    sched = models.schedule
    den = models.denoiser
    creatures = dataset["creature_test"]
    z0 = models.codec.encode(Tensor(creatures.images[:16]))
    cond = den.condition_for("head_of_class", bundle.class_names[0])
    cfg = SamplerConfig(guidance_scale=1.0)
    k = 50
    z_k = ddim_invert(z0, k, cond, sched, den)
    back = reverse(z_k, k, cond, cfg, sched, den)
    err1 = float(np.mean(np.abs(back.data - z0.data)))
    z_k2 = ddim_invert(z0, k, cond, sched, den, substeps=2)
    back2 = reverse(z_k2, k, cond, cfg, sched, den, substeps=2)
    err2 = float(np.mean(np.abs(back2.data - z0.data)))
    ok = err1 <= 1e-2 and err2 < err1
    return ok, f"round-trip err {err1:.2e} (<=1e-2), refined {err2:.2e} (smaller)"


def check_guidance_null_equivalence(bundle, dataset):
    models = bundle.translation_models()
    den = models.denoiser
    rng = np.random.default_rng(13)
    z = Tensor(rng.standard_normal((4, 8, 8, den.config.latent_channels)).astype(np.float32))
    cfg = SamplerConfig(guidance_scale=0.0)
    outs = []
    for cname in bundle.class_names[:2]:
        cond = den.condition_for("head_of_class", cname)
        outs.append(reverse(z, 10, cond, cfg, models.schedule, den).data.tobytes())
    ok = outs[0] == outs[1]
    return ok, "s=0 output bitwise identical across two class conditions"


def check_codec_roundtrip(bundle, dataset):
    codec = bundle.codec
    imgs = np.concatenate(
        [dataset["skeleton_test"].images[:32], dataset["creature_test"].images[:32]]
    )
    rec = codec.decode(codec.encode(Tensor(imgs)))
    mae = float(np.mean(np.abs(rec.data - imgs)))
    return mae < 0.05, f"held-out round-trip MAE {mae:.4f} (< 0.05)"


def check_condition_separation(bundle, dataset):
    from .denoiser import _condition_separation, encode_dataset

    models = bundle.translation_models()
    cre = dataset["creature_test"]
    latents = encode_dataset(models.codec, cre.images)
    rng = np.random.default_rng(14)
    mse_true, mse_wrong = _condition_separation(
        models.denoiser, latents, cre.labels, list(bundle.class_names), models.schedule, rng
    )
    return mse_true < mse_wrong, f"eps-MSE true {mse_true:.4f} < mismatched {mse_wrong:.4f}"


def check_classifier_quality(bundle, dataset):
    clf = bundle.classifier
    cre, skel = dataset["creature_test"], dataset["skeleton_test"]
    acc = float(np.mean(clf.predict(cre.images) == cre.labels))
    rej = float(np.mean(clf.predict(skel.images) == clf.config.reject_id))
    ok = acc >= 0.97 and rej >= 0.95
    return ok, f"creature accuracy {acc:.3f} (>=0.97), skeleton reject {rej:.3f} (>=0.95)"


FAST_CHECKS = [
    ("op gradients vs finite differences", check_op_gradients),
    ("matmul/conv vs naive reference", check_conv_matmul_reference),
    ("adam update contracts", check_adam_contracts),
    ("checkpoint container round trip", check_checkpoint_roundtrip),
    ("schedule invariants", check_schedule_invariants),
    ("fraction-to-step grids", check_fraction_grids),
    ("forward-process marginals", check_forward_marginals),
    ("guidance combination contracts", check_cfg_contracts),
    ("single-step substitution identity", check_substitution_identity),
    ("oracle reverse chain", check_oracle_chain),
    ("fid closed-form oracles", check_fid_oracles),
    ("kid estimator oracles", check_kid_oracles),
    ("top-1 bookkeeping", check_top1_bookkeeping),
    ("toy data detectors", check_data_detectors),
]

MODEL_CHECKS = [
    ("deterministic cycle consistency", check_cycle_consistency),
    ("guidance null equivalence", check_guidance_null_equivalence),
    ("codec round-trip fidelity", check_codec_roundtrip),
    ("conditioning separation", check_condition_separation),
    ("classifier quality", check_classifier_quality),
]


def run_all(data_root=None, ckpt_dir=None) -> list[CheckResult]:
    results = []
    for name, fn in FAST_CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failure, not an abort
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append(CheckResult(name, ok, detail))

    bundle = None
    dataset = None
    reason = "no checkpoint dir given"
    if ckpt_dir is not None:
        try:
            bundle = load_bundle(ckpt_dir)
        except FileNotFoundError as exc:
            reason = str(exc)
    if bundle is not None and data_root is not None:
        try:
            manifest = toydata.load_manifest(data_root)
            dataset = {
                "skeleton_test": toydata.load_split(manifest, "skeleton", "test"),
                "creature_test": toydata.load_split(manifest, "creature", "test"),
            }
        except (FileNotFoundError, toydata.DataError) as exc:
            dataset = None
            reason = f"dataset unavailable: {exc}"
    elif bundle is not None:
        reason = "no data root given"

    for name, fn in MODEL_CHECKS:
        if bundle is None or dataset is None:
            results.append(CheckResult(name, True, reason, skipped=True))
            continue
        needs = {
            "deterministic cycle consistency": ("codec", "denoiser"),
            "guidance null equivalence": ("codec", "denoiser"),
            "codec round-trip fidelity": ("codec",),
            "conditioning separation": ("codec", "denoiser"),
            "classifier quality": ("classifier",),
        }[name]
        if any(getattr(bundle, n) is None for n in needs):
            results.append(CheckResult(name, True, f"missing {needs} checkpoint", skipped=True))
            continue
        try:
            ok, detail = fn(bundle, dataset)
        except Exception as exc:
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append(CheckResult(name, ok, detail))
    return results
