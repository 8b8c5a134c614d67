"""Condition embedding, UNet contracts, trainer determinism and separation."""

import numpy as np
import pytest

from latentbridge.denoiser import (
    CLASS_TEMPLATES,
    Denoiser,
    DenoiserConfig,
    TEMPLATES,
    VocabError,
    Vocabulary,
    template_tokens,
    train_denoiser,
)
from latentbridge.numerics import GradTape, Tensor, backward, grad_check, ops
from latentbridge.numerics.tensor import ShapeError
from latentbridge.schedule import make_schedule

CLASSES = tuple(f"{i + 1}-spike" for i in range(6))


@pytest.fixture(scope="module")
def model():
    vocab = Vocabulary.for_classes(CLASSES)
    return Denoiser(DenoiserConfig(vocab=vocab.tokens), rng=np.random.default_rng(0))


class TestVocabulary:
    def test_reserved_tokens_first(self):
        v = Vocabulary.for_classes(CLASSES)
        assert v.tokens[0] == "<null>" and v.tokens[1] == "<pad>"
        assert v.null_id == 0 and v.pad_id == 1

    def test_unknown_token_rejected(self):
        v = Vocabulary.for_classes(CLASSES)
        with pytest.raises(VocabError, match="dragon"):
            v.id("dragon")

    def test_all_templates_encode(self):
        v = Vocabulary.for_classes(CLASSES)
        for t in TEMPLATES:
            cname = None if t == "generic" else CLASSES[0]
            ids = v.encode(template_tokens(t, cname))
            assert len(ids) >= 1

    def test_template_token_sequences(self):
        assert template_tokens("head_of_class", "x") == ("photo", "head", "x")
        assert template_tokens("class_only", "x") == ("x",)
        assert template_tokens("class_head", "x") == ("x", "head")
        assert template_tokens("generic") == ("photo", "head")

    def test_class_template_needs_class(self):
        with pytest.raises(VocabError):
            template_tokens("head_of_class")


class TestEmbedCondition:
    def test_null_sequence_is_unconditional(self, model):
        cond = model.embed_condition([model.vocab.null_id])
        assert cond.is_unconditional
        assert cond.emb.shape == (model.config.cond_len, model.config.cond_dim)
        assert cond.mask.tolist() == [True] + [False] * (model.config.cond_len - 1)

    def test_same_tokens_give_identical_embeddings(self, model):
        ids = model.vocab.encode(("photo", "head", CLASSES[2]))
        a = model.embed_condition(ids)
        b = model.embed_condition(ids)
        assert a.emb.data.tobytes() == b.emb.data.tobytes()

    def test_unknown_id_rejected(self, model):
        with pytest.raises(VocabError):
            model.embed_condition([999])

    def test_too_long_sequence_rejected(self, model):
        with pytest.raises(VocabError):
            model.embed_condition([2] * (model.config.cond_len + 1))

    def test_empty_sequence_rejected(self, model):
        with pytest.raises(VocabError):
            model.embed_condition([])


class TestPredictNoise:
    def test_output_shape_matches_input(self, model):
        rng = np.random.default_rng(1)
        cond = model.condition_for("head_of_class", CLASSES[0])
        for shape in ((8, 8, 4), (3, 8, 8, 4)):
            z = Tensor(rng.standard_normal(shape).astype(np.float32))
            out = model.predict_noise(z, 50, cond)
            assert out.shape == z.shape
            assert np.all(np.isfinite(out.data))

    def test_pure_function(self, model):
        rng = np.random.default_rng(2)
        z = Tensor(rng.standard_normal((2, 8, 8, 4)).astype(np.float32))
        cond = model.condition_for("class_only", CLASSES[3])
        a = model.predict_noise(z, 7, cond)
        b = model.predict_noise(z, 7, cond)
        assert a.data.tobytes() == b.data.tobytes()

    @pytest.mark.parametrize("t", [0, -3, 101])
    def test_time_out_of_range_rejected(self, model, t):
        z = Tensor(np.zeros((1, 8, 8, 4), dtype=np.float32))
        with pytest.raises(ShapeError):
            model.predict_noise(z, t, model.unconditional())

    def test_attention_rows_sum_to_one_with_masked_padding(self, model):
        rng = np.random.default_rng(3)
        z = Tensor(rng.standard_normal((2, 8, 8, 4)).astype(np.float32))
        cond = model.condition_for("head_of_class", CLASSES[1])
        sink = []
        model.predict_noise(z, 30, cond, attn_sink=sink)
        assert len(sink) == 2  # one per cross-attention block
        for attn in sink:
            np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-5)
            assert np.all(attn[..., 3:] == 0.0)  # padded slots get zero attention

    def test_gradients_match_finite_differences(self):
        """Training-loss gradient through the full UNet, rel error < 1e-3."""
        vocab = Vocabulary.for_classes(("a", "b"))
        den = Denoiser(DenoiserConfig(vocab=vocab.tokens), rng=np.random.default_rng(4))
        rng = np.random.default_rng(5)
        z = Tensor(rng.standard_normal((1, 8, 8, 4)).astype(np.float32))
        eps = Tensor(rng.standard_normal((1, 8, 8, 4)).astype(np.float32))

        def frag(p):
            den.params = p
            cond = den.embed_condition_batch([den.vocab.encode(("photo", "a"))])
            pred = den.predict_noise(z, np.array([42.0]), cond)
            d = ops.sub(pred, eps)
            return ops.reduce_mean(ops.mul(d, d))

        report = grad_check(frag, den.params, samples_per_param=1, seed=0)
        assert report.max_rel_error < 1e-3, report.format_table()


class TestTrainer:
    def _tiny_data(self, n=24):
        rng = np.random.default_rng(6)
        imgs = rng.uniform(-0.9, 0.9, (n, 32, 32, 3)).astype(np.float32)
        labels = np.arange(n) % 6
        return imgs, labels

    def test_empty_dataset_rejected(self, trained_stack):
        with pytest.raises(ShapeError):
            train_denoiser(
                np.zeros((0, 32, 32, 3), dtype=np.float32),
                np.zeros(0),
                CLASSES,
                trained_stack.models.codec,
                make_schedule(),
                epochs=1,
                lr=1e-3,
                cond_dropout=0.1,
                seed=0,
            )

    def test_missing_codec_rejected(self):
        imgs, labels = self._tiny_data()
        with pytest.raises(ShapeError):
            train_denoiser(
                imgs, labels, CLASSES, None, make_schedule(),
                epochs=1, lr=1e-3, cond_dropout=0.1, seed=0,
            )

    def test_fixed_seed_bitwise_identical(self, trained_stack):
        imgs, labels = self._tiny_data()
        kwargs = dict(
            epochs=1, lr=1e-3, cond_dropout=0.1, seed=3, batch_size=8,
        )
        m1, _ = train_denoiser(
            imgs, labels, CLASSES, trained_stack.models.codec, make_schedule(), **kwargs
        )
        m2, _ = train_denoiser(
            imgs, labels, CLASSES, trained_stack.models.codec, make_schedule(), **kwargs
        )
        for k in m1.params:
            assert m1.params[k].data.tobytes() == m2.params[k].data.tobytes(), k

    def test_zero_dropout_leaves_null_row_untouched(self, model):
        """No null usage in the batch -> zero gradient on the null embedding row."""
        rng = np.random.default_rng(7)
        z = Tensor(rng.standard_normal((4, 8, 8, 4)).astype(np.float32))
        eps = Tensor(rng.standard_normal((4, 8, 8, 4)).astype(np.float32))
        seqs = [model.vocab.encode(template_tokens(t, CLASSES[i])) for i, t in enumerate(CLASS_TEMPLATES)]
        seqs.append(model.vocab.encode(("photo", "head")))
        with GradTape() as tape:
            cond = model.embed_condition_batch(seqs)
            pred = model.predict_noise(z, np.full(4, 20.0), cond)
            d = ops.sub(pred, eps)
            loss = ops.reduce_mean(ops.mul(d, d))
        grads = backward(tape, loss, model.params)
        table_grad = grads["emb.table"]
        assert np.all(table_grad[model.vocab.null_id] == 0.0)
        assert np.abs(table_grad).sum() > 0.0  # used rows do learn


class TestTrainedConditioning:
    def test_condition_separation_strict(self, trained_stack):
        """eps-MSE with the true class beats a mismatched class at 95% confidence."""
        from latentbridge.denoiser import encode_dataset, template_tokens as tt

        models = trained_stack.models
        den = models.denoiser
        sched = models.schedule
        cre = trained_stack.creature_test
        latents = encode_dataset(models.codec, cre.images)
        rng = np.random.default_rng(8)
        n = 500
        idx = rng.integers(0, latents.shape[0], size=n)
        t = rng.integers(1, sched.steps + 1, size=n)
        eps = rng.standard_normal((n,) + latents.shape[1:]).astype(np.float32)
        sab = np.sqrt(sched.alpha_bar).astype(np.float32)
        somab = np.sqrt(1.0 - sched.alpha_bar).astype(np.float32)
        z_t = sab[t, None, None, None] * latents[idx] + somab[t, None, None, None] * eps
        true_ids = cre.labels[idx]
        wrong_ids = (true_ids + 1 + rng.integers(0, 5, size=n)) % 6

        def mse_per_sample(ids):
            seqs = [den.vocab.encode(tt("head_of_class", CLASSES[c])) for c in ids]
            out = []
            for s in range(0, n, 128):
                cond = den.embed_condition_batch(seqs[s : s + 128])
                pred = den.predict_noise(
                    Tensor(z_t[s : s + 128]), t[s : s + 128].astype(np.float64), cond
                )
                out.append(((pred.data - eps[s : s + 128]) ** 2).mean(axis=(1, 2, 3)))
            return np.concatenate(out)

        true_mse = mse_per_sample(true_ids)
        wrong_mse = mse_per_sample(wrong_ids)
        diff = wrong_mse - true_mse
        z_score = diff.mean() / (diff.std(ddof=1) / np.sqrt(n))
        assert z_score > 1.645, f"z={z_score:.2f}"

    def test_class_embeddings_do_not_collapse(self, trained_stack):
        den = trained_stack.models.denoiser
        table = den.params["emb.table"].data
        ids = [den.vocab.id(c) for c in CLASSES]
        for i in range(len(ids)):
            for j in range(i + 1, len(ids)):
                a, b = table[ids[i]], table[ids[j]]
                cos = a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12)
                assert cos < 0.99, f"classes {i},{j} cosine {cos:.4f}"

    def test_unconditional_samples_look_like_creatures(self, trained_stack):
        """Unconditional chain from pure noise classifies as a creature >= 80%."""
        from latentbridge.sampler import SamplerConfig, reverse

        models = trained_stack.models
        rng = np.random.default_rng(9)
        z = Tensor(rng.standard_normal((50, 8, 8, 4), dtype=np.float32))
        out = reverse(
            z, models.schedule.steps, models.denoiser.unconditional(),
            SamplerConfig(guidance_scale=1.0), models.schedule, models.denoiser,
        )
        imgs = np.clip(models.codec.decode(out).data, -1, 1)
        preds = trained_stack.classifier.predict(imgs)
        rate = float(np.mean(preds != trained_stack.classifier.config.reject_id))
        assert rate >= 0.80, f"creature rate {rate:.2f}"
