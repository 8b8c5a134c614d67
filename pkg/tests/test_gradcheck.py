"""grad_check behavior: linear layers, frozen fragments, attention blocks."""

import numpy as np

from latentbridge.numerics import Tensor, grad_check, ops


class TestGradCheck:
    def test_linear_layer_under_threshold(self):
        rng = np.random.default_rng(0)
        params = {
            "w": Tensor(rng.normal(0, 0.5, (6, 4)), trainable=True),
            "b": Tensor(rng.normal(0, 0.1, (4,)), trainable=True),
        }
        x = Tensor(rng.normal(0, 1, (3, 6)))

        def frag(p):
            o = ops.add_bias(ops.matmul(x, p["w"]), p["b"])
            return ops.reduce_mean(ops.mul(o, o))

        report = grad_check(frag, params, samples_per_param=6)
        assert report.max_rel_error < 1e-3
        assert not report.empty

    def test_frozen_fragment_gives_empty_report(self):
        rng = np.random.default_rng(1)
        params = {"w": Tensor(rng.normal(0, 0.5, (4, 4)), trainable=False)}
        x = Tensor(rng.normal(0, 1, (2, 4)))

        def frag(p):
            return ops.reduce_sum(ops.matmul(x, p["w"]))

        report = grad_check(frag, params)
        assert report.empty
        assert report.samples == 0

    def test_cross_attention_block(self):
        """Query/key/value/output projections + masked softmax, rel error < 1e-3."""
        rng = np.random.default_rng(2)
        heads, dh, m, d_cond = 2, 4, 5, 6
        c = heads * dh
        params = {
            "q": Tensor(rng.normal(0, 0.4, (c, c)), trainable=True),
            "k": Tensor(rng.normal(0, 0.4, (d_cond, c)), trainable=True),
            "v": Tensor(rng.normal(0, 0.4, (d_cond, c)), trainable=True),
            "o": Tensor(rng.normal(0, 0.4, (c, c)), trainable=True),
        }
        x = Tensor(rng.normal(0, 1, (3, c)))  # 3 query positions
        cond = Tensor(rng.normal(0, 1, (m, d_cond)))
        mask = np.array([True, True, True, False, False])

        def frag(p):
            q = ops.transpose(ops.reshape(ops.matmul(x, p["q"]), (3, heads, dh)), (1, 0, 2))
            k = ops.transpose(ops.reshape(ops.matmul(cond, p["k"]), (m, heads, dh)), (1, 0, 2))
            v = ops.transpose(ops.reshape(ops.matmul(cond, p["v"]), (m, heads, dh)), (1, 0, 2))
            scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 2, 1))), dh**-0.5)
            attn = ops.softmax(scores, mask=mask[None, None, :])
            ctx = ops.reshape(ops.transpose(ops.matmul(attn, v), (1, 0, 2)), (3, c))
            out = ops.matmul(ctx, p["o"])
            return ops.reduce_mean(ops.mul(out, out))

        report = grad_check(frag, params, samples_per_param=5)
        assert report.max_rel_error < 1e-3

    def test_report_table_formats(self):
        params = {"w": Tensor(np.ones((2, 2)), trainable=True)}
        x = Tensor(np.ones((1, 2)))

        def frag(p):
            return ops.reduce_sum(ops.matmul(x, p["w"]))

        table = grad_check(frag, params).format_table()
        assert "w" in table and "OVERALL" in table
