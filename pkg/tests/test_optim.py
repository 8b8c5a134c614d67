"""Adam optimizer contracts."""

import numpy as np
import pytest

from latentbridge.numerics import AdamState, Tensor, adam_step
from latentbridge.numerics.tensor import ShapeError


def _params(values):
    return {"w": Tensor(np.asarray(values, dtype=np.float32), trainable=True)}


class TestAdam:
    def test_zero_gradients_leave_params_bitwise_unchanged(self):
        p = _params([1.5, -0.25, 3.0])
        state = AdamState.init(p)
        zeros = {"w": np.zeros(3, dtype=np.float32)}
        p1, s1 = adam_step(p, zeros, state, lr=0.1)
        p2, s2 = adam_step(p1, zeros, s1, lr=0.1)
        assert p2["w"].data.tobytes() == p["w"].data.tobytes()
        # moments decay only: v stays zero, m stays zero from zero gradients
        assert np.all(s2.m["w"] == 0.0) and np.all(s2.v["w"] == 0.0)

    def test_first_step_matches_hand_evaluated_recurrence(self):
        """g=1, lr=0.1, beta1=0.9, beta2=0.999: m_hat=v_hat=1 -> update -0.1."""
        p = _params(0.0)
        p1, s1 = adam_step(
            p, {"w": np.array(1.0, dtype=np.float32)}, AdamState.init(p), lr=0.1
        )
        assert s1.step == 1
        np.testing.assert_allclose(float(p1["w"].data), -0.1, atol=1e-7)

    def test_step_counter_increments_by_one_per_call(self):
        p = _params([2.0])
        state = AdamState.init(p)
        g = {"w": np.array([0.5], dtype=np.float32)}
        _, s1 = adam_step(p, g, state, lr=0.01)
        _, s2 = adam_step(p, g, s1, lr=0.01)
        assert (s1.step, s2.step) == (1, 2)

    def test_shape_mismatch_rejected(self):
        p = _params([1.0, 2.0])
        with pytest.raises(ShapeError):
            adam_step(p, {"w": np.zeros(3, dtype=np.float32)}, AdamState.init(p), lr=0.1)

    def test_moment_shapes_match_parameters(self):
        p = {"a": Tensor(np.zeros((2, 3)), trainable=True), "b": Tensor(np.zeros(5), trainable=True)}
        state = AdamState.init(p)
        assert state.m["a"].shape == (2, 3) and state.v["b"].shape == (5,)

    def test_inputs_not_mutated(self):
        p = _params([1.0])
        state = AdamState.init(p)
        before = p["w"].data.tobytes()
        adam_step(p, {"w": np.array([1.0], dtype=np.float32)}, state, lr=0.1)
        assert p["w"].data.tobytes() == before
        assert state.step == 0
