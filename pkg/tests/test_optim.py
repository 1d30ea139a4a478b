"""AdamW update rule and cosine learning-rate schedule."""

import math

import numpy as np
import pytest

from clipsim.errors import ContractError, ShapeError, TrainingError
from clipsim.optim import OptimizerState, adamw_step, cosine_lr
from clipsim.rng import Rng
from clipsim.tensor import Tensor


def make_params(rng, shapes):
    return {name: Tensor(rng.normal(size=s)) for name, s in shapes.items()}


class TestAdamW:
    def test_zero_grad_zero_decay_is_fixed_point(self):
        rng = Rng(1)
        params = make_params(rng, {"w": (3, 2), "b": (2,)})
        state = OptimizerState()
        zeros = {k: Tensor(np.zeros(v.shape)) for k, v in params.items()}
        out = adamw_step(params, zeros, state, lr=0.1)
        for k in params:
            np.testing.assert_array_equal(out[k].data, params[k].data)

    def test_lr_zero_freezes_params_but_advances_moments(self):
        rng = Rng(2)
        params = make_params(rng, {"w": (4,)})
        grads = {"w": Tensor(rng.normal(size=(4,)))}
        state = OptimizerState()
        out = adamw_step(params, grads, state, lr=0.0)
        np.testing.assert_array_equal(out["w"].data, params["w"].data)
        assert state.step == 1
        assert np.any(state.m["w"] != 0)

    def test_first_step_magnitude(self):
        # With g=1 everywhere, bias correction makes m̂=1, v̂=1, so the
        # first update is -lr/(1+eps) ~ -lr.
        params = {"w": Tensor(np.zeros(5))}
        grads = {"w": Tensor(np.ones(5))}
        state = OptimizerState()
        out = adamw_step(params, grads, state, lr=0.01)
        np.testing.assert_allclose(out["w"].data, -0.01, rtol=1e-6)

    def test_decoupled_decay_shrinks_without_gradient(self):
        params = {"w": Tensor(np.full(3, 2.0))}
        state = OptimizerState(weight_decay=0.1)
        out = adamw_step(params, {}, state, lr=0.5)
        np.testing.assert_allclose(out["w"].data, 2.0 * (1 - 0.5 * 0.1),
                                   rtol=1e-6)

    def test_missing_grad_means_zero(self):
        params = {"w": Tensor(np.ones(2)), "frozen": Tensor(np.ones(2))}
        grads = {"w": Tensor(np.ones(2))}
        state = OptimizerState()
        out = adamw_step(params, grads, state, lr=0.1)
        np.testing.assert_array_equal(out["frozen"].data, params["frozen"].data)
        assert np.all(out["w"].data != 1.0)

    def test_shape_mismatch_names_param(self):
        params = {"w": Tensor(np.ones(2))}
        grads = {"w": Tensor(np.ones(3))}
        with pytest.raises(ShapeError, match="'w'"):
            adamw_step(params, grads, OptimizerState(), lr=0.1)

    def test_nonfinite_gradient_rejected(self):
        params = {"w": Tensor(np.ones(2))}
        grads = {"w": Tensor(np.array([1.0, np.nan]))}
        with pytest.raises(TrainingError, match="'w'"):
            adamw_step(params, grads, OptimizerState(), lr=0.1)

    def test_negative_lr_rejected(self):
        with pytest.raises(ContractError):
            adamw_step({}, {}, OptimizerState(), lr=-1e-3)

    def test_matches_reference_loop(self):
        # Independent scalar-by-scalar reimplementation of the update.
        rng = Rng(3)
        p = rng.normal(size=(6,))
        state = OptimizerState(weight_decay=0.01)
        params = {"w": Tensor(p)}
        m = np.zeros(6)
        v = np.zeros(6)
        ref = p.copy()
        for t in range(1, 6):
            g = rng.normal(size=(6,))
            params = adamw_step(params, {"w": Tensor(g)}, state, lr=1e-2)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mhat = m / (1 - 0.9 ** t)
            vhat = v / (1 - 0.999 ** t)
            ref = ref * (1 - 1e-2 * 0.01) - 1e-2 * mhat / (np.sqrt(vhat) + 1e-8)
        np.testing.assert_allclose(params["w"].data, ref, rtol=1e-5)

    def test_converges_on_quadratic(self):
        # min (w - 3)^2; AdamW should get close in a few hundred steps.
        params = {"w": Tensor(np.array([0.0]))}
        state = OptimizerState()
        for step in range(400):
            g = 2.0 * (params["w"].data - 3.0)
            params = adamw_step(params, {"w": Tensor(g)}, state, lr=0.05)
        assert abs(params["w"].item() - 3.0) < 0.05


class TestCosineSchedule:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr(0, 100, 2.0) == pytest.approx(2.0)
        assert cosine_lr(100, 100, 2.0) == pytest.approx(0.0, abs=1e-12)
        assert cosine_lr(50, 100, 2.0) == pytest.approx(1.0)

    def test_monotone_decreasing(self):
        vals = [cosine_lr(s, 40, 1.0) for s in range(41)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_quarter_point(self):
        expect = (1 + math.cos(math.pi / 4)) / 2
        assert cosine_lr(25, 100, 1.0) == pytest.approx(expect)

    def test_bad_arguments(self):
        with pytest.raises(ContractError):
            cosine_lr(0, 0, 1.0)
        with pytest.raises(ContractError):
            cosine_lr(5, 4, 1.0)
        with pytest.raises(ContractError):
            cosine_lr(-1, 4, 1.0)
