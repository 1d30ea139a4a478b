"""Tensor operations: forward values, tape gradients vs finite differences."""

import numpy as np
import pytest

from clipsim import tensor as T
from clipsim.errors import ContractError, ShapeError
from clipsim.gradcheck import finite_difference, max_relative_error
from clipsim.rng import Rng


def t64(arr):
    return T.Tensor(np.asarray(arr, dtype=np.float64))


def tape_grad(build, *arrays):
    """Run `build` on tensors made from `arrays`, return per-input grads."""
    tensors = [t64(a) for a in arrays]
    with T.Tape() as tape:
        out = build(*tensors)
    grads = tape.backward(out)
    return [grads[tape.node_id(t)].data for t in tensors]


class TestForwardValues:
    def test_matmul_identity(self):
        eye = t64(np.eye(2))
        out = T.matmul(eye, eye)
        np.testing.assert_array_equal(out.data, np.eye(2))

    def test_matmul_1x1(self):
        out = T.matmul(t64([[2.0]]), t64([[3.0]]))
        assert out.data[0, 0] == 6.0

    def test_matmul_hand_expansion(self):
        a = t64([[1.0, 2.0], [3.0, 4.0]])
        b = t64([[0.0, 1.0], [1.0, 0.0]])
        np.testing.assert_array_equal(T.matmul(a, b).data,
                                      [[2.0, 1.0], [4.0, 3.0]])

    def test_matmul_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 2))))

    def test_softmax_symmetry(self):
        out = T.softmax(t64([0.0, 0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-12)

    def test_softmax_shift_invariance(self):
        x = np.array([0.3, -1.2, 2.0, 0.0])
        a = T.softmax(t64(x), axis=0).data
        b = T.softmax(t64(x + 17.5), axis=0).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_softmax_quarter_three_quarter(self):
        out = T.softmax(t64([0.0, np.log(3.0)]), axis=0)
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-12)

    def test_softmax_sums_to_one(self):
        rng = Rng(3)
        for _ in range(20):
            x = rng.normal(size=(4, 5)) * 10
            y = T.softmax(t64(x), axis=1).data
            np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)
            assert np.all(y >= 0)

    def test_softmax_empty_axis(self):
        with pytest.raises(ShapeError):
            T.softmax(t64(np.ones((2, 0))), axis=1)

    def test_mse_examples(self):
        a, b = t64([0.0, 1.0]), t64([1.0, 1.0])
        assert T.mse(a, b).item() == pytest.approx(0.5)
        assert T.mse(a, a).item() == 0.0

    def test_l2_normalize_unit_norm(self):
        rng = Rng(5)
        x = rng.normal(size=(3, 8))
        y = T.l2_normalize(t64(x), axis=-1).data
        np.testing.assert_allclose(np.linalg.norm(y, axis=-1), 1.0, atol=1e-9)

    def test_concat_slice_roundtrip(self):
        a, b = t64(np.arange(6).reshape(2, 3)), t64(np.arange(8).reshape(2, 4))
        cat = T.concat([a, b], axis=1)
        back = T.slice_axis(cat, 1, 0, 3)
        np.testing.assert_array_equal(back.data, a.data)

    def test_trailing_broadcast_add(self):
        x = t64(np.ones((2, 3, 4)))
        bias = t64(np.arange(4.0))
        out = T.add(x, bias)
        np.testing.assert_array_equal(out.data[0, 0], 1.0 + np.arange(4.0))
        with pytest.raises(ShapeError):
            T.add(x, t64(np.ones(3)))


class TestTape:
    def test_square_gradient(self):
        x = t64(3.0)
        with T.Tape() as tape:
            y = T.mul(x, x)
        g = tape.backward(y)[tape.node_id(x)]
        assert g.item() == pytest.approx(6.0)

    def test_unreachable_leaf_zero(self):
        x, z = t64(3.0), t64(2.0)
        with T.Tape() as tape:
            tape.watch(z)
            y = T.mul(x, x)
        g = tape.backward(y)[tape.node_id(z)]
        assert g.item() == 0.0

    def test_non_scalar_output_rejected(self):
        x = t64([1.0, 2.0])
        with T.Tape() as tape:
            y = T.add(x, x)
        with pytest.raises(ContractError):
            tape.backward(y)

    def test_matmul_sum_matches_finite_differences(self):
        rng = Rng(11)
        a0 = rng.normal(size=(3, 3))
        b0 = rng.normal(size=(3, 3))

        def build(a, b):
            return T.tensor_sum(T.matmul(a, b))

        ga, gb = tape_grad(build, a0, b0)
        fa = finite_difference(
            lambda a: (a @ b0).sum(), a0)
        fb = finite_difference(
            lambda b: (a0 @ b).sum(), b0)
        assert max_relative_error(ga, fa) <= 1e-6
        assert max_relative_error(gb, fb) <= 1e-6

    def test_replay_is_bit_identical(self):
        rng = Rng(2)
        x = t64(rng.normal(size=(4, 4)))
        with T.Tape() as tape:
            y = T.gelu(T.matmul(x, x))
            out = T.mean(y)
        assert tape.replay()
        assert out.size == 1

    def test_ops_are_pure(self):
        rng = Rng(9)
        x = rng.normal(size=(5, 5))
        a = T.softmax(T.Tensor(x), axis=1).data
        b = T.softmax(T.Tensor(x), axis=1).data
        assert np.array_equal(a, b)

    def test_duplicate_parent_accumulates(self):
        x = t64([1.0, 2.0])
        with T.Tape() as tape:
            cat = T.concat([x, x, x], axis=0)
            out = T.tensor_sum(cat)
        g = tape.backward(out)[tape.node_id(x)]
        np.testing.assert_array_equal(g.data, [3.0, 3.0])


def _op_cases(rng):
    """(name, build, fd_fn) cases reducing each op to a scalar.

    fd_fn is a plain-numpy duplicate of the objective when one is easy
    to write; None means finite differences run on the op graph itself.
    """
    w = rng.normal(size=(4, 4))
    gain = rng.normal(size=(4,)) * 0.2 + 1.0
    bias = rng.normal(size=(4,)) * 0.1
    wt, gt, bt = t64(w), t64(gain), t64(bias)
    cases = [
        ("add", lambda x: T.tensor_sum(T.mul(T.add(x, wt), wt)),
         lambda x: ((x + w) * w).sum()),
        ("sub", lambda x: T.tensor_sum(T.mul(T.sub(x, wt), wt)),
         lambda x: ((x - w) * w).sum()),
        ("mul", lambda x: T.tensor_sum(T.mul(x, x)),
         lambda x: (x * x).sum()),
        ("scale", lambda x: T.tensor_sum(T.scale(x, -2.5)),
         lambda x: (-2.5 * x).sum()),
        ("matmul", lambda x: T.tensor_sum(T.matmul(x, wt)),
         lambda x: (x @ w).sum()),
        ("transpose", lambda x: T.tensor_sum(T.mul(T.transpose(x, (1, 0)), wt)),
         lambda x: (x.T * w).sum()),
        ("reshape", lambda x: T.tensor_sum(T.mul(T.reshape(x, (2, 8)),
                                                 T.reshape(wt, (2, 8)))),
         lambda x: (x.reshape(2, 8) * w.reshape(2, 8)).sum()),
        ("concat", lambda x: T.tensor_sum(T.mul(T.concat([x, x], axis=0),
                                                T.concat([wt, wt], axis=0))),
         lambda x: 2 * (x * w).sum()),
        ("slice", lambda x: T.tensor_sum(T.slice_axis(x, 0, 1, 3)),
         lambda x: x[1:3].sum()),
        ("mean", lambda x: T.mean(x),
         lambda x: x.mean()),
        ("mean_axis", lambda x: T.tensor_sum(T.mul(T.mean(x, axis=0), gt)),
         lambda x: (x.mean(axis=0) * gain).sum()),
        ("sum_axis", lambda x: T.tensor_sum(T.mul(T.tensor_sum(x, axis=1), gt)),
         lambda x: (x.sum(axis=1) * gain).sum()),
        ("softmax", lambda x: T.tensor_sum(T.mul(T.softmax(x, axis=1), wt)),
         lambda x: (np.exp(x - x.max(1, keepdims=True))
                    / np.exp(x - x.max(1, keepdims=True)).sum(1, keepdims=True)
                    * w).sum()),
        ("layer_norm", lambda x: T.tensor_sum(T.mul(T.layer_norm(x, gt, bt), wt)),
         None),
        ("gelu", lambda x: T.tensor_sum(T.mul(T.gelu(x), wt)), None),
        ("l2_normalize", lambda x: T.tensor_sum(T.mul(T.l2_normalize(x, -1), wt)),
         None),
        ("exp", lambda x: T.tensor_sum(T.exp(T.scale(x, 0.3))),
         lambda x: np.exp(0.3 * x).sum()),
        ("log", lambda x: T.tensor_sum(T.log(T.add(T.mul(x, x), wt * 0.0 + 5.0))),
         lambda x: np.log(x * x + 5.0).sum()),
        ("maximum", lambda x: T.tensor_sum(T.maximum(x, 0.1)),
         lambda x: np.maximum(x, 0.1).sum()),
        ("mse", lambda x: T.mse(x, wt),
         lambda x: ((x - w) ** 2).mean()),
        ("bmm", lambda x: T.tensor_sum(
            T.bmm(T.reshape(x, (2, 2, 4)), T.reshape(wt, (2, 4, 2)))),
         None),
    ]
    return cases


class TestGradientsAgainstFiniteDifferences:
    def test_every_op_on_random_tensors(self):
        # 100 random small tensors per op, relative error <= 1e-6 in 64-bit.
        rng = Rng(42)
        cases = _op_cases(rng)
        for name, build, fd_fn in cases:
            for trial in range(100):
                x0 = rng.normal(size=(4, 4)) * 0.8
                if name == "maximum":
                    # keep points away from the hinge at 0.1
                    x0 = x0 + 0.25 * np.sign(x0 - 0.1)

                def scalar(x, _b=build):
                    return _b(T.Tensor(np.asarray(x, np.float64))).item()

                with T.Tape() as tape:
                    xt = T.Tensor(x0)
                    out = build(xt)
                analytic = tape.backward(out)[tape.node_id(xt)].data
                if fd_fn is not None:
                    numeric = finite_difference(fd_fn, x0)
                else:
                    numeric = finite_difference(scalar, x0)
                err = max_relative_error(analytic, numeric)
                assert err <= 1e-6, f"{name} trial {trial}: rel err {err:.3e}"

    def test_layer_norm_affine_gradients(self):
        rng = Rng(7)
        x0 = rng.normal(size=(3, 6))
        w0 = rng.normal(size=(3, 6))
        g0 = rng.normal(size=(6,)) * 0.3 + 1.0
        b0 = rng.normal(size=(6,)) * 0.2
        wt = t64(w0)

        def run(x, g, b):
            with T.Tape() as tape:
                xt, gt, bt = t64(x), t64(g), t64(b)
                out = T.tensor_sum(T.mul(T.layer_norm(xt, gt, bt), wt))
            grads = tape.backward(out)
            return [grads[tape.node_id(t)].data for t in (xt, gt, bt)]

        analytic = run(x0, g0, b0)

        def scalar(x, g, b):
            return (T.layer_norm(t64(x), t64(g), t64(b)).data * w0).sum()

        numeric = [
            finite_difference(lambda v: scalar(v, g0, b0), x0),
            finite_difference(lambda v: scalar(x0, v, b0), g0),
            finite_difference(lambda v: scalar(x0, g0, v), b0),
        ]
        for a, n in zip(analytic, numeric):
            assert max_relative_error(a, n) <= 1e-6
