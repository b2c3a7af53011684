"""Engine semantics: tensors, the tape, and every op's forward values.

Reference values were computed with independent implementations (plain
nested loops, closed forms) and frozen here as literals; the in-test loop
oracles re-derive conv/pool outputs for random shapes so a regression in the
im2col path cannot hide.
"""

import numpy as np
import pytest

from residen import ops
from residen.errors import ConfigError, DimensionError, UsageError
from residen.tensor import ParamSet, Tape, Tensor, backward


def conv_loop_oracle(x, w, b, stride, pad):
    n, c, h, ww_ = x.shape
    k, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (ww_ + 2 * pad - kw) // stride + 1
    out = np.zeros((n, k, oh, ow))
    for ni in range(n):
        for ki in range(k):
            for oi in range(oh):
                for oj in range(ow):
                    patch = xp[ni, :, oi * stride:oi * stride + kh,
                               oj * stride:oj * stride + kw]
                    out[ni, ki, oi, oj] = np.sum(patch * w[ki]) + b[ki]
    return out


class TestTensor:
    def test_wraps_and_casts(self):
        t = Tensor([[1, 2], [3, 4]])
        assert t.dtype == np.float32
        assert t.shape == (2, 2)
        assert Tensor(np.zeros(3, dtype=np.float64)).dtype == np.float64
        assert Tensor(np.zeros(3, dtype=np.int64)).dtype == np.float32

    def test_item_requires_scalar(self):
        assert Tensor(np.array(2.5)).item() == 2.5
        with pytest.raises(UsageError):
            Tensor(np.zeros(3)).item()

    def test_grad_accumulates(self):
        t = Tensor(np.zeros((2, 2)), requires_grad=True)
        t.accumulate_grad(np.ones((2, 2)))
        t.accumulate_grad(np.full((2, 2), 2.0))
        assert np.array_equal(t.grad, np.full((2, 2), 3.0))
        with pytest.raises(UsageError):
            t.accumulate_grad(np.ones(3))

    def test_detach_drops_tracking(self):
        t = Tensor(np.ones(2), requires_grad=True)
        d = t.detach()
        assert not d.requires_grad and np.array_equal(d.data, t.data)


class TestTape:
    def test_backward_walks_in_reverse(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        tape = Tape()
        with tape:
            y = ops.scale(x, 2.0)
            loss = ops.tsum(y)
        backward(tape, loss)
        assert np.array_equal(x.grad, np.full(3, 2.0))

    def test_tape_single_use(self):
        x = Tensor(np.ones(2), requires_grad=True)
        tape = Tape()
        with tape:
            loss = ops.tsum(x)
        backward(tape, loss)
        with pytest.raises(UsageError):
            backward(tape, loss)

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        tape = Tape()
        with tape:
            y = ops.scale(x, 1.0)
        with pytest.raises(UsageError):
            backward(tape, y)

    def test_shared_input_grads_sum(self):
        x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        tape = Tape()
        with tape:
            loss = ops.tsum(ops.residual_add(x, x))
        backward(tape, loss)
        assert np.array_equal(x.grad, np.full(2, 2.0))

    def test_no_tracking_outside_tape(self):
        x = Tensor(np.ones(2), requires_grad=True)
        y = ops.scale(x, 3.0)
        assert not y.requires_grad

    def test_untracked_branch_keeps_grad_none(self):
        x = Tensor(np.ones(2), requires_grad=True)
        z = Tensor(np.ones(2), requires_grad=True)
        tape = Tape()
        with tape:
            ops.scale(z, 2.0)  # recorded but not on the loss path
            loss = ops.tsum(x)
        backward(tape, loss)
        assert np.array_equal(x.grad, np.ones(2))
        assert z.grad is None


class TestConv2d:
    def test_frozen_oracle(self):
        x = Tensor(np.arange(2 * 2 * 4 * 4, dtype=np.float64).reshape(2, 2, 4, 4) / 10.0)
        w = Tensor(np.arange(3 * 2 * 3 * 3, dtype=np.float64).reshape(3, 2, 3, 3) / 100.0 - 0.2)
        b = Tensor(np.array([0.1, -0.2, 0.3]))
        y = ops.conv2d(x, w, b, stride=2, pad=1)
        assert y.shape == (2, 3, 2, 2)
        np.testing.assert_allclose(
            y.data[0, 0], [[-0.384, -0.864], [-1.547, -2.822]], atol=1e-12)
        np.testing.assert_allclose(
            y.data[1, 2], [[9.624, 14.504], [15.381, 23.154]], atol=1e-12)
        assert abs(float(y.data.sum()) - 81.53799999999998) < 1e-10

    @pytest.mark.parametrize("shape,k,kh,stride,pad", [
        ((1, 1, 5, 5), 2, 3, 1, 0),
        ((2, 3, 8, 8), 4, 3, 2, 1),
        ((3, 2, 7, 7), 1, 1, 1, 0),
        ((1, 4, 6, 6), 5, 5, 1, 2),
    ])
    def test_against_loop_oracle(self, rng, shape, k, kh, stride, pad):
        x = rng.normal(size=shape)
        w = rng.normal(size=(k, shape[1], kh, kh))
        b = rng.normal(size=k)
        got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
        want = conv_loop_oracle(x, w, b, stride, pad)
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_all_ones_interior(self):
        y = ops.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))),
                       Tensor(np.zeros(1)), 1, 1)
        assert y.data[0, 0, 2, 2] == 9.0
        assert y.data[0, 0, 0, 0] == 4.0  # corner sees a 2x2 patch

    def test_shape_errors(self):
        with pytest.raises(DimensionError):
            ops.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))),
                       Tensor(np.zeros(1)), 1, 0)
        with pytest.raises(DimensionError):
            ops.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 2, 3, 3))),
                       Tensor(np.zeros(1)), 1, 0)


class TestPooling:
    def test_maxpool_values_and_indices(self):
        x = Tensor(np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4))
        y, idx = ops.maxpool2d(x, 2, 2)
        np.testing.assert_array_equal(y.data[0, 0], [[5.0, 7.0], [13.0, 15.0]])
        assert idx.shape == y.data.shape

    def test_maxpool_gradient_routes_to_argmax(self):
        arr = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
        x = Tensor(arr, requires_grad=True)
        tape = Tape()
        with tape:
            y, _ = ops.maxpool2d(x, 2, 2)
            loss = ops.tsum(y)
        backward(tape, loss)
        want = np.zeros((4, 4))
        want[1, 1] = want[1, 3] = want[3, 1] = want[3, 3] = 1.0
        np.testing.assert_array_equal(x.grad[0, 0], want)

    def test_avgpool_frozen_oracle(self):
        x = Tensor(np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4))
        y = ops.avgpool2d(x, 2, 2)
        np.testing.assert_array_equal(y.data[0, 0], [[2.5, 4.5], [10.5, 12.5]])

    def test_avgpool_gradient_splits(self):
        x = Tensor(np.zeros((1, 1, 4, 4)), requires_grad=True)
        tape = Tape()
        with tape:
            loss = ops.tsum(ops.avgpool2d(x, 2, 2))
        backward(tape, loss)
        np.testing.assert_allclose(x.grad, np.full((1, 1, 4, 4), 0.25))

    def test_pool_rejects_nondivisible(self):
        with pytest.raises((ConfigError, DimensionError)):
            ops.maxpool2d(Tensor(np.ones((1, 1, 5, 5))), 2, 2)
        with pytest.raises((ConfigError, DimensionError)):
            ops.avgpool2d(Tensor(np.ones((1, 1, 5, 5))), 2, 2)


class TestDense:
    def test_values(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        w = Tensor(np.array([[1.0, 0.0, -1.0], [0.5, 2.0, 1.0]]))
        b = Tensor(np.array([0.1, -0.1, 0.0]))
        y = ops.dense(x, w, b)
        np.testing.assert_allclose(y.data, [[2.1, 3.9, 1.0], [5.1, 7.9, 1.0]])

    def test_gradients_match_transpose_rule(self, rng):
        xa = rng.normal(size=(3, 4))
        wa = rng.normal(size=(4, 2))
        ba = rng.normal(size=2)
        ga = rng.normal(size=(3, 2))
        x, w, b = (Tensor(a, requires_grad=True) for a in (xa, wa, ba))
        tape = Tape()
        with tape:
            loss = ops.weighted_sum(ops.dense(x, w, b), ga)
        backward(tape, loss)
        np.testing.assert_allclose(x.grad, ga @ wa.T, atol=1e-12)
        np.testing.assert_allclose(w.grad, xa.T @ ga, atol=1e-12)
        np.testing.assert_allclose(b.grad, ga.sum(axis=0), atol=1e-12)


class TestBatchNorm:
    def test_train_mode_frozen_oracle(self):
        xb = np.array([[[[1.0, 2.0], [3.0, 4.0]], [[0.5, -0.5], [1.5, -1.5]]],
                       [[[2.0, 0.0], [1.0, -1.0]], [[3.0, 1.0], [-2.0, 0.0]]]])
        rm = np.zeros(2)
        rv = np.ones(2)
        out = ops.batchnorm2d(Tensor(xb), Tensor(np.array([1.5, 0.5])),
                              Tensor(np.array([0.1, -0.1])), rm, rv,
                              "train", momentum=0.1, eps=1e-5)
        np.testing.assert_allclose(
            out.data[0, 0],
            [[-0.39999889, 0.59999889], [1.59999667, 2.59999444]], atol=1e-7)
        assert abs(float(out.data.sum())) < 1e-10
        np.testing.assert_allclose(rm, [0.15, 0.025], atol=1e-12)
        # the running buffer tracks the batch (biased) variance
        np.testing.assert_allclose(rv, [1.125, 1.13125], atol=1e-12)

    def test_eval_mode_uses_buffers(self):
        x = Tensor(np.full((1, 1, 2, 2), 3.0))
        rm = np.array([1.0])
        rv = np.array([4.0])
        out = ops.batchnorm2d(Tensor(x.data), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                              rm, rv, "eval", eps=0.0)
        np.testing.assert_allclose(out.data, np.full((1, 1, 2, 2), 1.0))
        np.testing.assert_array_equal(rm, [1.0])  # eval never moves the buffers
        np.testing.assert_array_equal(rv, [4.0])

    def test_train_normalizes_batch(self, rng):
        x = rng.normal(loc=5.0, scale=3.0, size=(4, 3, 6, 6))
        out = ops.batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                              np.zeros(3), np.ones(3), "train")
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.data.std(axis=(0, 2, 3)), 1.0, atol=1e-4)

    def test_rejects_tiny_batch(self):
        with pytest.raises(ConfigError):
            ops.batchnorm2d(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones(1)),
                            Tensor(np.zeros(1)), np.zeros(1), np.ones(1), "train")


class TestActivations:
    def test_swish_frozen_values(self):
        x = Tensor(np.array([-1.0, 0.0, 0.5, 3.0]))
        y = ops.activation("swish", x)
        np.testing.assert_allclose(
            y.data,
            [-0.2689414213699951, 0.0, 0.3112296656009273, 2.8577223804673],
            rtol=1e-6)

    def test_sigmoid_frozen_values(self):
        y = ops.activation("sigmoid", Tensor(np.array([-1.0, 0.0, 3.0])))
        np.testing.assert_allclose(
            y.data, [0.2689414213699951, 0.5, 0.9525741268224334], rtol=1e-6)

    def test_relu(self):
        y = ops.activation("relu", Tensor(np.array([-2.0, 0.0, 2.0])))
        np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])

    def test_linear_passthrough(self):
        x = np.array([1.0, -1.0])
        assert np.array_equal(ops.activation("linear", Tensor(x)).data, x)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            ops.activation("tanhish", Tensor(np.ones(2)))

    def test_sigmoid_saturates_safely(self):
        y = ops.activation("sigmoid", Tensor(np.array([-1000.0, 1000.0])))
        assert np.all(np.isfinite(y.data))
        np.testing.assert_allclose(y.data, [0.0, 1.0], atol=1e-12)


class TestSoftmax:
    def test_frozen_values(self):
        y = ops.softmax(Tensor(np.array([[1.0, 2.0, 3.0]])))
        np.testing.assert_allclose(
            y.data[0], [0.09003057, 0.24472847, 0.66524096], atol=1e-7)

    def test_rows_sum_to_one(self, rng):
        y = ops.softmax(Tensor(rng.normal(size=(5, 9)) * 50))
        np.testing.assert_allclose(y.data.sum(axis=1), 1.0, rtol=1e-6)
        assert np.all(np.isfinite(y.data))


class TestConcatAndAdd:
    def test_concat_channels_order(self, rng):
        a = rng.normal(size=(2, 2, 3, 3))
        b = rng.normal(size=(2, 5, 3, 3))
        y = ops.concat_channels([Tensor(a), Tensor(b)])
        assert y.shape == (2, 7, 3, 3)
        np.testing.assert_array_equal(y.data[:, :2], a)
        np.testing.assert_array_equal(y.data[:, 2:], b)

    def test_concat_channels_gradient_splits(self, rng):
        a = Tensor(rng.normal(size=(1, 2, 2, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 3, 2, 2)), requires_grad=True)
        g = rng.normal(size=(1, 5, 2, 2))
        tape = Tape()
        with tape:
            loss = ops.weighted_sum(ops.concat_channels([a, b]), g)
        backward(tape, loss)
        np.testing.assert_allclose(a.grad, g[:, :2])
        np.testing.assert_allclose(b.grad, g[:, 2:])

    def test_concat_cols(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(3, 6))
        y = ops.concat_cols([Tensor(a), Tensor(b)])
        assert y.shape == (3, 10)
        np.testing.assert_array_equal(y.data[:, :4], a)
        np.testing.assert_array_equal(y.data[:, 4:], b)

    def test_concat_mismatch_errors(self):
        with pytest.raises(DimensionError):
            ops.concat_channels([Tensor(np.ones((1, 2, 3, 3))),
                                 Tensor(np.ones((2, 2, 3, 3)))])
        with pytest.raises(DimensionError):
            ops.concat_cols([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))])

    def test_residual_add(self, rng):
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=(2, 3))
        np.testing.assert_allclose(
            ops.residual_add(Tensor(a), Tensor(b)).data, a + b)
        with pytest.raises(DimensionError):
            ops.residual_add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


class TestDropout:
    def test_eval_is_identity(self, rng):
        x = rng.normal(size=(4, 5))
        y = ops.dropout(Tensor(x), 0.5, "eval", rng_seed=1)
        np.testing.assert_array_equal(y.data, x)

    def test_train_zeroes_and_rescales(self):
        x = np.ones((200, 50))
        y = ops.dropout(Tensor(x), 0.4, "train", rng_seed=3).data
        kept = y != 0.0
        # survivors are scaled by 1/(1-p)
        np.testing.assert_allclose(y[kept], 1.0 / 0.6, rtol=1e-6)
        assert abs(kept.mean() - 0.6) < 0.02

    def test_same_seed_same_mask(self, rng):
        x = rng.normal(size=(8, 8))
        y1 = ops.dropout(Tensor(x), 0.5, "train", rng_seed=42).data
        y2 = ops.dropout(Tensor(x), 0.5, "train", rng_seed=42).data
        y3 = ops.dropout(Tensor(x), 0.5, "train", rng_seed=43).data
        np.testing.assert_array_equal(y1, y2)
        assert not np.array_equal(y1, y3)

    def test_p_zero_identity(self, rng):
        x = rng.normal(size=(3, 3))
        np.testing.assert_array_equal(
            ops.dropout(Tensor(x), 0.0, "train", rng_seed=0).data, x)

    def test_invalid_rate(self):
        with pytest.raises(ConfigError):
            ops.dropout(Tensor(np.ones(2)), 1.0, "train", rng_seed=0)
        with pytest.raises(ConfigError):
            ops.dropout(Tensor(np.ones(2)), -0.1, "train", rng_seed=0)


class TestLosses:
    def test_bce_frozen_oracle_with_clamp(self):
        p = Tensor(np.array([[0.9, 0.1], [1.0, 0.0]]))
        y = np.array([[1.0, 0.0], [0.0, 1.0]])
        loss = ops.bce_multilabel_loss(p, y)
        assert abs(loss.item() - 8.111728083439662) < 1e-6

    def test_bce_perfect_prediction_is_small(self):
        p = Tensor(np.array([[1.0, 0.0]]))
        y = np.array([[1.0, 0.0]])
        assert ops.bce_multilabel_loss(p, y).item() < 1e-5

    def test_crossentropy_frozen_oracle(self):
        logits = Tensor(np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0],
                                  [-1.0, 5.0, 0.5]]))
        loss = ops.crossentropy_loss(logits, np.array([2, 0, 1]))
        assert abs(loss.item() - 0.5065715053870091) < 1e-6

    def test_crossentropy_rejects_bad_labels(self):
        from residen.errors import LabelError

        with pytest.raises(LabelError):
            ops.crossentropy_loss(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_l1l2_penalty_value(self):
        w1 = Tensor(np.array([1.0, -2.0]))
        w2 = Tensor(np.array([[0.5, -0.5]]))
        pen = ops.l1l2_penalty([w1, w2], 0.01, 0.1)
        want = 0.01 * (1 + 2 + 0.5 + 0.5) + 0.1 * (1 + 4 + 0.25 + 0.25)
        assert abs(pen.item() - want) < 1e-6

    def test_l1l2_gradient(self):
        w = Tensor(np.array([2.0, -3.0]), requires_grad=True)
        tape = Tape()
        with tape:
            loss = ops.l1l2_penalty([w], 0.5, 0.25)
        backward(tape, loss)
        # d/dw = l1*sign(w) + 2*l2*w
        np.testing.assert_allclose(w.grad, [0.5 + 1.0, -0.5 - 1.5], atol=1e-12)


class TestFlattenScaleSum:
    def test_flatten_row_major(self):
        x = Tensor(np.arange(12, dtype=np.float64).reshape(2, 3, 2))
        y = ops.flatten(x)
        assert y.shape == (2, 6)
        np.testing.assert_array_equal(y.data[0], [0, 1, 2, 3, 4, 5])

    def test_weighted_sum(self, rng):
        x = rng.normal(size=(3, 3))
        w = rng.normal(size=(3, 3))
        got = ops.weighted_sum(Tensor(x), w).item()
        assert abs(got - float((x * w).sum())) < 1e-10


class TestParamSet:
    def test_duplicate_name_rejected(self):
        ps = ParamSet()
        ps.add("w", Tensor(np.ones(2)))
        with pytest.raises(UsageError):
            ps.add("w", Tensor(np.ones(2)))

    def test_subset_preserves_order_and_flags(self):
        ps = ParamSet()
        ps.add("a", Tensor(np.ones(1)), trainable=True)
        ps.add("b", Tensor(np.ones(1)), trainable=False)
        ps.add("c", Tensor(np.ones(1)), trainable=True)
        sub = ps.subset(["a", "c"])
        assert sub.names() == ["a", "c"]
        assert [n for n, _ in sub.trainable()] == ["a", "c"]
        assert [n for n, _ in ps.trainable()] == ["a", "c"]
