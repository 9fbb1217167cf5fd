"""Tensor engine tests: op semantics, tape mechanics, finite differences."""

import numpy as np
import pytest

from fieldrank import autodiff as ad
from fieldrank.autodiff import SparseVector, Tape, Tensor, grad_check
from fieldrank.checks import OP_PROGRAMS
from fieldrank.errors import ConfigError


def backward_of(build):
    """Run a scalar program under a tape and propagate gradients."""
    with Tape() as tape:
        loss = build()
    tape.backward(loss)
    return loss


class TestSparseVector:
    def test_entries_round_trip(self):
        sv = SparseVector.from_entries(10, [(3, 1.0), (7, 2.0)])
        assert sv.entries == [(3, 1.0), (7, 2.0)]
        assert sv.to_dense()[3] == 1.0 and sv.to_dense()[7] == 2.0

    def test_rejects_duplicate_indices(self):
        with pytest.raises(ConfigError):
            SparseVector(10, [1, 1], [1.0, 2.0])

    def test_rejects_out_of_range(self):
        with pytest.raises(ConfigError):
            SparseVector(10, [10], [1.0])


class TestSparseEmbed:
    def test_one_hot_selects_row(self):
        emb = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
        out = ad.sparse_embed([SparseVector(4, [2], [1.0])], emb)
        np.testing.assert_array_equal(out.data[0], emb.data[2])

    def test_empty_vector_is_zero_row_and_zero_gradient(self):
        emb = Tensor(np.ones((4, 3)), requires_grad=True)
        with Tape() as tape:
            out = ad.sparse_embed([SparseVector.empty(4)], emb)
            loss = ad.sum_all(out)
        tape.backward(loss)
        np.testing.assert_array_equal(out.data, np.zeros((1, 3)))
        # bitwise zero contribution
        assert np.all(emb.grad == 0.0)

    def test_matches_dense_matmul_oracle(self):
        rng = np.random.default_rng(3)
        emb = Tensor(rng.normal(size=(8, 5)))
        sv = SparseVector(8, [1, 6], [1.0, 2.0])
        out = ad.sparse_embed([sv], emb)
        expected = sv.to_dense() @ emb.data
        np.testing.assert_allclose(out.data[0], expected, rtol=1e-12)
        np.testing.assert_allclose(out.data[0], emb.data[1] + 2.0 * emb.data[6],
                                   rtol=1e-12)

    def test_gradient_only_touches_used_rows(self):
        emb = Tensor(np.ones((6, 2)), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_all(ad.sparse_embed([SparseVector(6, [1, 4], [1.0, 3.0])], emb))
        tape.backward(loss)
        touched = {1, 4}
        for row in range(6):
            if row in touched:
                assert np.any(emb.grad[row] != 0.0)
            else:
                assert np.all(emb.grad[row] == 0.0)

    def test_packed_matches_listwise(self):
        rng = np.random.default_rng(5)
        emb = Tensor(rng.normal(size=(30, 4)))
        vectors = [SparseVector(30, [2, 9], [1.0, 2.0]), SparseVector.empty(30),
                   SparseVector(30, [9], [3.0])]
        ref = ad.sparse_embed(vectors, emb)
        idx = np.concatenate([sv.indices for sv in vectors])
        vals = np.concatenate([sv.values for sv in vectors])
        counts = np.array([sv.indices.size for sv in vectors])
        packed = ad.sparse_embed_packed(idx, vals, counts, emb)
        np.testing.assert_allclose(packed.data, ref.data, rtol=1e-12, atol=1e-15)
        assert np.all(packed.data[1] == 0.0)


class TestConv1d:
    def test_window_one_equals_rowwise_dense(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(5, 3)))
        w = Tensor(rng.normal(size=(1, 3, 4)))
        b = Tensor(rng.normal(size=4))
        conv = ad.conv1d(x, w, b, stride=1)
        dense = ad.dense(x, Tensor(w.data[0]), b)
        np.testing.assert_allclose(conv.data, dense.data, atol=1e-12)

    def test_zero_input_gives_bias_rows(self):
        x = Tensor(np.zeros((6, 2)))
        w = Tensor(np.ones((3, 2, 4)))
        b = Tensor(np.arange(4.0))
        out = ad.conv1d(x, w, b, stride=1)
        for row in out.data:
            np.testing.assert_array_equal(row, b.data)

    def test_matches_nested_loop_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(6, 2))
        w = rng.normal(size=(3, 2, 4))
        b = rng.normal(size=4)
        stride = 2
        out = ad.conv1d(Tensor(x), Tensor(w), Tensor(b), stride=stride)
        assert out.data.shape == (2, 4)
        for p in range(2):
            expected = b.copy()
            for k in range(3):
                for ci in range(2):
                    for co in range(4):
                        expected[co] += x[p * stride + k, ci] * w[k, ci, co]
            np.testing.assert_allclose(out.data[p], expected, rtol=1e-12)

    def test_batched_matches_per_sequence(self):
        rng = np.random.default_rng(8)
        xs = rng.normal(size=(4, 7, 3))
        w = Tensor(rng.normal(size=(3, 3, 2)))
        b = Tensor(rng.normal(size=2))
        batched = ad.conv1d(Tensor(xs), w, b, stride=2)
        for i in range(4):
            single = ad.conv1d(Tensor(xs[i]), w, b, stride=2)
            np.testing.assert_allclose(batched.data[i], single.data, atol=1e-12)

    def test_too_short_input_raises(self):
        with pytest.raises(ConfigError):
            ad.conv1d(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3, 2))),
                      Tensor(np.zeros(2)))


class TestPool:
    def test_single_row_identity(self):
        x = Tensor(np.array([[1.0, -2.0, 3.0]]))
        np.testing.assert_array_equal(ad.pool(x, "max").data, x.data[0])
        np.testing.assert_array_equal(ad.pool(x, "avg").data, x.data[0])

    def test_hand_example(self):
        x = Tensor(np.array([[1.0, 5.0], [3.0, 2.0]]))
        np.testing.assert_array_equal(ad.pool(x, "max").data, [3.0, 5.0])
        np.testing.assert_array_equal(ad.pool(x, "avg").data, [2.0, 3.5])

    def test_constant_rows_avg_equals_max(self):
        x = Tensor(np.tile([2.0, -1.0], (4, 1)))
        np.testing.assert_allclose(ad.pool(x, "avg").data, ad.pool(x, "max").data)

    def test_max_backward_single_row_per_column(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_all(ad.pool(x, "max"))
        tape.backward(loss)
        nonzero_per_col = (x.grad != 0).sum(axis=0)
        np.testing.assert_array_equal(nonzero_per_col, np.ones(4, dtype=int))

    def test_max_tie_breaks_to_lowest_index(self):
        x = Tensor(np.array([[2.0], [2.0], [1.0]]), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_all(ad.pool(x, "max"))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [[1.0], [0.0], [0.0]])

    def test_empty_input_raises(self):
        with pytest.raises(ConfigError):
            ad.pool(Tensor(np.zeros((0, 3))), "max")

    def test_valid_rows_restricts_average(self):
        x = Tensor(np.array([[2.0], [4.0], [100.0]]))
        out = ad.pool(x, "avg", valid_rows=2)
        np.testing.assert_array_equal(out.data, [3.0])


class TestElementwise:
    def test_hadamard_with_ones_is_identity(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]))
        out = ad.hadamard(x, Tensor(np.ones(3)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_tanh_at_zero(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_all(ad.tanh(x))
        assert np.all(loss.data == 0.0)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones(3))

    def test_concat_recovers_parts(self):
        a = Tensor(np.arange(3.0))
        b = Tensor(np.arange(5.0) + 10)
        out = ad.concat([a, b])
        assert out.data.shape == (8,)
        np.testing.assert_array_equal(out.data[:3], a.data)
        np.testing.assert_array_equal(out.data[3:], b.data)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ConfigError):
            ad.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_all(x)
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_hadamard_with_zeros_gives_exact_zero_grad(self):
        x = Tensor(np.arange(4.0), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_all(ad.hadamard(x, Tensor(np.zeros(4))))
        tape.backward(loss)
        assert np.all(x.grad == 0.0)

    def test_gradient_accumulates_over_consumers(self):
        # f(x) = sum(x) + sum(x * c): grad = 1 + c, the duplicated-variable oracle
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        c = Tensor(np.array([3.0, 5.0]))
        with Tape() as tape:
            loss = ad.add(ad.sum_all(x), ad.sum_all(ad.hadamard(x, c)))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, 1.0 + c.data)

    def test_off_path_tensor_gets_exact_zero(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            _unused = ad.tanh(y)
            loss = ad.sum_all(x)
        tape.backward(loss)
        assert np.all(y.grad == 0.0)

    def test_non_scalar_loss_raises(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            out = ad.tanh(x)
        with pytest.raises(ConfigError):
            tape.backward(out)

    def test_foreign_loss_raises(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            ad.sum_all(x)
        with pytest.raises(ConfigError):
            tape.backward(Tensor(np.asarray(1.0)))

    def test_tape_single_use(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_all(x)
        tape.backward(loss)
        with pytest.raises(RuntimeError):
            tape.backward(loss)

    def test_no_tape_means_no_recording(self):
        x = Tensor(np.ones(2), requires_grad=True)
        out = ad.tanh(x)
        assert out.requires_grad  # flag propagates, but nothing recorded
        with Tape() as tape:
            pass
        assert len(tape) == 0


class TestGradCheck:
    def test_linear_function_is_nearly_exact(self):
        x = Tensor(np.arange(4.0), requires_grad=True)
        c = Tensor(np.array([2.0, -1.0, 0.5, 3.0]))
        err = grad_check(lambda: ad.sum_all(ad.hadamard(x, c)), [x])
        assert err < 1e-10

    def test_tanh_chain_depth_five(self):
        x = Tensor(np.array([0.3, -0.7, 1.1]), requires_grad=True)

        def f():
            out = x
            for _ in range(5):
                out = ad.tanh(out)
            return ad.sum_all(out)

        assert grad_check(f, [x]) < 1e-6

    @pytest.mark.parametrize("op_name", sorted(OP_PROGRAMS))
    def test_op_finite_differences_100_trials(self, op_name):
        rng = np.random.default_rng(hash(op_name) % (2 ** 32))
        build = OP_PROGRAMS[op_name]
        worst = 0.0
        for _ in range(100):
            f, params = build(rng)
            worst = max(worst, grad_check(f, params))
        assert worst < 1e-4, f"{op_name}: max relative error {worst}"


class TestStructuralOps:
    def test_slice1d_gradient_is_scattered(self):
        x = Tensor(np.arange(6.0), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_all(ad.slice1d(x, 2, 5))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [0, 0, 1, 1, 1, 0])

    def test_segment_mean_empty_segment_is_exact_zero(self):
        x = Tensor(np.ones((3, 2)), requires_grad=True)
        out = ad.segment_mean_rows(x, [0, 3, 3], [3, 1])
        np.testing.assert_array_equal(out.data[1], np.zeros(2))
        np.testing.assert_allclose(out.data[0], np.ones(2), rtol=1e-15)

    def test_segment_mean_trailing_segments(self):
        x = Tensor(np.arange(8.0).reshape(4, 2))
        out = ad.segment_mean_rows(x, [0, 1, 4, 4], [1, 3, 1])
        np.testing.assert_allclose(out.data[0], x.data[0], rtol=1e-15)
        np.testing.assert_allclose(out.data[1], x.data[1:4].sum(axis=0) / 3.0, rtol=1e-15)
        np.testing.assert_array_equal(out.data[2], np.zeros(2))

    def test_take_rows_accumulates_duplicates(self):
        x = Tensor(np.ones((3, 2)), requires_grad=True)
        with Tape() as tape:
            loss = ad.sum_all(ad.take_rows(x, [1, 1, 2]))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [[0, 0], [2, 2], [1, 1]])

    def test_l2_normalize_rows(self):
        x = Tensor(np.array([[3.0, 4.0], [0.0, 0.0]]))
        out = ad.l2_normalize_rows(x)
        np.testing.assert_allclose(out.data[0], [0.6, 0.8], rtol=1e-15)
        np.testing.assert_array_equal(out.data[1], [0.0, 0.0])
