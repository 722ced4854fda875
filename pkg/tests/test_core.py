import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hybrid_slm.core import ContractError, Graph, ShapeError, Tensor, check_gradients, load_checkpoint, ops, parameter, \
    save_checkpoint
from hybrid_slm.core.checkpoint import MAGIC, CheckpointError, read_tensor, write_tensor


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        out = ops.matmul(Tensor([[1.0, 0], [0, 1]]), Tensor([[3.0, 4], [5, 6]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_row_times_column(self):
        assert ops.matmul(Tensor([[1.0, 2]]), Tensor([[3.0], [4]])).data.tolist() == [[11.0]]

    def test_against_triple_loop(self, rng):
        # small integers keep every partial sum exact, so equality is bitwise
        a = rng.integers(-9, 10, (4, 5)).astype(float)
        b = rng.integers(-9, 10, (5, 3)).astype(float)
        np.testing.assert_array_equal(ops.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b))

    def test_shape_mismatch_names_both(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    @given(arrays(np.int64, (3, 4), elements=st.integers(-50, 50)),
           arrays(np.int64, (4, 2), elements=st.integers(-50, 50)))
    def test_transpose_identity_exact(self, a, b):
        a, b = a.astype(float), b.astype(float)
        lhs = ops.matmul(Tensor(a), Tensor(b)).data.T
        rhs = ops.matmul(Tensor(b.T), Tensor(a.T)).data
        np.testing.assert_array_equal(lhs, rhs)
        np.testing.assert_array_equal(ops.matmul(Tensor(a), Tensor(np.eye(4))).data, a)


class TestBackward:
    def test_sum_gives_ones(self):
        w = parameter(np.arange(4.0).reshape(2, 2), "w")
        with Graph() as g:
            loss = ops.sum(w)
        np.testing.assert_array_equal(g.backward(loss)[w], np.ones((2, 2)))

    def test_hand_derivative(self):
        x = Tensor([[1.0, 2.0]])
        w = parameter([[1.0], [1.0]], "w")
        with Graph() as g:
            r = ops.matmul(x, w) - Tensor([[4.0]])
            loss = ops.sum(ops.mul(r, r))
        np.testing.assert_allclose(g.backward(loss)[w].ravel(), [-2.0, -4.0])

    def test_nonscalar_loss_rejected(self):
        w = parameter(np.ones((2, 2)))
        with Graph() as g:
            y = ops.scale(w, 2.0)
        with pytest.raises(ContractError):
            g.backward(y)

    def test_deterministic(self, rng):
        w = parameter(rng.standard_normal((5, 4)), "w")
        x = Tensor(rng.standard_normal((3, 4)))

        def run():
            with Graph() as g:
                loss = ops.sum(ops.softmax_rows(ops.linear(x, w)) * ops.softmax_rows(ops.linear(x, w)))
            return g.backward(loss)[w]
        assert run().tobytes() == run().tobytes()


class TestElementwise:
    def test_softmax_uniform(self):
        np.testing.assert_allclose(ops.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], atol=1e-15)

    def test_rms_norm_constant_row(self):
        out = ops.rms_norm(Tensor([[-2.5] * 6, [0.7] * 6])).data
        np.testing.assert_allclose(out, [[-1.0] * 6, [1.0] * 6], atol=1e-12)

    @pytest.mark.parametrize("op", [ops.softmax_rows, ops.rms_norm, ops.layer_norm])
    def test_zero_length_rows_rejected(self, op):
        with pytest.raises(ContractError):
            op(Tensor(np.zeros((3, 0))))

    @given(arrays(np.float64, (4, 7), elements=st.floats(-30, 30)))
    def test_softmax_rows_sum_to_one(self, x):
        np.testing.assert_allclose(ops.softmax_rows(Tensor(x)).data.sum(-1), 1.0, atol=1e-12)

    @given(arrays(np.float64, (3, 8), elements=st.floats(-10, 10)).filter(lambda a: (np.abs(a).max(-1) > 1e-3).all()))
    def test_rms_norm_unit_rms(self, x):
        out = ops.rms_norm(Tensor(x)).data
        np.testing.assert_allclose(np.sqrt((out ** 2).mean(-1)), 1.0, atol=1e-10)

    def test_add_requires_equal_shapes(self):
        with pytest.raises(ShapeError):
            ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3,))))


UNARY = [ops.exp, ops.sigmoid, ops.silu, ops.softplus, ops.logsigmoid, ops.softmax_rows, ops.rms_norm,
         ops.layer_norm, ops.l2_normalize, lambda x: ops.cumsum(x, 1), lambda x: ops.log(ops.exp(x))]


@pytest.mark.parametrize("fn", UNARY, ids=lambda f: getattr(f, "__name__", "composite"))
def test_unary_gradients(fn, rng):
    x = parameter(rng.uniform(-1, 1, (3, 5)), "x")
    probe = Tensor(rng.standard_normal((3, 5)))
    assert check_gradients(lambda: ops.sum(ops.mul(fn(x), probe)), [x]) <= 1e-4


def test_composite_gradients(rng):
    a = parameter(rng.uniform(-1, 1, (4, 6)), "a")
    b = parameter(rng.uniform(-1, 1, (6, 3)), "b")
    gain = parameter(rng.uniform(0.5, 1.5, (3,)), "g")
    tgt = np.array([0, 2, 1, 1])

    def loss():
        h = ops.mul_channels(ops.rms_norm(ops.matmul(a, b)), gain)
        return ops.cross_entropy(h, tgt)
    assert check_gradients(loss, [a, b, gain]) <= 1e-4


def test_unit_lower_solve_gradient(rng):
    low = np.tril(rng.uniform(-0.5, 0.5, (5, 5)), -1)
    a = parameter(low + np.eye(5), "a")
    b = parameter(rng.uniform(-1, 1, (5, 2)), "b")
    mask = Tensor(np.tril(np.ones((5, 5)), -1))
    eye = Tensor(np.eye(5))
    assert check_gradients(lambda: ops.sum(ops.unit_lower_solve(ops.mul(a, mask) + eye, b)), [a, b]) <= 1e-4


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        params = {"embed": rng.standard_normal((5, 3)), "L0.wq": rng.standard_normal((2, 2)).astype(np.float32),
                  "scalar": np.array(3.5)}
        save_checkpoint(tmp_path, params)
        back = load_checkpoint(tmp_path)
        assert set(back) == set(params)
        for k, v in params.items():
            assert back[k].dtype == v.dtype
            np.testing.assert_array_equal(back[k], v)

    def test_header_layout(self, tmp_path):
        write_tensor(tmp_path / "t.slmf", np.arange(6.0).reshape(2, 3))
        raw = (tmp_path / "t.slmf").read_bytes()
        assert raw[:4] == MAGIC
        assert int.from_bytes(raw[4:8], "little") == 1
        assert int.from_bytes(raw[8:12], "little") == 2
        assert int.from_bytes(raw[12:20], "little") == 2 and int.from_bytes(raw[20:28], "little") == 3
        assert len(raw) == 4 + 4 + 4 + 16 + 4 + 6 * 8

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.slmf").write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(CheckpointError):
            read_tensor(tmp_path / "x.slmf")
