import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradcheck import OP_CASES, TOL, run_op_trials
from opensd import tensor as T
from opensd.tensor import (
    Adam,
    CheckpointError,
    NonFiniteError,
    Tensor,
    dump_checkpoint,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
)


def test_matmul_identity():
    a = np.random.default_rng(0).normal(size=(2, 3))
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(a)).data, a)


def test_matmul_hand_example():
    out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[0], [1]]))
    assert out.data.tolist() == [[2.0], [4.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_sum_gradient_is_b_transpose():
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = rng.normal(size=(4, 2))
    T.tsum(T.matmul(a, Tensor(b))).backward()
    assert np.allclose(a.grad, np.ones((3, 2)) @ b.T)


def test_softmax_examples():
    assert np.allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, 1 / 3)
    big = T.softmax(Tensor([1000.0, 0.0])).data
    assert abs(big[0] - 1) < 1e-12 and abs(big[1]) < 1e-12
    v = T.softmax(Tensor(np.random.default_rng(2).normal(size=5))).data
    assert abs(v.sum() - 1) < 1e-12


def test_masked_softmax_exact_zero_and_all_true_identity():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 6))
    mask = rng.random((4, 6)) < 0.5
    mask[:, 0] = True
    out = T.masked_softmax(Tensor(x), mask).data
    assert np.all(out[~mask] == 0.0)
    assert np.allclose(out.sum(-1), 1, atol=1e-12)
    full = T.masked_softmax(Tensor(x), np.ones_like(mask)).data
    assert np.array_equal(full, T.softmax(Tensor(x)).data)


def test_masked_softmax_rejects_empty_rows():
    with pytest.raises(ValueError):
        T.masked_softmax(Tensor(np.zeros((2, 3))), np.zeros((2, 3), bool))


def test_sigmoid_and_cosine():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5
    v = Tensor([0.3, -1.2, 2.0])
    assert abs(T.cosine(v, v).item() - 1) < 1e-12
    assert T.cosine(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0
    with pytest.raises(ValueError):
        T.cosine(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


def test_backward_examples():
    x = Tensor(np.zeros((2, 3, 2)), requires_grad=True)
    T.tsum(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 3, 2)))
    y = Tensor(0.0, requires_grad=True)
    T.sigmoid(y).backward()
    assert y.grad == 0.25


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2).backward()


def test_backward_accumulates_until_zeroed():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.tsum(x * x).backward()
    T.tsum(x * x).backward()
    assert np.array_equal(x.grad, 4 * x.data)
    x.zero_grad()
    T.tsum(x * x).backward()
    assert np.array_equal(x.grad, 2 * x.data)


def test_shared_subexpression_matches_unrolled_graph():
    rng = np.random.default_rng(4)
    data = rng.normal(size=4)
    x = Tensor(data, requires_grad=True)
    s = T.tanh(x)
    T.tsum(s * s + s).backward()
    x2 = Tensor(data, requires_grad=True)
    s1, s2, s3 = T.tanh(x2), T.tanh(x2), T.tanh(x2)
    T.tsum(s1 * s2 + s3).backward()
    assert np.allclose(x.grad, x2.grad, rtol=0, atol=1e-15)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_values_raise():
    with pytest.raises(NonFiniteError):
        T.log(Tensor([0.0]))
    with pytest.raises(NonFiniteError):
        T.exp(Tensor([1e4]))
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_gradients_match_finite_differences(name):
    assert run_op_trials(name, trials=100) < TOL


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50)))
def test_softmax_is_distribution(x):
    out = T.softmax(Tensor(x), axis=-1).data
    assert np.all(out >= 0)
    assert np.allclose(out.sum(-1), 1, atol=1e-10, rtol=0)


def test_layer_norm_statistics():
    x = np.random.default_rng(5).normal(size=(3, 8)) * 4 + 1
    out = T.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    assert np.allclose(out.mean(-1), 0, atol=1e-12)
    assert np.allclose(out.var(-1), 1, atol=1e-4)


def test_bilinear_midpoint():
    value = Tensor(np.array([[0.0, 1.0], [2.0, 3.0]])[:, :, None])
    out = T.bilinear_sample(value, Tensor([[0.5, 0.5]]))
    assert out.data[0, 0] == 1.5


def test_bilinear_clamps_to_border():
    value = Tensor(np.arange(6.0).reshape(2, 3, 1))
    out = T.bilinear_sample(value, Tensor([[-5.0, -5.0], [10.0, 10.0]])).data[:, 0]
    assert out.tolist() == [0.0, 5.0]


def test_im2col_centre_column_is_input():
    x = np.random.default_rng(6).normal(size=(3, 4, 2))
    cols = T.im2col3x3(Tensor(x)).data.reshape(3, 4, 9, 2)
    assert np.array_equal(cols[:, :, 4], x)
    assert np.all(cols[0, :, :3] == 0)


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    opt = Adam([p], lr=0.1)
    T.tsum(p * Tensor([3.0, -0.5])).backward()
    opt.step()
    assert np.allclose(p.data, [0.9, -0.9], atol=1e-6)


def test_adam_zero_lr_keeps_parameters():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    before = p.data.copy()
    opt = Adam([p], lr=0.0)
    T.tsum(p * p).backward()
    opt.step()
    assert np.array_equal(p.data, before)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    state = {"b": rng.normal(size=(2, 3)), "a": np.array(1.5), "c.w": rng.normal(size=4)}
    path = tmp_path / "x.osd"
    save_checkpoint(path, state)
    back = load_checkpoint(path)
    assert list(back) == sorted(state)
    for k in state:
        assert np.array_equal(back[k], state[k]) and back[k].shape == np.shape(state[k])


def test_checkpoint_layout():
    blob = dump_checkpoint({"w": np.array([[1.0, 2.0]])})
    assert blob[:4] == b"OSD1"
    name_len = int.from_bytes(blob[4:8], "little")
    assert name_len == 1 and blob[8:9] == b"w"
    assert int.from_bytes(blob[9:13], "little") == 2
    dims = [int.from_bytes(blob[13 + 8 * i:21 + 8 * i], "little") for i in range(2)]
    assert dims == [1, 2]
    assert np.array_equal(np.frombuffer(blob[29:], "<f8"), [1.0, 2.0])


@pytest.mark.parametrize("blob", [b"XXXX", b"OSD1\x05\x00\x00\x00ab", b"OSD1\x01\x00\x00\x00w\x01"])
def test_checkpoint_rejects_corrupt(blob):
    with pytest.raises(CheckpointError):
        parse_checkpoint(blob)
