import numpy as np
import pytest
from hypothesis import given, strategies as st

from wavecompose import tensor as T
from wavecompose.errors import ContractError, DimensionError

from conftest import check_gradients, project

INSTANCES = range(20)


def t(values):
    return T.Tensor(values)


def test_tensor_shape_and_values():
    x = T.Tensor([1, 2, 3, 4, 5, 6], shape=[2, 3])
    assert x.shape == (2, 3)
    assert x.values == [1, 2, 3, 4, 5, 6]
    with pytest.raises(DimensionError):
        T.Tensor([1, 2, 3], shape=[2, 2])


# ---------------------------------------------------------------- conv1d


def test_conv_zero_input_gives_zero(rng):
    k = t(rng.normal(size=(3, 2, 4)))
    assert not T.conv1d(t(np.zeros((2, 7))), k, dilation=2).data.any()


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(3, 9))
    k = t(np.eye(3)[:, :, None])
    np.testing.assert_array_equal(T.conv1d(t(x), k).data, x)


def test_conv_hand_example():
    out = T.conv1d(t([[1.0, 2, 3, 4]]), t([[[1.0, 1]]]), dilation=2)
    assert out.values == [1, 2, 4, 6]


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        T.conv1d(t(np.zeros((2, 5))), t(np.zeros((1, 3, 2))))


def test_conv_batched_matches_loop(rng):
    x = rng.normal(size=(3, 4, 20))
    k = t(rng.normal(size=(5, 4, 3)))
    batched = T.conv1d(t(x), k, dilation=3).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], T.conv1d(t(x[b]), k, dilation=3).data, atol=1e-12)


@pytest.mark.parametrize("exact", [False, True])
def test_conv_causality_bitwise(rng, exact):
    x = rng.normal(size=(3, 40))
    k = t(rng.normal(size=(4, 3, 3)))
    for col in rng.integers(0, 40, size=10):
        y = x.copy()
        y[:, col] += 1.0
        if exact:
            with T.exact_arithmetic():
                a, b = T.conv1d(t(x), k, 4).data, T.conv1d(t(y), k, 4).data
        else:
            a, b = T.conv1d(t(x), k, 4).data, T.conv1d(t(y), k, 4).data
        np.testing.assert_array_equal(a[:, :col], b[:, :col])
        assert np.any(a[:, col:] != b[:, col:])


def test_exact_conv_is_prefix_stable(rng):
    x = rng.normal(size=(6, 50))
    k = t(rng.normal(size=(5, 6, 2)))
    with T.exact_arithmetic():
        full = T.conv1d(t(x), k, dilation=8).data
        for stop in (1, 9, 23, 50):
            np.testing.assert_array_equal(T.conv1d(t(x[:, :stop]), k, dilation=8).data[:, -1],
                                          full[:, stop - 1])


def test_exact_route_close_to_blas(rng):
    x = rng.normal(size=(2, 6, 30))
    k = t(rng.normal(size=(5, 6, 3)))
    fast = T.conv1d(t(x), k, 2).data
    with T.exact_arithmetic():
        exact = T.conv1d(t(x), k, 2).data
    np.testing.assert_allclose(exact, fast, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("seed", INSTANCES)
def test_conv_gradient(seed):
    rng = np.random.default_rng(seed)
    c_in, c_out, width = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 4)
    dilation = int(rng.integers(1, 4))
    causal = bool(seed % 2 == 0)
    x = rng.uniform(-1, 1, size=(c_in, 8))
    k = rng.uniform(-1, 1, size=(c_out, c_in, width))
    b = rng.uniform(-1, 1, size=(c_out,))
    check_gradients(lambda x, k, b: project(T.conv1d(x, k, dilation, causal, bias=b), rng_p(seed)),
                    [x, k, b])


def rng_p(seed):
    # the projection must be identical on every evaluation
    return np.random.default_rng(10_000 + seed)


# ------------------------------------------------------------- pointwise


def test_pointwise_examples():
    assert T.sigmoid(t([0.0])).values == [0.5]
    assert T.tanh(t([0.0])).values == [0.0]
    assert T.relu(t([-3.2])).values == [0.0]


def test_sigmoid_stable_at_extremes():
    out = T.sigmoid(t([-1000.0, 1000.0])).data
    assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[1] == 1.0


@pytest.mark.parametrize("name", ["tanh", "sigmoid", "relu"])
@pytest.mark.parametrize("seed", INSTANCES)
def test_pointwise_gradient(name, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, size=(3, 4))
    if name == "relu":
        x[np.abs(x) < 1e-2] = 0.5  # stay away from the kink
    check_gradients(lambda x: project(T.pointwise(name, x), rng_p(seed)), [x])


# ---------------------------------------------------------------- binary


def test_binary_examples():
    x = t([2.0, 3.0])
    assert T.mul(x, t([0.0, 0.0])).values == [0, 0]
    assert T.add(x, t([0.0, 0.0])).values == [2, 3]
    assert T.mul(x, t([4.0, 5.0])).values == [8, 15]
    with pytest.raises(DimensionError):
        T.add(x, t([1.0, 2.0, 3.0]))


@pytest.mark.parametrize("name", ["add", "mul"])
@pytest.mark.parametrize("seed", INSTANCES)
def test_binary_gradient(name, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1, 1, size=(2, 3, 2))
    check_gradients(lambda a, b: project(T.binary(name, a, b), rng_p(seed)), [a, b])


# ---------------------------------------------------------------- matmul


def test_matmul_examples(rng):
    b = rng.normal(size=(3, 2))
    np.testing.assert_array_equal(T.matmul(t(np.eye(3)), t(b)).data, b)
    assert not T.matmul(t(rng.normal(size=(2, 3))), t(np.zeros((3, 4)))).data.any()
    assert T.matmul(t([[1.0, 2], [3, 4]]), t([[5.0], [6]])).values == [17, 39]
    with pytest.raises(DimensionError):
        T.matmul(t(np.zeros((2, 3))), t(np.zeros((2, 3))))


def test_exact_matmul_column_independent(rng):
    a = rng.normal(size=(7, 33))
    b = rng.normal(size=(33, 12))
    full = T.exact_matmul(a, b)
    for j in range(12):
        np.testing.assert_array_equal(T.exact_matmul(a, b[:, j:j + 1])[:, 0], full[:, j])


@pytest.mark.parametrize("seed", INSTANCES)
def test_matmul_gradient(seed):
    rng = np.random.default_rng(seed)
    m, k, n = rng.integers(1, 5, size=3)
    a, b = rng.uniform(-1, 1, size=(m, k)), rng.uniform(-1, 1, size=(k, n))
    check_gradients(lambda a, b: project(T.matmul(a, b), rng_p(seed)), [a, b])


# ------------------------------------------------------------ reshaping


@pytest.mark.parametrize("seed", INSTANCES)
def test_structural_op_gradients(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, size=(2, 3, 4))
    b = rng.uniform(-1, 1, size=(2, 3, 2))

    def fn(a, b):
        joined = T.concat([a, b], axis=2)
        moved = T.transpose(joined, (2, 0, 1))
        flat = T.reshape(moved, (6, 6))
        return project(T.slice_last(flat, 1, 5), rng_p(seed))

    check_gradients(fn, [a, b])


def test_scale_and_total(rng):
    x = rng.uniform(-1, 1, size=(3, 3))
    check_gradients(lambda x: T.total(T.scale(x, -2.5)), [x])


# ---------------------------------------------------------------- losses


def brute_xent(logits, targets):
    total = 0.0
    for col, target in enumerate(targets):
        column = logits[:, col]
        total -= np.log(np.exp(column[target]) / np.exp(column).sum())
    return total / len(targets)


def test_xent_uniform_is_log_q():
    loss = T.softmax_xent(t(np.zeros((128, 10))), np.arange(10))
    assert abs(float(loss.data) - np.log(128)) < 1e-12


def test_xent_confident_limit():
    logits = np.zeros((5, 3))
    logits[[1, 4, 0], [0, 1, 2]] = 20.0
    assert float(T.softmax_xent(t(logits), [1, 4, 0]).data) < 1e-3


@pytest.mark.parametrize("seed", INSTANCES)
def test_xent_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(4, 3))
    targets = rng.integers(0, 4, size=3)
    assert abs(float(T.softmax_xent(t(logits), targets).data) - brute_xent(logits, targets)) < 1e-10


def test_xent_large_logits_stable():
    logits = np.array([[1000.0, -1000.0], [0.0, 0.0]])
    assert np.isfinite(float(T.softmax_xent(t(logits), [0, 1]).data))


def test_xent_target_out_of_range():
    with pytest.raises(IndexError):
        T.softmax_xent(t(np.zeros((3, 2))), [0, 3])
    with pytest.raises(IndexError):
        T.softmax_xent(t(np.zeros((3, 2))), [-1, 0])


def test_xent_mask_selects_columns(rng):
    logits = rng.normal(size=(2, 5, 6))
    targets = rng.integers(0, 5, size=(2, 6))
    mask = np.zeros((2, 6), dtype=bool)
    mask[0, 2] = mask[1, 4] = True
    expect = (brute_xent(logits[0][:, [2]], targets[0, [2]]) +
              brute_xent(logits[1][:, [4]], targets[1, [4]])) / 2
    assert abs(float(T.softmax_xent(t(logits), targets, mask).data) - expect) < 1e-12


@pytest.mark.parametrize("seed", INSTANCES)
def test_xent_gradient(seed):
    rng = np.random.default_rng(seed)
    logits = rng.uniform(-1, 1, size=(5, 4))
    targets = rng.integers(0, 5, size=4)
    check_gradients(lambda x: T.softmax_xent(x, targets), [logits])


@pytest.mark.parametrize("seed", INSTANCES)
def test_bce_gradient(seed):
    rng = np.random.default_rng(seed)
    logits = rng.uniform(-1, 1, size=(3, 4))
    targets = rng.integers(0, 2, size=(3, 4))
    check_gradients(lambda x: T.sigmoid_bce(x, targets), [logits])


def test_bce_zero_logits_is_log2():
    assert abs(float(T.sigmoid_bce(t(np.zeros((4, 2))), np.ones((4, 2))).data) - np.log(2)) < 1e-15


# ------------------------------------------------------------------ LSTM


@pytest.mark.parametrize("seed", INSTANCES)
def test_lstm_gradient(seed):
    rng = np.random.default_rng(seed)
    steps, batch, n_in, hidden = 4, 2, 3, int(rng.integers(1, 4))
    x = rng.uniform(-1, 1, size=(steps, batch, n_in))
    w = rng.uniform(-1, 1, size=(n_in + hidden, 4 * hidden))
    b = rng.uniform(-1, 1, size=(4 * hidden,))
    check_gradients(lambda x, w, b: project(T.lstm(x, w, b), rng_p(seed)), [x, w, b])


# -------------------------------------------------------------- backward


def test_backward_sum_gives_ones():
    p = T.Parameter("p", T.Tensor(np.arange(6.0), shape=[2, 3]))
    with T.Tape() as tape:
        loss = T.total(p.tensor)
    T.backward(tape, loss, [p])
    np.testing.assert_array_equal(p.grad, np.ones((2, 3)))


def test_backward_quadratic():
    p = T.Parameter("p", T.Tensor([1.0, 2.0]))
    with T.Tape() as tape:
        loss = T.total(T.mul(p.tensor, p.tensor))
    T.backward(tape, loss, [p])
    assert p.grad.tolist() == [2.0, 4.0]


def test_backward_unreached_param_gets_zero():
    p = T.Parameter("p", T.Tensor([1.0]))
    q = T.Parameter("q", T.Tensor([3.0, 4.0]))
    with T.Tape() as tape:
        loss = T.total(p.tensor)
    T.backward(tape, loss, [p, q])
    assert q.grad.tolist() == [0.0, 0.0]


def test_backward_rejects_non_scalar():
    p = T.Parameter("p", T.Tensor([1.0, 2.0]))
    with T.Tape() as tape:
        out = T.tanh(p.tensor)
    with pytest.raises(ContractError):
        T.backward(tape, out)


def test_tape_order_is_topological(rng):
    p = T.Parameter("p", T.Tensor(rng.normal(size=(3,))))
    with T.Tape() as tape:
        T.total(T.mul(T.tanh(p.tensor), T.sigmoid(p.tensor)))
    seen = {id(p.tensor)}
    for node in tape.nodes:
        assert all(id(i) in seen for i in node.inputs if i.requires_grad)
        seen.add(id(node.output))


def test_no_tape_records_nothing(rng):
    p = T.Parameter("p", T.Tensor(rng.normal(size=(3,))))
    out = T.tanh(p.tensor)
    assert T.current_tape() is None and out.shape == (3,)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=12))
def test_forward_deterministic(values):
    x = T.Tensor(values)
    a = T.mul(T.tanh(x), T.sigmoid(x)).data
    b = T.mul(T.tanh(x), T.sigmoid(x)).data
    assert a.tobytes() == b.tobytes()
    assert np.all(np.isfinite(a))


@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 4), st.integers(0, 19))
def test_conv_output_length_preserved(width, dilation, c_out, col):
    x = np.random.default_rng(col).normal(size=(2, 20))
    k = T.Tensor(np.ones((c_out, 2, width)))
    out = T.conv1d(T.Tensor(x), k, dilation)
    assert out.shape == (c_out, 20)
    y = x.copy()
    y[:, col] = 7.0
    assert T.conv1d(T.Tensor(y), k, dilation).data[:, :col].tobytes() == out.data[:, :col].tobytes()
