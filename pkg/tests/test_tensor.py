import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cefusion import tensor as tc
from cefusion.errors import ContractError, DimensionError, LabelError, NumericError, ParameterError
from cefusion.tensor import Graph, Tensor, backward, grad_check


def matmul_oracle(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += float(a[i, k]) * float(b[k, j])
    return out


def conv_oracle(x, w, dilation):
    T, c_in = x.shape
    k, _, c_out = w.shape
    out = np.zeros((T, c_out))
    for t in range(T):
        for j in range(k):
            src = t - (k - 1 - j) * dilation
            if src < 0:
                continue
            for c in range(c_in):
                for o in range(c_out):
                    out[t, o] += float(x[src, c]) * float(w[j, c, o])
    return out


def softmax_oracle(row):
    m = max(row)
    e = [math.exp(float(v) - m) for v in row]
    s = math.fsum(e)
    return [v / s for v in e]


# -- matmul ---------------------------------------------------------------------

def test_matmul_identity():
    out = tc.matmul(Tensor(np.eye(2)), Tensor([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_row_times_column():
    assert tc.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 5))
    out = tc.matmul(Tensor(a), Tensor(b))
    np.testing.assert_allclose(out.data, matmul_oracle(a.astype(np.float32), b.astype(np.float32)), atol=1e-6)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_rule():
    rng = np.random.default_rng(1)
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    with Graph() as g:
        loss = tc.tsum(tc.matmul(a, b))
    backward(g, loss)
    ones = np.ones((3, 2), dtype=np.float32)
    np.testing.assert_allclose(a.grad, ones @ b.data.T, rtol=1e-6)
    np.testing.assert_allclose(b.grad, a.data.T @ ones, rtol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
def test_matmul_associative(m, k, n, p, seed):
    rng = np.random.default_rng(seed)
    a, b, c = (Tensor(rng.uniform(-1, 1, s)) for s in ((m, k), (k, n), (n, p)))
    left = tc.matmul(tc.matmul(a, b), c).data
    right = tc.matmul(a, tc.matmul(b, c)).data
    np.testing.assert_allclose(left, right, atol=1e-4)


# -- conv1d_causal ----------------------------------------------------------------

def test_conv_identity_kernel():
    x = Tensor([[1.0], [-2.0], [3.5]])
    out = tc.conv1d_causal(x, Tensor([[[1.0]]]), dilation=1)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_causal_pair_sums():
    out = tc.conv1d_causal(Tensor([[1.0], [2.0], [3.0]]), Tensor(np.ones((2, 1, 1))), dilation=1)
    assert out.data.ravel().tolist() == [1.0, 3.0, 5.0]


def test_conv_matches_nested_loop_oracle():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((7, 3)).astype(np.float32)
    w = rng.standard_normal((3, 3, 4)).astype(np.float32)
    out = tc.conv1d_causal(Tensor(x), Tensor(w), dilation=2)
    assert out.shape == (7, 4)
    np.testing.assert_allclose(out.data, conv_oracle(x, w, 2), atol=1e-6)


@pytest.mark.parametrize("bad", [0, -1, 1.5, True])
def test_conv_rejects_bad_dilation(bad):
    with pytest.raises(ParameterError):
        tc.conv1d_causal(Tensor(np.ones((3, 1))), Tensor(np.ones((2, 1, 1))), dilation=bad)


@pytest.mark.parametrize("t", [0, 3, 6])
def test_conv_causality_exact(t):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((7, 2))
    w = Tensor(rng.standard_normal((3, 2, 2)))
    base = tc.conv1d_causal(Tensor(x), w, dilation=2).data
    x2 = x.copy()
    x2[t] += 10.0
    moved = tc.conv1d_causal(Tensor(x2), w, dilation=2).data
    assert np.array_equal(base[:t], moved[:t])
    assert not np.array_equal(base[t], moved[t])


# -- softmax / cross entropy -----------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(tc.softmax(Tensor([0, 0, 0, 0])).data, [0.25] * 4)


@pytest.mark.parametrize("c", [-50.0, 0.0, 3.0, 80.0])
def test_softmax_two_class_analytic(c):
    out = tc.softmax(Tensor([c, c + math.log(3)], dtype=np.float64)).data
    np.testing.assert_allclose(out, [0.25, 0.75], atol=1e-12)


def test_softmax_matches_float64_oracle():
    row = np.random.default_rng(4).standard_normal(5).astype(np.float32) * 3
    np.testing.assert_allclose(tc.softmax(Tensor(row)).data, softmax_oracle(row), atol=1e-6)


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        tc.softmax(Tensor([0.0, np.nan]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-60, 60), min_size=2, max_size=9), st.integers(1, 4))
def test_softmax_rows_sum_to_one(values, rows):
    x = Tensor(np.tile(values, (rows, 1)))
    p = tc.softmax(x, axis=1).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(p >= 0) and np.all(p <= 1)


def test_softmax_interior_values_strictly_between_zero_and_one():
    p = tc.softmax(Tensor(np.random.default_rng(5).uniform(-5, 5, (6, 4))), axis=1).data
    assert np.all((p > 0) & (p < 1))


def test_cross_entropy_uniform_is_log_k():
    loss = tc.cross_entropy(Tensor(np.zeros((5, 7))), [0, 1, 2, 3, 6])
    assert loss.item() == pytest.approx(math.log(7), abs=1e-6)
    assert loss.item() == pytest.approx(1.9459, abs=1e-4)


def test_cross_entropy_confident_prediction():
    logits = np.zeros((3, 4))
    targets = [2, 0, 3]
    logits[np.arange(3), targets] = 20.0
    assert tc.cross_entropy(Tensor(logits), targets).item() < 1e-6


def test_cross_entropy_matches_float64_oracle():
    logits = np.random.default_rng(6).standard_normal((3, 4)).astype(np.float32)
    targets = [1, 3, 0]
    expected = np.mean([-math.log(softmax_oracle(r)[y]) for r, y in zip(logits, targets)])
    assert tc.cross_entropy(Tensor(logits), targets).item() == pytest.approx(expected, abs=1e-5)


def test_cross_entropy_weighted_oracle():
    logits = np.random.default_rng(7).standard_normal((4, 3))
    targets = [0, 2, 2, 1]
    w = [0.5, 2.0, 1.0]
    nll = [-math.log(softmax_oracle(r)[y]) for r, y in zip(logits, targets)]
    expected = sum(w[y] * n for y, n in zip(targets, nll)) / sum(w[y] for y in targets)
    got = tc.cross_entropy(Tensor(logits, dtype=np.float64), targets, w).item()
    assert got == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("value", [1.0, 0.3, 7.0])
def test_cross_entropy_equal_weights_identical_to_unweighted(value):
    logits = Tensor(np.random.default_rng(8).standard_normal((6, 5)))
    targets = [0, 1, 4, 4, 2, 3]
    plain = tc.cross_entropy(logits, targets).data
    weighted = tc.cross_entropy(logits, targets, [value] * 5).data
    assert plain.tobytes() == weighted.tobytes()


def test_cross_entropy_label_error_names_frame():
    with pytest.raises(LabelError, match="frame 2"):
        tc.cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 4])


# -- backward ---------------------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(9).standard_normal((3, 4)), requires_grad=True)
    with Graph() as g:
        loss = x.sum()
    backward(g, loss)
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_quadratic():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Graph() as g:
        loss = (x * x).sum()
    backward(g, loss)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Graph() as g:
        y = tc.scale(x, 2.0)
    with pytest.raises(ContractError):
        backward(g, y)


def test_non_participating_tensor_keeps_zero_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor([5.0, 5.0], requires_grad=True)
    with Graph() as g:
        loss = x.sum()
    backward(g, loss)
    np.testing.assert_array_equal(unused.grad, [0.0, 0.0])


def test_gradient_accumulates_when_reused():
    rng = np.random.default_rng(10)
    w = rng.standard_normal((3, 2))
    xs = rng.standard_normal((4, 3))

    def run(times):
        x = Tensor(xs, requires_grad=True)
        wt = Tensor(w)
        with Graph() as g:
            terms = [tc.matmul(x, wt) for _ in range(times)]
            total = terms[0]
            for t in terms[1:]:
                total = tc.add(total, t)
            loss = total.sum()
        backward(g, loss)
        return x.grad

    np.testing.assert_array_equal(run(2), 2 * run(1))


def test_backward_visits_each_node_once_in_reverse():
    order = []
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Graph() as g:
        a = tc.scale(x, 2.0)
        b = tc.relu(a)
        loss = b.sum()
    for node in g.nodes:
        inner = node.backward
        node.backward = lambda grad, n=node, f=inner: (order.append(n.op), f(grad))[1]
    backward(g, loss)
    assert order == ["sum", "relu", "scale"]


def test_graph_is_topological():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    w = Tensor(np.ones((3, 3)), requires_grad=True)
    with Graph() as g:
        h = tc.relu(tc.matmul(x, w))
        tc.add(h, h).sum()
    produced = set()
    for node in g.nodes:
        for inp in node.inputs:
            assert inp.is_leaf or id(inp) in produced
        produced.add(id(node.output))


def test_no_recording_outside_graph():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = tc.relu(x)
    assert not y.requires_grad and y.is_leaf


def test_deterministic_replay_bit_identical():
    rng = np.random.default_rng(11)
    x, w = Tensor(rng.standard_normal((8, 5))), Tensor(rng.standard_normal((3, 5, 4)))

    def run():
        return tc.softmax(tc.conv1d_causal(x, w, 2), axis=1).data.tobytes()

    assert run() == run()


def test_masked_softmax_zeroes_masked_positions():
    x = Tensor([[1.0, 2.0, 3.0], [0.5, -1.0, 4.0]], requires_grad=True)
    mask = np.array([[True, False, True], [False, False, True]])
    with Graph() as g:
        p = tc.masked_softmax(x, mask)
        loss = tc.mul(p, Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])).sum()
    backward(g, loss)
    assert p.data[0, 1] == 0 and p.data[1, 0] == 0 and p.data[1, 1] == 0
    np.testing.assert_allclose(p.data[0, [0, 2]], softmax_oracle([1.0, 3.0]), rtol=1e-6)
    assert x.grad[0, 1] == 0 and x.grad[1, 0] == 0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_op_boundary_rejects_overflow():
    with pytest.raises(NumericError):
        tc.mul(Tensor([3e38]), Tensor([10.0]))


# -- grad_check -----------------------------------------------------------------------------

def test_grad_check_linear_layer():
    rng = np.random.default_rng(12)
    x = Tensor(rng.standard_normal((5, 4)), dtype=np.float64)
    params = [Tensor(rng.standard_normal((4, 3))), Tensor(rng.standard_normal(3))]
    coef = Tensor(rng.standard_normal((5, 3)), dtype=np.float64)

    def f(ps):
        return tc.mul(tc.add_bias(tc.matmul(x, ps[0]), ps[1]), coef).sum()

    assert grad_check(f, params, n_samples=None) < 1e-6


def test_grad_check_conv_block():
    rng = np.random.default_rng(13)
    x = Tensor(rng.standard_normal((9, 3)), dtype=np.float64)
    # modest weights keep the softmax unsaturated so no gradient is vanishingly small
    params = [Tensor(0.4 * rng.standard_normal((3, 3, 4))), Tensor(0.4 * rng.standard_normal(4)),
              Tensor(0.4 * rng.standard_normal((3, 4, 4)))]
    targets = rng.integers(0, 4, 9)

    def f(ps):
        h = tc.relu(tc.add_bias(tc.conv1d_causal(x, ps[0], 1), ps[1]))
        return tc.cross_entropy(tc.conv1d_causal(h, ps[2], 2), targets)

    assert grad_check(f, params, n_samples=None) < 1e-5


def test_grad_check_attention_helpers():
    rng = np.random.default_rng(14)
    index = rng.integers(0, 6, (4, 5))
    mask = rng.random((4, 5)) > 0.3
    mask[:, 0] = True
    params = [Tensor(rng.standard_normal((4, 3))), Tensor(rng.standard_normal((6, 3))),
              Tensor(rng.standard_normal((6, 3)))]

    def f(ps):
        q, k, v = ps
        p = tc.masked_softmax(tc.rowwise_dot(q, tc.gather_rows(k, index)), mask)
        out = tc.weighted_rows(p, tc.gather_rows(v, index))
        return tc.mul(out, out).sum()

    assert grad_check(f, params, epsilon=1e-4, n_samples=None) < 1e-6


def test_grad_check_detects_a_wrong_gradient():
    x = Tensor([0.3, -1.2, 2.0], requires_grad=True)

    def bad_square(t):
        return tc._record("bad", t.data * t.data, (t,), lambda g: (g * t.data,))  # missing factor 2

    def f(ps):
        return bad_square(ps[0]).sum()

    assert grad_check(f, [x], n_samples=None) > 0.1


def test_grad_check_leaves_params_untouched():
    p = Tensor(np.arange(6.0).reshape(2, 3))
    before = p.data.tobytes()
    grad_check(lambda ps: tc.mul(ps[0], ps[0]).sum(), [p], n_samples=10)
    assert p.data.tobytes() == before
