import math

import numpy as np
import pytest

from ilmalab import numerics as nx
from ilmalab.numerics import DimensionError, Graph, NumericError, Tensor, gradcheck

from conftest import leaf


def grad_of(fn, *inputs):
    for t in inputs:
        t.zero_grad()
    with Graph() as g:
        g.backward(fn())
    return [t.grad for t in inputs]


# -- matmul -------------------------------------------------------------------


def test_matmul_identity():
    eye = np.eye(2)
    assert np.array_equal(nx.matmul(Tensor(eye), Tensor(eye)).data, eye)


def test_matmul_hand_arithmetic():
    out = nx.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
    assert np.array_equal(out.data, [[2.0], [4.0]])


def test_matmul_gradient_matches_finite_differences(rng):
    a, b = leaf(rng.uniform(-2, 2, (3, 4))), leaf(rng.uniform(-2, 2, (4, 2)))
    check = gradcheck(lambda: nx.total(nx.matmul(a, b)), {"a": a, "b": b}, n_samples=20, rng=rng)
    assert check.max_rel_error < 1e-7


def test_matmul_shape_mismatch_reports_both_shapes():
    with pytest.raises(DimensionError) as err:
        nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    assert "(2, 3)" in str(err.value)
    assert str(err.value).count("(2, 3)") == 2


# -- elementwise ----------------------------------------------------------------


def test_tanh_of_zero():
    assert nx.elementwise(Tensor([0.0]), "tanh").data[0] == 0.0


def test_relu_of_negative():
    assert nx.elementwise(Tensor([-1.5]), "relu").data[0] == 0.0


def test_relu_gradient_at_zero_is_zero():
    x = leaf([0.0, 1.0, -1.0])
    (g,) = grad_of(lambda: nx.total(nx.relu(x)), x)
    assert np.array_equal(g, [0.0, 1.0, 0.0])


def test_tanh_gradient_at_point_three():
    x = leaf([0.3])
    (g,) = grad_of(lambda: nx.total(nx.tanh(x)), x)
    h = 1e-5
    numeric = (math.tanh(0.3 + h) - math.tanh(0.3 - h)) / (2 * h)
    assert nx.relative_error(g[0], numeric) < 1e-7


def test_add_broadcasts_bias_vector():
    x, b = leaf(np.ones((2, 3))), leaf([1.0, 2.0, 3.0])
    out = nx.elementwise(x, "add", b)
    assert np.array_equal(out.data, [[2, 3, 4], [2, 3, 4]])
    gx, gb = grad_of(lambda: nx.total(nx.add(x, b)), x, b)
    assert np.array_equal(gb, [2.0, 2.0, 2.0])
    assert np.array_equal(gx, np.ones((2, 3)))


def test_add_rejects_unbroadcastable_shapes():
    with pytest.raises(DimensionError):
        nx.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))


def test_unknown_elementwise_kind():
    with pytest.raises(ValueError):
        nx.elementwise(Tensor([1.0]), "cube")


# -- log_softmax ----------------------------------------------------------------


def test_log_softmax_uniform():
    out = nx.log_softmax(Tensor([0.0, 0.0, 0.0])).data
    assert np.allclose(out, -math.log(3), rtol=0, atol=1e-15)


def test_log_softmax_large_logits_do_not_overflow():
    out = nx.log_softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(0.0, abs=1e-12)
    assert out[1] == pytest.approx(-1000.0, abs=1e-9)


def test_log_softmax_normalizes(rng):
    out = nx.log_softmax(Tensor(rng.normal(size=10))).data
    assert abs(np.exp(out).sum() - 1.0) < 1e-12


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_log_softmax_rejects_non_finite(bad):
    with pytest.raises(NumericError):
        nx.log_softmax(Tensor([0.0, bad]))


# -- gather_rows ----------------------------------------------------------------


def test_gather_all_rows_is_identity(rng):
    w = rng.normal(size=(4, 3))
    assert np.array_equal(nx.gather_rows(Tensor(w), [0, 1, 2, 3]).data, w)


def test_gather_row_zero_of_padded_identity():
    w = np.vstack([np.eye(2), np.zeros((1, 2))])
    assert np.array_equal(nx.gather_rows(Tensor(w), [0]).data, [[1.0, 0.0]])


def test_gather_gradient_scatters_to_selected_rows_only():
    w = leaf(np.arange(12.0).reshape(4, 3))
    ids = [2, 0, 2]
    (g,) = grad_of(lambda: nx.total(nx.gather_rows(w, ids)), w)
    expected = np.zeros((4, 3))
    for i in ids:  # brute-force scatter
        expected[i] += 1.0
    assert np.array_equal(g, expected)


def test_gather_out_of_range():
    with pytest.raises(IndexError):
        nx.gather_rows(Tensor(np.zeros((3, 2))), [3])


# -- every primitive against finite differences ---------------------------------


def _inputs(rng, *shapes):
    return [leaf(rng.uniform(-2, 2, s)) for s in shapes]


PRIMITIVES = {
    "matmul": (lambda a, b: nx.matmul(a, b), [(3, 4), (4, 2)]),
    "batched_matmul": (lambda a, b: nx.matmul(a, b), [(2, 3, 4), (4, 5)]),
    "add": (lambda a, b: nx.add(a, b), [(3, 4), (4,)]),
    "sub": (lambda a, b: nx.sub(a, b), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: nx.mul(a, b), [(3, 4), (3, 1)]),
    "scale": (lambda a: nx.scale(a, -1.7), [(5,)]),
    "tanh": (lambda a: nx.tanh(a), [(6,)]),
    "sigmoid": (lambda a: nx.sigmoid(a), [(6,)]),
    "log_softmax": (lambda a: nx.log_softmax(a), [(3, 5)]),
    "gather_rows": (lambda a: nx.gather_rows(a, [1, 1, 0]), [(3, 4)]),
    "take": (lambda a: nx.take(a, (slice(None), [0, 2, 2])), [(2, 3)]),
    "reshape": (lambda a: nx.reshape(a, (6,)), [(2, 3)]),
    "transpose": (lambda a: nx.transpose(a), [(2, 3)]),
    "stack": (lambda a, b: nx.stack([a, b], axis=1), [(2, 3), (2, 3)]),
    "concat": (lambda a, b: nx.concat([a, b], axis=-1), [(2, 3), (2, 2)]),
    "total_axis": (lambda a: nx.total(a, axis=0), [(3, 2)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name, rng):
    op, shapes = PRIMITIVES[name]
    xs = _inputs(rng, *shapes)
    weights = Tensor(rng.normal(size=op(*xs).shape))  # random projection makes every output count
    check = gradcheck(lambda: nx.total(nx.mul(op(*xs), weights)), xs, n_samples=20, rng=rng)
    assert check.max_rel_error < 1e-6, check


def test_relu_gradient_away_from_kink(rng):
    x = leaf(rng.uniform(0.1, 2, 5) * rng.choice([-1, 1], 5))
    check = gradcheck(lambda: nx.total(nx.relu(x)), [x], rng=rng)
    assert check.max_rel_error < 1e-6


# -- tape behaviour -------------------------------------------------------------


def test_no_graph_means_no_recording():
    x = leaf([1.0])
    nx.tanh(x)  # outside any Graph: nothing recorded, nothing raised


def test_graph_nodes_follow_execution_order():
    x = leaf([0.5, -0.5])
    with Graph() as g:
        y = nx.tanh(x)
        z = nx.total(nx.mul(y, y))
    kinds = [n.kind for n in g.nodes]
    assert kinds == ["tanh", "mul", "sum"]
    assert g.nodes[-1].output is z
    positions = {id(n.output): i for i, n in enumerate(g.nodes)}
    for i, node in enumerate(g.nodes):
        for inp in node.inputs:
            assert positions.get(id(inp), -1) < i


def test_backward_is_bit_identical_across_rebuilds(rng):
    data = rng.normal(size=(4, 3))

    def run():
        w = leaf(data)
        with Graph() as g:
            g.backward(nx.total(nx.log_softmax(nx.tanh(nx.matmul(w, Tensor(np.ones((3, 3))))))))
        return w.grad

    assert np.array_equal(run(), run())


def test_reused_tensor_accumulates_gradient():
    x = leaf([2.0])
    (g,) = grad_of(lambda: nx.total(nx.add(nx.mul(x, x), x)), x)
    assert g[0] == 5.0


def test_grad_matches_data_shape(rng):
    w = leaf(rng.normal(size=(3, 2)))
    (g,) = grad_of(lambda: nx.total(nx.tanh(w)), w)
    assert g.shape == w.shape
