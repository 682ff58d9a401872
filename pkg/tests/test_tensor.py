import numpy as np
import pytest

import umnmt.tensor as T
from umnmt.errors import NumericsError, ShapeError, UmnmtError


def randp(rng, *shape):
    return T.param(rng.normal(size=shape))


def test_matmul_hand_values():
    a = T.constant([[1.0, 2.0], [3.0, 4.0]])
    b = T.constant([[1.0], [1.0]])
    assert T.matmul(a, b).data.tolist() == [[3.0], [7.0]]


def test_softmax_symmetry_and_rowsums():
    x = T.constant([[0.0, 0.0]])
    assert np.allclose(T.softmax_rows(x).data, [[0.5, 0.5]])
    rng = np.random.default_rng(1)
    y = T.softmax_rows(T.constant(rng.normal(size=(40, 9)) * 20)).data
    assert np.all(y >= 0)
    assert np.max(np.abs(y.sum(axis=1) - 1.0)) < 1e-12


def test_layer_norm_constant_row_is_zero():
    x = T.constant(np.full((3, 5), 2.5))
    g = T.constant(np.ones(5))
    b = T.constant(np.zeros(5))
    out = T.layer_norm_rows(x, g, b).data
    assert np.allclose(out, 0.0)


def test_cross_entropy_nonnegative_and_zero_at_certainty():
    logits = T.constant([[100.0, 0.0, 0.0]])
    loss = T.cross_entropy_rows(logits, [0])
    assert 0.0 <= float(loss.data) < 1e-12
    rng = np.random.default_rng(2)
    loss2 = T.cross_entropy_rows(T.constant(rng.normal(size=(6, 4))), [0, 1, 2, 3, 0, 1])
    assert float(loss2.data) >= 0.0


def test_cross_entropy_ignores_marked_rows():
    logits = T.constant([[0.0, 5.0], [9.0, 0.0]])
    full = T.cross_entropy_rows(logits, [1, 0])
    part = T.cross_entropy_rows(logits, [1, -1], ignore_id=-1)
    hand = -np.log(np.exp(5.0) / (1 + np.exp(5.0)))
    assert np.isclose(float(part.data), hand)
    assert not np.isclose(float(full.data), float(part.data))


def test_backward_sum_gives_ones():
    rng = np.random.default_rng(3)
    w = randp(rng, 4, 3)
    T.backward(T.sum_all(w))
    assert np.array_equal(w.grad, np.ones((4, 3)))


def test_stop_gradient_blocks_and_preserves_values():
    rng = np.random.default_rng(4)
    w = randp(rng, 3, 3)
    v = randp(rng, 3, 3)
    sg = T.stop_gradient(w)
    assert np.array_equal(sg.data, w.data)
    T.backward(T.sum_all(T.mul(sg, v)))
    assert np.array_equal(w.grad, np.zeros_like(w.data))
    assert np.array_equal(v.grad, w.data)


def test_double_backward_raises():
    w = T.param(np.ones((2, 2)))
    loss = T.sum_all(w)
    T.backward(loss)
    with pytest.raises(UmnmtError):
        T.backward(loss)


def test_backward_rejects_nonscalar():
    w = T.param(np.ones((2, 2)))
    with pytest.raises(UmnmtError):
        T.backward(T.scale(w, 2.0))


def test_shape_errors_carry_both_shapes():
    a = T.constant(np.ones((2, 3)))
    b = T.constant(np.ones((2, 3)))
    with pytest.raises(ShapeError) as ei:
        T.matmul(a, b)
    assert "(2, 3)" in str(ei.value)


def test_nonfinite_raises():
    big = T.constant(np.full((2, 2), 1e308))
    with np.errstate(over="ignore"), pytest.raises(NumericsError):
        T.mul(big, big)


def test_grad_check_linear_is_exact():
    rng = np.random.default_rng(5)
    w = randp(rng, 3, 2)
    err = T.grad_check(lambda: T.sum_all(T.scale(w, 3.0)), [w])
    assert err < 1e-9


@pytest.mark.parametrize("op_name", [
    "matmul", "add", "add_bias", "mul", "scale", "transpose", "relu",
    "concat_rows", "slice_rows", "slice_cols", "embedding", "softmax",
    "layer_norm", "dropout", "cross_entropy", "attention", "attention_masked",
])
def test_grad_check_each_op(op_name):
    rng = np.random.default_rng(hash(op_name) % 2**32)
    probe = randp(rng, 5, 4)  # mixes the op output into a scalar

    def finish(t):
        return T.sum_all(T.mul(t, probe)) if t.shape == (5, 4) else T.sum_all(t)

    if op_name == "matmul":
        a, b = randp(rng, 5, 3), randp(rng, 3, 4)
        f = lambda: finish(T.matmul(a, b))
        inputs = [a, b]
    elif op_name == "add":
        a, b = randp(rng, 5, 4), randp(rng, 5, 4)
        f = lambda: finish(T.add(a, b))
        inputs = [a, b]
    elif op_name == "add_bias":
        a, b = randp(rng, 5, 4), T.param(rng.normal(size=4))
        f = lambda: finish(T.add(a, b))
        inputs = [a, b]
    elif op_name == "mul":
        a, b = randp(rng, 5, 4), randp(rng, 5, 4)
        f = lambda: finish(T.mul(a, b))
        inputs = [a, b]
    elif op_name == "scale":
        a = randp(rng, 5, 4)
        f = lambda: finish(T.scale(a, -1.7))
        inputs = [a]
    elif op_name == "transpose":
        a = randp(rng, 4, 5)
        f = lambda: finish(T.transpose(a))
        inputs = [a]
    elif op_name == "relu":
        a = T.param(rng.normal(size=(5, 4)) + np.sign(rng.normal(size=(5, 4))) * 0.5)
        f = lambda: finish(T.relu(a))
        inputs = [a]
    elif op_name == "concat_rows":
        a, b = randp(rng, 2, 4), randp(rng, 3, 4)
        f = lambda: finish(T.concat_rows([a, b]))
        inputs = [a, b]
    elif op_name == "slice_rows":
        a = randp(rng, 8, 4)
        f = lambda: T.sum_all(T.mul(T.slice_rows(a, 2, 7), probe))
        inputs = [a]
    elif op_name == "slice_cols":
        a = randp(rng, 5, 9)
        f = lambda: T.sum_all(T.mul(T.slice_cols(a, 3, 7), probe))
        inputs = [a]
    elif op_name == "embedding":
        table = randp(rng, 6, 4)
        ids = np.array([0, 5, 2, 2, 1])
        f = lambda: T.sum_all(T.mul(T.embedding_lookup(table, ids), probe))
        inputs = [table]
    elif op_name == "softmax":
        a = randp(rng, 5, 4)
        f = lambda: finish(T.softmax_rows(a))
        inputs = [a]
    elif op_name == "layer_norm":
        a = randp(rng, 5, 4)
        g = T.param(rng.normal(size=4))
        b = T.param(rng.normal(size=4))
        f = lambda: finish(T.layer_norm_rows(a, g, b))
        inputs = [a, g, b]
    elif op_name == "dropout":
        a = randp(rng, 5, 4)
        f = lambda: finish(T.dropout(a, 0.4, np.random.default_rng(99)))
        inputs = [a]
    elif op_name == "cross_entropy":
        a = randp(rng, 5, 4)
        tgt = np.array([0, 3, -1, 1, 2])
        f = lambda: T.cross_entropy_rows(a, tgt, ignore_id=-1)
        inputs = [a]
    elif op_name == "attention":
        q, k, v = randp(rng, 4, 6), randp(rng, 10, 6), randp(rng, 10, 6)
        f = lambda: T.sum_all(T.attention(q, k, v, n_heads=2, batch=2))
        inputs = [q, k, v]
    elif op_name == "attention_masked":
        q, k, v = randp(rng, 6, 6), randp(rng, 6, 6), randp(rng, 6, 6)
        causal = np.triu(np.full((3, 3), -1e9), k=1)[None, None]
        f = lambda: T.sum_all(T.attention(q, k, v, n_heads=3, batch=2, mask=causal))
        inputs = [q, k, v]
    err = T.grad_check(f, inputs)
    assert err < 1e-5, f"{op_name}: max rel grad error {err}"


def test_grad_check_softmax_ce_composite():
    rng = np.random.default_rng(6)
    w = randp(rng, 4, 5)
    x = T.constant(rng.normal(size=(6, 4)))
    tgt = np.array([0, 1, 2, 3, 4, -1])

    def f():
        return T.cross_entropy_rows(T.matmul(x, w), tgt, ignore_id=-1)

    assert T.grad_check(f, [w]) < 1e-5


def test_dropout_zero_p_is_identity_and_scaling_preserves_mean():
    x = T.constant(np.ones((50, 40)))
    assert T.dropout(x, 0.0, np.random.default_rng(0)) is x
    y = T.dropout(x, 0.5, np.random.default_rng(1)).data
    assert abs(y.mean() - 1.0) < 0.05


def test_attention_weights_row_stochastic_and_traced():
    rng = np.random.default_rng(7)
    q, k, v = randp(rng, 4, 8), randp(rng, 6, 8), randp(rng, 6, 8)
    rec = []
    T.attention(q, k, v, n_heads=4, batch=2, scores_out=rec)
    w = rec[0]
    assert w.shape == (2, 4, 2, 3)
    assert np.all(w >= 0)
    assert np.max(np.abs(w.sum(axis=-1) - 1.0)) < 1e-9


def test_no_grad_builds_no_nodes():
    w = T.param(np.ones((2, 2)))
    with T.no_grad():
        out = T.scale(w, 2.0)
    assert out.node is None


def test_graph_visits_each_node_once_diamond():
    # diamond: loss = sum(a*b + a*b) reuses the same intermediate twice
    a = T.param(np.full((2, 2), 2.0))
    m = T.scale(a, 3.0)
    loss = T.sum_all(T.add(m, m))
    T.backward(loss)
    assert np.allclose(a.grad, 6.0)
