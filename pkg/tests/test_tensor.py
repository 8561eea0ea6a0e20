import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from safekd import tensor as T
from safekd.tensor import ContractViolation, NumericOverflowError, ParamVector, Tape

from oracles import central_gradient, dense_hessian, max_rel_err, np_softmax


def test_add_matmul_relu_examples():
    assert np.array_equal(T.add([1.0, 2.0], [3.0, 4.0]).data, [4.0, 6.0])
    a = np.random.default_rng(0).standard_normal((3, 5))
    assert np.array_equal(T.matmul(np.eye(3), a).data, a)
    assert np.array_equal(T.relu([-1.0, 0.0, 2.0]).data, [0.0, 0.0, 2.0])


def test_forward_op_dispatch_and_tracking():
    tape = Tape()
    x = tape.watch([1.0, -2.0])
    y = T.forward_op("relu", [x])
    assert y.tracked and y.tape is tape
    z = T.forward_op("add", [np.ones(2), np.ones(2)])
    assert not z.tracked
    with pytest.raises(ContractViolation, match="unknown op"):
        T.forward_op("conv", [x])


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ContractViolation, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(np.ones((2, 3)), np.ones((4, 5)))
    with pytest.raises(ContractViolation, match=r"\(2, 3\).*\(2,\)"):
        T.add(np.ones((2, 3)), np.ones(2))


def test_bias_broadcasts_over_batch_only():
    out = T.add(np.zeros((4, 3)), np.arange(3.0))
    assert np.array_equal(out.data, np.tile(np.arange(3.0), (4, 1)))


def test_checked_mode_rejects_non_finite():
    with pytest.raises(NumericOverflowError):
        T.Tensor([1.0, np.nan])
    with pytest.raises(NumericOverflowError):
        T.exp([1000.0])
    with T.checked(False):
        assert np.isinf(T.exp([1000.0]).data[0])
    assert T.is_checked()


def test_backward_sum_gives_ones():
    tape = Tape()
    theta = tape.watch(np.arange(5.0))
    g = T.backward(tape, T.sum_(theta))
    assert np.array_equal(g[theta.node], np.ones(5))


def test_backward_half_square_norm():
    tape = Tape()
    theta = tape.watch([3.0, 4.0])
    g = T.backward(tape, T.scale(T.sum_(T.mul(theta, theta)), 0.5))
    assert np.array_equal(g[theta.node], [3.0, 4.0])


def test_backward_rejects_non_scalar_root():
    tape = Tape()
    theta = tape.watch([1.0, 2.0])
    with pytest.raises(ContractViolation, match="scalar"):
        T.backward(tape, T.mul(theta, theta))


def test_untouched_leaves_get_zero_gradient():
    tape = Tape()
    a = tape.watch([1.0, 2.0])
    b = tape.watch(np.ones((2, 2)))
    g = T.backward(tape, T.sum_(a))
    assert np.array_equal(g[b.node], np.zeros((2, 2)))


def _ce_of_softmax(W, x, y):
    return -np.log(np_softmax(W @ x)[y])


def test_cross_entropy_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    W = rng.standard_normal((4, 3))
    x = rng.standard_normal(3)
    y = 2
    tape = Tape()
    w = tape.watch(W)
    z = T.transpose(T.matmul(w, x[:, None]))  # (1, 4)
    loss = T.neg(T.sum_(T.pick(T.log_softmax(z), [y])))
    got = T.backward(tape, loss)[w.node]
    want = central_gradient(lambda m: _ce_of_softmax(m, x, y), W)
    assert max_rel_err(got, want) <= 1e-5


def _mlp_loss_tensor(params, x, y):
    h = T.relu(T.add(T.matmul(x, params["w1"]), params["b1"]))
    z = T.add(T.matmul(h, params["w2"]), params["b2"])
    return T.neg(T.mean(T.pick(T.log_softmax(z), y)))


def _mlp_loss_numpy(params, x, y):
    h = np.maximum(x @ params["w1"] + params["b1"], 0)
    p = np_softmax(h @ params["w2"] + params["b2"])
    return float(np.mean(-np.log(p[np.arange(len(y)), y])))


def _random_mlp(seed, d=3, hidden=4, c=3, batch=5):
    rng = np.random.default_rng(seed)
    params = {
        "w1": rng.standard_normal((d, hidden)),
        "b1": rng.standard_normal(hidden) * 0.1,
        "w2": rng.standard_normal((hidden, c)),
        "b2": rng.standard_normal(c) * 0.1,
    }
    return ParamVector(params), rng.standard_normal((batch, d)), rng.integers(0, c, batch)


def test_gradient_check_over_100_seeded_models():
    worst = 0.0
    for seed in range(100):
        theta, x, y = _random_mlp(seed)
        _, g = T.value_and_grad(lambda p: _mlp_loss_tensor(p, x, y), theta)
        want = central_gradient(
            lambda flat: _mlp_loss_numpy(theta.unflatten(flat).segments, x, y), theta.flatten()
        )
        worst = max(worst, max_rel_err(g.flatten(), want))
    assert worst <= 1e-5


def test_backward_is_linear():
    theta, x, y = _random_mlp(3)
    a, b = 0.7, -2.5

    def l1(p):
        return _mlp_loss_tensor(p, x, y)

    def l2(p):
        return T.sum_(T.mul(p["w1"], p["w1"]))

    _, g1 = T.value_and_grad(l1, theta)
    _, g2 = T.value_and_grad(l2, theta)
    _, g = T.value_and_grad(lambda p: T.add(T.scale(l1(p), a), T.scale(l2(p), b)), theta)
    np.testing.assert_allclose(g.flatten(), a * g1.flatten() + b * g2.flatten(),
                               rtol=0, atol=1e-12)


def test_tape_determinism():
    theta, x, y = _random_mlp(11)
    _, g1 = T.value_and_grad(lambda p: _mlp_loss_tensor(p, x, y), theta)
    _, g2 = T.value_and_grad(lambda p: _mlp_loss_tensor(p, x, y), theta)
    assert g1.flatten().tobytes() == g2.flatten().tobytes()


def test_tape_is_topologically_ordered():
    theta, x, y = _random_mlp(5)
    tape = Tape()
    params = {k: tape.watch(v, k) for k, v in theta.segments.items()}
    _mlp_loss_tensor(params, x, y)
    for k, node in enumerate(tape.nodes):
        assert all(p < k for p in node.parents)


def test_backward_visits_each_node_once():
    calls = []
    tape = Tape()
    a = tape.watch([1.0, 2.0])
    b = T.mul(a, a)
    c = T.add(b, b)
    root = T.sum_(T.add(c, b))
    for node in tape.nodes:
        if node.vjp is not None:
            inner = node.vjp
            node.vjp = (lambda g, _f=inner, _n=node: calls.append(id(_n)) or _f(g))
    g = T.backward(tape, root)
    assert len(calls) == len(set(calls)) == len(tape.nodes) - 1
    assert np.array_equal(g[a.node], 6 * np.array([1.0, 2.0]))


@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e6, 1e6)),
       arrays(np.float64, (2, 3), elements=st.floats(-1e6, 1e6)))
@settings(max_examples=50, deadline=None)
def test_flatten_unflatten_roundtrip(a, b):
    pv = ParamVector({"a": a, "b": b})
    flat = pv.flatten()
    back = pv.unflatten(flat)
    assert back.flatten().tobytes() == flat.tobytes()
    assert back["b"].shape == (2, 3)
    assert pv.total_len == a.size + 6


def test_unflatten_rejects_wrong_length():
    pv = ParamVector({"a": np.zeros(3)})
    with pytest.raises(ContractViolation):
        pv.unflatten(np.zeros(4))


def quadratic_loss(A):
    """theta -> theta^T A theta / 2 on the tape."""
    def loss(p):
        row = T.reshape(p["theta"], (1, -1))
        return T.scale(T.sum_(T.mul(T.matmul(row, A), row)), 0.5)
    return loss


def test_hvp_quadratic_exact():
    A = np.diag([1.0, 2.0])
    theta = ParamVector({"theta": np.array([0.3, -1.2])})
    hv = T.hvp(quadratic_loss(A), theta, ParamVector({"theta": np.array([1.0, 1.0])}))
    np.testing.assert_allclose(hv["theta"], [1.0, 2.0], rtol=0, atol=1e-10)


def test_hvp_zero_vector_short_circuits():
    calls = []

    def loss(p):
        calls.append(1)
        return T.sum_(p["theta"])

    theta = ParamVector({"theta": np.ones(3)})
    hv = T.hvp(loss, theta, ParamVector({"theta": np.zeros(3)}))
    assert np.array_equal(hv["theta"], np.zeros(3)) and not calls


def _tiny_mlp(seed):
    # 2 -> 2 -> 2 relu net: w1 (4) + b1 (2) + w2 (4) = 10 parameters
    rng = np.random.default_rng(seed)
    theta = ParamVector({"w1": rng.standard_normal((2, 2)), "b1": rng.standard_normal(2),
                         "w2": rng.standard_normal((2, 2))})
    x = rng.standard_normal((6, 2))
    y = rng.integers(0, 2, 6)
    return theta, x, y


def _tiny_loss_tensor(x, y):
    def loss(p):
        h = T.relu(T.add(T.matmul(x, p["w1"]), p["b1"]))
        return T.neg(T.mean(T.pick(T.log_softmax(T.matmul(h, p["w2"])), y)))
    return loss


def _tiny_loss_numpy(theta, x, y):
    def f(flat):
        p = theta.unflatten(flat)
        h = np.maximum(x @ p["w1"] + p["b1"], 0)
        q = np_softmax(h @ p["w2"])
        return float(np.mean(-np.log(q[np.arange(len(y)), y])))
    return f


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_hvp_matches_dense_hessian(seed):
    theta, x, y = _tiny_mlp(seed)
    pre = x @ theta["w1"] + theta["b1"]
    assert np.abs(pre).min() > 1e-2  # keep finite differences away from relu kinks
    loss = _tiny_loss_tensor(x, y)
    _, g = T.value_and_grad(loss, theta)
    got = T.hvp(loss, theta, g).flatten()
    H = dense_hessian(_tiny_loss_numpy(theta, x, y), theta.flatten())
    want = H @ g.flatten()
    assert theta.total_len == 10
    assert np.linalg.norm(got - want) / np.linalg.norm(want) <= 1e-3
