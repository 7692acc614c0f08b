import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from imavae import autodiff as ad
from imavae.errors import EvaluationError, OracleError
from imavae.nets import init_mlp, mlp_forward, mlp_tape


def _scalar_tape(build, n_inputs):
    tape = ad.Tape()
    xs = [tape.input(0.5) for _ in range(n_inputs)]
    tape.output(build(*xs))
    return tape


def test_product_and_identity():
    tape = _scalar_tape(lambda a, b: a * b, 2)
    assert ad.eval_graph(tape, [3.0, 4.0]).tolist() == [12.0]
    tape = _scalar_tape(lambda a: a, 1)
    assert ad.eval_graph(tape, [7.0]).tolist() == [7.0]


def test_square_gradient_and_constant():
    tape = _scalar_tape(lambda a: a ** 2, 1)
    assert ad.grad(tape, [3.0]).tolist() == [6.0]
    tape = ad.Tape()
    x = tape.input(1.0)
    tape.output(tape.const(5.0) + x * 0.0)
    assert ad.grad(tape, [2.0]).tolist() == [0.0]


def test_input_arity_checked():
    tape = _scalar_tape(lambda a, b: a + b, 2)
    with pytest.raises(ValueError):
        ad.eval_graph(tape, [1.0])


def test_nonfinite_names_node():
    tape = _scalar_tape(lambda a: ad.log(a), 1)
    with pytest.raises(EvaluationError, match="log"):
        ad.eval_graph(tape, [-1.0])
    tape = _scalar_tape(lambda a: ad.exp(a), 1)
    with pytest.raises(EvaluationError, match="exp"):
        ad.eval_graph(tape, [1e4])


def test_topological_order():
    tape = ad.Tape()
    x = tape.input(np.ones(3))
    y = ad.tanh(x * 2.0) + ad.softplus(x)
    tape.output(ad.sum(y))
    for i, node in enumerate(tape.nodes):
        assert all(a < i for a in node.args)


def test_eval_deterministic(rng):
    params = init_mlp([3, 5, 3], seed=1)
    tape = ad.Tape()
    tape.output(mlp_tape(params, tape.input(np.zeros(3))))
    p = rng.standard_normal(3)
    a = ad.eval_graph(tape, [p]).tobytes()
    b = ad.eval_graph(tape, [p]).tobytes()
    assert a == b


def test_mlp_forward_matches_hand_rolled():
    # explicit matrix arithmetic, independent of the tape
    W0 = np.array([[0.5, -1.0], [2.0, 0.25], [-0.75, 1.5]])
    b0 = np.array([0.1, -0.2, 0.3])
    W1 = np.array([[1.0, -2.0, 0.5]])
    b1 = np.array([0.05])
    x = np.array([0.3, -0.7])
    h = np.tanh(W0 @ x + b0)
    expected = W1 @ h + b1
    tape = ad.Tape()
    xv = tape.input(x)
    hv = ad.tanh(ad.matmul(tape.const(W0), xv) + tape.const(b0))
    tape.output(ad.matmul(tape.const(W1), hv) + tape.const(b1))
    np.testing.assert_allclose(ad.eval_graph(tape, [x]), expected, rtol=0, atol=1e-15)


def test_linear_map_jacobian_exact(rng):
    W = rng.standard_normal((4, 3))
    tape = ad.Tape()
    x = tape.input(np.zeros(3))
    tape.output(ad.matmul(tape.const(W), x))
    assert np.array_equal(ad.jacobian(tape, [rng.standard_normal(3)]), W)


def test_identity_jacobian():
    tape = ad.Tape()
    x = tape.input(np.zeros(3))
    tape.output(x)
    assert np.array_equal(ad.jacobian(tape, [np.ones(3)]), np.eye(3))


def test_finite_diff_basics():
    J = ad.finite_diff_jacobian(lambda v: 2.0 * v, np.array([0.3]))
    assert abs(J[0, 0] - 2.0) < 1e-9
    J = ad.finite_diff_jacobian(lambda v: np.array([4.0, 1.0]), np.array([0.3, 0.1]))
    assert np.array_equal(J, np.zeros((2, 2)))
    with pytest.raises(ValueError):
        ad.finite_diff_jacobian(lambda v: v, np.zeros(2), step=0.0)


def test_finite_diff_raises_oracle_error():
    with pytest.raises(OracleError):
        ad.finite_diff_jacobian(lambda v: np.log(v), np.array([0.0]))

    def undefined(v):
        raise ZeroDivisionError("pole")
    with pytest.raises(OracleError):
        ad.finite_diff_jacobian(undefined, np.array([1.0]))


def _rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8)


PRIMITIVES = {
    "add": (lambda x: x + x * x, lambda v: v + v * v),
    "mul": (lambda x: x * ad.exp(x), lambda v: v * np.exp(v)),
    "exp": (ad.exp, np.exp),
    "log": (lambda x: ad.log(ad.square(x) + 1.0), lambda v: np.log(v * v + 1.0)),
    "tanh": (ad.tanh, np.tanh),
    "softplus": (ad.softplus, lambda v: np.logaddexp(0.0, v)),
    "sigmoid": (ad.sigmoid, lambda v: 1.0 / (1.0 + np.exp(-v))),
    "square": (ad.square, np.square),
    "reciprocal": (lambda x: ad.reciprocal(ad.square(x) + 0.5), lambda v: 1.0 / (v * v + 0.5)),
    "sleaky": (lambda x: ad.smooth_leaky_relu(x, 0.2),
               lambda v: 0.2 * v + 0.8 * np.logaddexp(0.0, v)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    build, ref = PRIMITIVES[name]
    rng = np.random.default_rng(sum(map(ord, name)))
    for _ in range(100):
        p = rng.uniform(-2.0, 2.0, size=3)
        tape = ad.Tape()
        tape.output(build(tape.input(p)))
        J = ad.jacobian(tape, [p])
        fd = ad.finite_diff_jacobian(ref, p)
        assert _rel_err(J, fd) < 1e-5


def test_relu_gradient_away_from_kink(rng):
    p = rng.uniform(0.1, 2.0, size=6) * rng.choice([-1.0, 1.0], size=6)
    tape = ad.Tape()
    tape.output(ad.relu(tape.input(p)))
    np.testing.assert_array_equal(np.diag(ad.jacobian(tape, [p])), (p > 0).astype(float))


def test_matmul_gradients(rng):
    for _ in range(100):
        A = rng.standard_normal((3, 4))
        x = rng.standard_normal(4)
        tape = ad.Tape()
        a_v = tape.input(A)
        x_v = tape.input(x)
        tape.output(ad.sum(ad.tanh(ad.matmul(a_v, x_v))))
        g = ad.grad(tape, [A, x])
        flat = np.concatenate([A.ravel(), x])
        f = lambda v: np.sum(np.tanh(v[:12].reshape(3, 4) @ v[12:]))
        fd = ad.finite_diff_jacobian(f, flat)[0]
        assert _rel_err(g, fd) < 1e-5


def test_logabsdet_gradient(rng):
    for _ in range(100):
        M = rng.standard_normal((3, 3)) + 3.0 * np.eye(3)
        tape = ad.Tape()
        tape.output(ad.logabsdet(tape.input(M)))
        g = ad.grad(tape, [M])
        fd = ad.finite_diff_jacobian(lambda v: np.linalg.slogdet(v.reshape(3, 3))[1], M.ravel())[0]
        assert _rel_err(g, fd) < 1e-5
        assert abs(ad.eval_graph(tape, [M])[0] - np.linalg.slogdet(M)[1]) < 1e-12


def test_clip_gradient_masks_active_bounds():
    tape = ad.Tape()
    x = tape.input(np.array([-2.0, 0.5, 3.0]))
    tape.output(ad.sum(ad.clip(x, -1.0, 1.0)))
    assert ad.grad(tape, [np.array([-2.0, 0.5, 3.0])]).tolist() == [0.0, 1.0, 0.0]


def test_scalar_on_left_operators():
    tape = ad.Tape()
    x = tape.input(np.array([1.0, 2.0]))
    tape.output(1.0 - x)
    tape.output(2.0 / x)
    np.testing.assert_allclose(ad.eval_graph(tape, [np.array([1.0, 2.0])]), [0.0, -1.0, 2.0, 1.0])


def test_random_mlp_grad_matches_finite_differences(rng):
    params = init_mlp([4, 6, 6, 2], seed=3)
    for _ in range(20):
        p = rng.standard_normal(4)
        tape = ad.Tape()
        tape.output(mlp_tape(params, tape.input(p)))
        g = ad.grad(tape, [p], output_index=1)
        fd = ad.finite_diff_jacobian(lambda v: mlp_forward(params, v)[1], p)[0]
        assert _rel_err(g, fd) < 1e-5
    with pytest.raises(IndexError):
        ad.grad(tape, [p], output_index=2)


def test_chain_rule_composition(rng):
    for _ in range(20):
        A = rng.standard_normal((3, 3))
        params = init_mlp([3, 4, 3], seed=int(rng.integers(1 << 30)))
        p = rng.standard_normal(3)
        tape = ad.Tape()
        tape.output(ad.matmul(tape.const(A), mlp_tape(params, tape.input(p))))
        J = ad.jacobian(tape, [p])
        inner = ad.batch_jacobian(lambda v: mlp_tape(params, v), p[None])[0]
        np.testing.assert_allclose(J, A @ inner, rtol=0, atol=1e-8)


def test_batch_jacobian_matches_per_point(rng):
    params = init_mlp([3, 5, 2], seed=7)
    pts = rng.standard_normal((6, 3))
    batched = ad.batch_jacobian(lambda v: mlp_tape(params, v), pts)
    for i, p in enumerate(pts):
        tape = ad.Tape()
        tape.output(mlp_tape(params, tape.input(p)))
        np.testing.assert_allclose(batched[i], ad.jacobian(tape, [p]), rtol=1e-12, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5))
def test_binary_ops_property(a, b):
    tape = ad.Tape()
    x, y = tape.input(a), tape.input(b)
    tape.output(x * y + ad.tanh(x - y))
    g = ad.grad(tape, [a, b])
    fd = ad.finite_diff_jacobian(lambda v: v[0] * v[1] + np.tanh(v[0] - v[1]), np.array([a, b]))[0]
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-7)


def test_shape_mismatch_rejected():
    tape = ad.Tape()
    with pytest.raises(ValueError):
        tape.input(np.ones(2)) + tape.input(np.ones(3))
