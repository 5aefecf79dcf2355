"""Gradient oracles for the reverse-mode tape.

Every primitive gets a central finite-difference check on a scalar
objective built from it. Structural properties (restriction to a subset
of leaves, replay, determinism, Frobenius sub-multiplicativity) get
their own direct checks plus hypothesis property tests.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from marginlab import CompGraph, Var, backward, forward_op, jacobian
from marginlab.autograd import GraphError, OP_TAGS
from marginlab.tensor import frobenius_norm

from conftest import finite_difference, relative_error

FD_TOL = 1e-5


def scalarize(graph, nid):
    """Reduce any node to a scalar via a fixed random weighting."""
    val = graph.value(nid)
    rng = np.random.default_rng(np.array([val.size, 7]))
    w = graph.constant(rng.standard_normal(val.shape))
    prod = forward_op(graph, "mul", [nid, w])
    flat = forward_op(graph, "reshape", [prod], shape=(val.size,))
    ones = graph.constant(np.ones(val.size))
    return forward_op(graph, "dot", [flat, ones])


def grad_check(build, x, tol=FD_TOL, h=1e-6):
    """Compare reverse-mode gradient of build(graph, leaf) against FD."""
    x = np.asarray(x, dtype=np.float64)

    def value(arr):
        g = CompGraph()
        leaf = g.leaf(arr)
        out = build(g, leaf)
        return float(g.value(out))

    g = CompGraph()
    leaf = g.leaf(x)
    out = build(g, leaf)
    grads = backward(g, out, wrt=[leaf])
    exact = grads[leaf].array
    approx = finite_difference(value, x, h=h)
    err = relative_error(approx, exact)
    assert err <= tol, f"finite-difference mismatch: {err:.3g} > {tol}"
    return exact


# ---------------------------------------------------------------------------
# elementwise and arithmetic primitives
# ---------------------------------------------------------------------------

def test_grad_add_broadcast(rng):
    other = rng.standard_normal((1, 4))

    def build(g, leaf):
        return scalarize(g, forward_op(g, "add", [leaf, g.constant(other)]))

    grad_check(build, rng.standard_normal((3, 4)))


def test_grad_sub_both_sides(rng):
    other = rng.standard_normal((3, 1))

    def build(g, leaf):
        return scalarize(g, forward_op(g, "sub", [g.constant(other), leaf]))

    grad_check(build, rng.standard_normal((3, 4)))


def test_grad_mul_broadcast(rng):
    other = rng.standard_normal(4)

    def build(g, leaf):
        return scalarize(g, forward_op(g, "mul", [leaf, g.constant(other)]))

    grad_check(build, rng.standard_normal((2, 3, 4)))


def test_grad_div_numerator_and_denominator(rng):
    denom = rng.random((3, 4)) + 0.5

    def build_num(g, leaf):
        return scalarize(g, forward_op(g, "div", [leaf, g.constant(denom)]))

    grad_check(build_num, rng.standard_normal((3, 4)))

    num = rng.standard_normal((3, 4))

    def build_den(g, leaf):
        return scalarize(g, forward_op(g, "div", [g.constant(num), leaf]))

    grad_check(build_den, rng.random((3, 4)) + 0.5)


def test_grad_neg(rng):
    def build(g, leaf):
        return scalarize(g, forward_op(g, "neg", [leaf]))

    grad_check(build, rng.standard_normal((2, 5)))


@pytest.mark.parametrize(
    "op,domain",
    [
        ("exp", lambda r: r.standard_normal((3, 4)) * 0.5),
        ("log", lambda r: r.random((3, 4)) + 0.5),
        ("sqrt", lambda r: r.random((3, 4)) + 0.5),
        ("tanh", lambda r: r.standard_normal((3, 4))),
    ],
)
def test_grad_unary(op, domain, rng):
    def build(g, leaf):
        return scalarize(g, forward_op(g, op, [leaf]))

    grad_check(build, domain(rng))


def test_grad_leaky_relu_away_from_kink(rng):
    x = rng.standard_normal((4, 5))
    x = np.where(np.abs(x) < 0.2, x + 0.5, x)  # keep FD off the kink

    def build(g, leaf):
        return scalarize(g, forward_op(g, "leaky_relu", [leaf], slope=0.1))

    grad_check(build, x)


def test_leaky_relu_negative_side_slope():
    g = CompGraph()
    leaf = g.leaf(np.array([-2.0, 3.0]))
    out = forward_op(g, "leaky_relu", [leaf], slope=0.25)
    np.testing.assert_array_equal(g.value(out), [-0.5, 3.0])
    s = forward_op(g, "sum", [out])
    grads = backward(g, s, wrt=[leaf])
    np.testing.assert_array_equal(grads[leaf].array, [0.25, 1.0])


def test_grad_maximum_scalar_away_from_bound(rng):
    x = rng.standard_normal((3, 4)) * 2.0
    x = np.where(np.abs(x - 0.5) < 0.2, x + 0.5, x)

    def build(g, leaf):
        return scalarize(g, forward_op(g, "maximum_scalar", [leaf], bound=0.5))

    grad_check(build, x)


def test_maximum_scalar_clamps_below_bound():
    g = CompGraph()
    leaf = g.leaf(np.array([0.1, 0.9]))
    out = forward_op(g, "maximum_scalar", [leaf], bound=0.5)
    np.testing.assert_array_equal(g.value(out), [0.5, 0.9])
    s = forward_op(g, "sum", [out])
    grads = backward(g, s, wrt=[leaf])
    np.testing.assert_array_equal(grads[leaf].array, [0.0, 1.0])


# ---------------------------------------------------------------------------
# structural primitives
# ---------------------------------------------------------------------------

def test_grad_matmul_left_and_right(rng):
    b = rng.standard_normal((4, 3))

    def build_left(g, leaf):
        return scalarize(g, forward_op(g, "matmul", [leaf, g.constant(b)]))

    grad_check(build_left, rng.standard_normal((2, 4)))

    a = rng.standard_normal((2, 4))

    def build_right(g, leaf):
        return scalarize(g, forward_op(g, "matmul", [g.constant(a), leaf]))

    grad_check(build_right, rng.standard_normal((4, 3)))


def test_grad_transpose_reshape_broadcast(rng):
    def build(g, leaf):
        t = forward_op(g, "transpose", [leaf], axes=(1, 0))
        r = forward_op(g, "reshape", [t], shape=(2, 6))
        b = forward_op(g, "broadcast_to", [r], shape=(5, 2, 6))
        return scalarize(g, b)

    grad_check(build, rng.standard_normal((4, 3)))


@pytest.mark.parametrize("axis", [None, 0, 1, (0, 2)])
def test_grad_sum_axes(axis, rng):
    def build(g, leaf):
        s = forward_op(g, "sum", [leaf], axis=axis)
        return scalarize(g, s) if g.value(s).ndim else s

    grad_check(build, rng.standard_normal((3, 4, 2)))


def test_grad_softmax(rng):
    def build(g, leaf):
        return scalarize(g, forward_op(g, "softmax", [leaf], axis=-1))

    grad_check(build, rng.standard_normal((4, 6)))


def test_softmax_rows_sum_to_one(rng):
    g = CompGraph()
    leaf = g.leaf(rng.standard_normal((5, 7)) * 30.0)
    out = g.value(forward_op(g, "softmax", [leaf], axis=-1))
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, rtol=1e-14)
    assert np.all(out > 0.0)


def test_log_softmax_matches_direct_computation(rng):
    x = rng.standard_normal((6, 9)) * 20.0
    g = CompGraph()
    leaf = g.leaf(x)
    out = g.value(forward_op(g, "log_softmax", [leaf], axis=-1))
    shifted = x - x.max(axis=-1, keepdims=True)
    direct = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    np.testing.assert_allclose(out, direct, atol=1e-13)


def test_grad_log_softmax(rng):
    def build(g, leaf):
        return scalarize(g, forward_op(g, "log_softmax", [leaf], axis=-1))

    grad_check(build, rng.standard_normal((3, 5)))


# ---------------------------------------------------------------------------
# convolution stack
# ---------------------------------------------------------------------------

def test_grad_conv2d_wrt_input(rng):
    w = rng.standard_normal((3, 2, 3, 3)) * 0.3
    bias = rng.standard_normal(3) * 0.1

    def build(g, leaf):
        out = forward_op(
            g, "conv2d", [leaf, g.constant(w), g.constant(bias)], stride=1, pad=1
        )
        return scalarize(g, out)

    grad_check(build, rng.standard_normal((2, 2, 5, 5)))


def test_grad_conv2d_wrt_weight_and_bias(rng):
    x = rng.standard_normal((2, 2, 5, 5))
    bias = rng.standard_normal(3) * 0.1

    def build_w(g, leaf):
        out = forward_op(
            g, "conv2d", [g.constant(x), leaf, g.constant(bias)], stride=2, pad=0
        )
        return scalarize(g, out)

    grad_check(build_w, rng.standard_normal((3, 2, 3, 3)) * 0.3)

    w = rng.standard_normal((3, 2, 3, 3)) * 0.3

    def build_b(g, leaf):
        out = forward_op(g, "conv2d", [g.constant(x), g.constant(w), leaf], stride=1, pad=1)
        return scalarize(g, out)

    grad_check(build_b, rng.standard_normal(3) * 0.1)


def test_conv2d_matches_direct_convolution(rng):
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    g = CompGraph()
    out = g.value(
        forward_op(g, "conv2d", [g.leaf(x), g.constant(w), g.constant(b)], stride=1, pad=1)
    )
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    direct = np.zeros((2, 4, 6, 6))
    for n in range(2):
        for o in range(4):
            for i in range(6):
                for j in range(6):
                    patch = xp[n, :, i : i + 3, j : j + 3]
                    direct[n, o, i, j] = np.sum(patch * w[o]) + b[o]
    np.testing.assert_allclose(out, direct, atol=1e-12)


def test_grad_max_pool_distinct_values(rng):
    base = rng.permutation(4 * 2 * 6 * 6).astype(np.float64).reshape(4, 2, 6, 6)
    x = base / 10.0  # all entries distinct, gaps 0.1 >> FD step

    def build(g, leaf):
        out = forward_op(g, "max_pool", [leaf], size=2)
        return scalarize(g, out)

    grad_check(build, x)


def test_max_pool_forward_matches_blockwise_max(rng):
    x = rng.standard_normal((3, 2, 8, 8))
    g = CompGraph()
    out = g.value(forward_op(g, "max_pool", [g.leaf(x)], size=2))
    direct = x.reshape(3, 2, 4, 2, 4, 2).max(axis=(3, 5))
    np.testing.assert_array_equal(out, direct)


def test_grad_im2col_col2im_roundtrip(rng):
    def build(g, leaf):
        cols = forward_op(g, "im2col", [leaf], kh=3, kw=3, stride=1, pad=1)
        return scalarize(g, cols)

    grad_check(build, rng.standard_normal((2, 2, 5, 5)))


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------

def test_grad_mean_dot_l2_norm(rng):
    v = rng.standard_normal(7)

    def build(g, leaf):
        m = forward_op(g, "mean", [leaf], axis=0)
        d = forward_op(g, "dot", [m, g.constant(v)])
        flat = forward_op(g, "reshape", [leaf], shape=(g.value(leaf).size,))
        n = forward_op(g, "l2_norm", [flat])
        return forward_op(g, "add", [d, n])

    grad_check(build, rng.standard_normal((3, 7)) + 0.1)


def test_grad_deep_chain(rng):
    """A multi-layer expression exercising fan-out and fan-in."""
    w1 = rng.standard_normal((6, 4)) * 0.5
    w2 = rng.standard_normal((4, 3)) * 0.5

    def build(g, leaf):
        h = forward_op(g, "matmul", [leaf, g.constant(w1)])
        h = forward_op(g, "tanh", [h])
        z = forward_op(g, "matmul", [h, g.constant(w2)])
        p = forward_op(g, "softmax", [z], axis=-1)
        lp = forward_op(g, "log", [p])
        reused = forward_op(g, "add", [z, lp])  # fan-out of z
        return scalarize(g, reused)

    grad_check(build, rng.standard_normal((5, 6)))


# ---------------------------------------------------------------------------
# double backprop
# ---------------------------------------------------------------------------

def test_gradient_nodes_are_differentiable(rng):
    """d/dW of ||d(sum tanh(xW))/dx||^2 must match finite differences."""
    x = rng.standard_normal((3, 4))

    def penalty(w_arr):
        g = CompGraph()
        w = g.leaf(w_arr)
        xn = g.constant(x)
        out = forward_op(g, "tanh", [forward_op(g, "matmul", [xn, w])])
        s = forward_op(g, "sum", [out])
        gx = backward(g, s, wrt=[xn]).node(xn)
        sq = forward_op(g, "mul", [gx, gx])
        return g, w, forward_op(g, "sum", [sq])

    def value(w_arr):
        g, _, out = penalty(w_arr)
        return float(g.value(out))

    w0 = rng.standard_normal((4, 2)) * 0.5
    g, w, out = penalty(w0)
    exact = backward(g, out, wrt=[w])[w].array
    approx = finite_difference(value, w0, h=1e-5)
    assert relative_error(approx, exact) <= 1e-4


def test_linear_jacobian_penalty_closed_form(rng):
    """For z = xW, summing ||d z_j / d x||^2 over output components gives
    ||W||_F^2 exactly, with parameter gradient 2W."""
    w0 = rng.standard_normal((5, 3))
    x = rng.standard_normal((1, 5))

    g = CompGraph()
    w = g.leaf(w0)
    xn = g.constant(x)
    z = forward_op(g, "matmul", [xn, w])
    flat = forward_op(g, "reshape", [z], shape=(3,))
    terms = []
    for j in range(3):
        sel = np.zeros(3)
        sel[j] = 1.0
        zj = forward_op(g, "dot", [flat, g.constant(sel)])
        gx = backward(g, zj, wrt=[xn]).node(xn)
        terms.append(forward_op(g, "sum", [forward_op(g, "mul", [gx, gx])]))
    sq = terms[0]
    for t in terms[1:]:
        sq = forward_op(g, "add", [sq, t])
    assert float(g.value(sq)) == pytest.approx(np.sum(w0 * w0), rel=1e-14)
    grads = backward(g, sq, wrt=[w])
    np.testing.assert_allclose(grads[w].array, 2.0 * w0, atol=1e-13)


# ---------------------------------------------------------------------------
# norm properties
# ---------------------------------------------------------------------------

def test_submultiplicativity_seeded_pairs():
    rng = np.random.default_rng(99)
    violations = 0
    for k in range(200):
        m, n, p = rng.integers(1, 9, size=3)
        a = rng.standard_normal((m, n)) * rng.uniform(0.01, 100.0)
        b = rng.standard_normal((n, p)) * rng.uniform(0.01, 100.0)
        if k % 5 == 0:
            a[:, : max(1, n // 2)] = 0.0  # rank-deficient cases
        if k % 17 == 0:
            a[:] = 0.0
        if frobenius_norm(a @ b) > frobenius_norm(a) * frobenius_norm(b) * (1 + 1e-12):
            violations += 1
    assert violations == 0


@given(
    hnp.arrays(np.float64, (3, 4), elements=st.floats(-1e3, 1e3)),
    hnp.arrays(np.float64, (4, 5), elements=st.floats(-1e3, 1e3)),
)
@settings(max_examples=100, deadline=None)
def test_submultiplicativity_property(a, b):
    assert frobenius_norm(a @ b) <= frobenius_norm(a) * frobenius_norm(b) * (1 + 1e-12) + 1e-300


# entries tiny enough that squaring underflows to 0 make norm() report 0 for a
# nonzero array; that is inherent to sqrt-of-sum-of-squares, so the zero-iff-zero
# property is only claimed away from the subnormal range
@given(
    hnp.arrays(
        np.float64,
        (4, 3),
        elements=st.floats(-1e4, 1e4).map(lambda v: 0.0 if abs(v) < 1e-100 else v),
    )
)
@settings(max_examples=100, deadline=None)
def test_norm_nonnegative_and_zero_iff_zero(a):
    n = frobenius_norm(a)
    assert n >= 0.0
    assert (n == 0.0) == bool(np.all(a == 0.0))


# ---------------------------------------------------------------------------
# structure: restriction, replay, determinism
# ---------------------------------------------------------------------------

def test_wrt_restriction_matches_full_backward(rng):
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 2))

    def run(wrt_only):
        g = CompGraph()
        xl = g.leaf(x)
        wl = g.leaf(w)
        out = forward_op(g, "sum", [forward_op(g, "tanh", [forward_op(g, "matmul", [xl, wl])])])
        grads = backward(g, out, wrt=[xl] if wrt_only else None)
        return grads[xl].array

    np.testing.assert_array_equal(run(True), run(False))


def test_unused_leaf_gets_zero_gradient(rng):
    g = CompGraph()
    used = g.leaf(rng.standard_normal(4))
    unused = g.leaf(rng.standard_normal(3))
    out = forward_op(g, "sum", [used])
    grads = backward(g, out)
    np.testing.assert_array_equal(grads[unused].array, np.zeros(3))
    np.testing.assert_array_equal(grads[used].array, np.ones(4))


def test_replay_reproduces_values_bit_exactly(rng):
    g = CompGraph()
    leaf = g.leaf(rng.standard_normal((4, 4)))
    out = forward_op(g, "softmax", [forward_op(g, "matmul", [leaf, leaf])], axis=-1)
    recorded = g.value(out).copy()
    replayed = g.replay(out)
    assert replayed.tobytes() == recorded.tobytes()


def test_identical_builds_are_bit_identical(rng):
    x = rng.standard_normal((5, 5))

    def run():
        g = CompGraph()
        leaf = g.leaf(x)
        out = forward_op(g, "sum", [forward_op(g, "exp", [forward_op(g, "tanh", [leaf])])])
        return backward(g, out, wrt=[leaf])[leaf].array.tobytes()

    assert run() == run()


def test_jacobian_of_linear_map_is_the_matrix(rng):
    w = rng.standard_normal((4, 3))

    def fn(g, xn):
        return forward_op(g, "matmul", [forward_op(g, "reshape", [xn], shape=(1, 4)), g.constant(w)])

    from marginlab import Tensor

    j = jacobian(fn, Tensor(rng.standard_normal(4)))
    np.testing.assert_allclose(j.array, w.T, atol=1e-14)


# ---------------------------------------------------------------------------
# error handling and the Var sugar
# ---------------------------------------------------------------------------

def test_backward_rejects_non_scalar(rng):
    g = CompGraph()
    leaf = g.leaf(rng.standard_normal((2, 2)))
    with pytest.raises(GraphError):
        backward(g, leaf)


def test_unknown_op_rejected():
    g = CompGraph()
    leaf = g.leaf(np.ones(3))
    with pytest.raises(GraphError):
        forward_op(g, "not_an_op", [leaf])


def test_matmul_shape_mismatch_rejected():
    g = CompGraph()
    a = g.leaf(np.ones((2, 3)))
    b = g.leaf(np.ones((4, 5)))
    with pytest.raises(GraphError):
        forward_op(g, "matmul", [a, b])


def test_op_registry_contains_core_ops():
    for op in ("add", "matmul", "softmax", "conv2d", "max_pool", "log_softmax"):
        assert op in OP_TAGS


def test_var_expression_parity(rng):
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 2))
    g = CompGraph()
    vx = Var(g, g.leaf(x))
    vw = Var(g, g.constant(w))
    expr = ((vx.matmul(vw) * 2.0 + 1.0).tanh().sum() / 3.0 - 0.5).exp()
    direct = np.exp(np.sum(np.tanh(x @ w * 2.0 + 1.0)) / 3.0 - 0.5)
    assert float(expr.value) == pytest.approx(float(direct), rel=1e-14)

    grads = backward(g, expr.nid, wrt=[vx.nid])
    approx = finite_difference(
        lambda a: float(np.exp(np.sum(np.tanh(a @ w * 2.0 + 1.0)) / 3.0 - 0.5)), x
    )
    assert relative_error(approx, grads[vx.nid].array) <= FD_TOL
