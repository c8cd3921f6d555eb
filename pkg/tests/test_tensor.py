import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st

from styleadv import tensor as T
from styleadv.errors import ContractError, DomainError, NumericsError, ShapeError
from styleadv.tensor import Tensor, backward, finite_difference_check


def conv_oracle(x, w, b, padding):
    """Direct nested-loop 2-D cross-correlation, stride 1."""
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho, Wo = H + 2 * padding - kh + 1, W + 2 * padding - kw + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[o]
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, c, i + u, j + v] * w[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


# -- forward examples -------------------------------------------------------

def test_relu_forward_and_subgradient_at_zero():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    y = T.relu(x)
    assert y.data.tolist() == [0.0, 0.0, 2.0]
    g = backward(T.reduce_sum(y))
    assert g[x].tolist() == [0.0, 0.0, 1.0]


def test_identity_kernel_conv_is_identity(rng):
    x = rng.standard_normal((2, 1, 5, 5))
    y = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(y.data, x)


def test_matmul_shapes():
    assert T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4)))).shape == (2, 4)
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 4))))


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 2, 3, 3))))


def test_broadcast_mismatch():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


@pytest.mark.parametrize("padding", [0, 1, 2])
def test_conv_matches_loop_oracle(padding):
    r = np.random.default_rng(padding)
    x = r.standard_normal((2, 3, 8, 8))
    w = r.standard_normal((4, 3, 3, 3))
    b = r.standard_normal(4)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=padding).data
    np.testing.assert_allclose(got, conv_oracle(x, w, b, padding), rtol=0, atol=1e-12)


def test_domain_errors():
    with pytest.raises(DomainError):
        T.sqrt(Tensor([-1.0]))
    with pytest.raises(DomainError):
        T.log(Tensor([0.0]))


def test_non_finite_output_raises():
    with pytest.raises(NumericsError):
        T.exp(Tensor([1000.0]))


def test_sign_is_forward_only():
    x = Tensor([-2.0, 0.0, 3.0], requires_grad=True)
    s = T.sign(x)
    assert s.data.tolist() == [-1.0, 0.0, 1.0]
    assert not s.requires_grad


# -- backward contract ------------------------------------------------------

def test_sum_of_squares_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    g = backward(T.reduce_sum(x * x))
    assert g[x].tolist() == [2.0, 4.0, 6.0]


def test_fan_out_accumulates():
    x = Tensor([1.0, -2.0], requires_grad=True)
    g = backward(T.reduce_sum(x + x))
    assert g[x].tolist() == [2.0, 2.0]


def test_constant_absent_from_table():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([3.0, 4.0])
    loss = T.reduce_sum(x * c)
    g = backward(loss)
    assert c not in g
    assert x in g


def test_loss_gradient_is_one():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.reduce_sum(x)
    assert backward(loss)[loss] == 1.0


def test_every_reachable_node_gets_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    h = T.exp(x)
    loss = T.reduce_mean(h * h)
    g = backward(loss)
    assert all(t in g for t in (x, h, loss))


def test_non_scalar_loss():
    with pytest.raises(ContractError):
        backward(Tensor([1.0, 2.0], requires_grad=True) * 2.0)


def test_tape_is_topological(rng):
    x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    loss = T.reduce_sum(T.softmax(T.relu(x) * 2.0))
    records = T.tape_nodes(loss)
    on_tape = {nid for nid, _, _ in records}
    seen = set()
    for nid, _, inputs in records:
        assert all(i in seen for i in inputs if i in on_tape)
        seen.add(nid)
    assert records[-1][0] == loss.node_id


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.kind == "leaf"


def test_tapes_are_thread_confined():
    results = []

    def work():
        x = Tensor([3.0], requires_grad=True)
        results.append(backward(T.reduce_sum(x * x))[x][0])

    threads = [threading.Thread(target=work) for _ in range(4)]
    with T.no_grad():
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    assert results == [6.0] * 4


def test_forward_determinism():
    def run():
        r = np.random.default_rng(11)
        x = Tensor(r.standard_normal((2, 3, 6, 6)))
        w = Tensor(r.standard_normal((4, 3, 3, 3)))
        return T.avgpool2d(T.relu(T.conv2d(x, w, padding=1))).data

    assert np.array_equal(run(), run())


# -- broadcasting backward vs a loop oracle ---------------------------------

def unbroadcast_oracle(g, shape):
    """Sum ``g`` into ``shape`` element by element."""
    out = np.zeros(shape)
    padded = (1,) * (g.ndim - len(shape)) + tuple(shape)
    for idx in np.ndindex(g.shape):
        tgt = tuple(0 if padded[a] == 1 else idx[a] for a in range(g.ndim))
        out.reshape(padded)[tgt] += g[idx]
    return out


@given(st.lists(st.integers(1, 3), min_size=4, max_size=4), st.lists(st.booleans(), min_size=4, max_size=4),
       st.integers(0, 3), st.integers(0, 2**31 - 1))
def test_broadcast_backward_matches_loop_oracle(full, ones, drop, seed):
    r = np.random.default_rng(seed)
    small = tuple(1 if o else d for d, o in zip(full, ones))[drop:]
    a = Tensor(r.standard_normal(full), requires_grad=True)
    b = Tensor(r.standard_normal(small), requires_grad=True)
    upstream = r.standard_normal(full)
    g = backward(T.reduce_sum((a * b) * Tensor(upstream)))
    np.testing.assert_allclose(g[b], unbroadcast_oracle(upstream * a.data, small), atol=1e-12)


# -- gradient checks for every differentiable primitive ---------------------

def _positive(r, shape):
    return r.uniform(0.5, 2.0, size=shape)


def _c(r, shape):
    return Tensor(r.standard_normal(shape))


def _case_relu(r):
    v = r.standard_normal((3, 4))
    v[np.abs(v) < 0.05] = 0.5   # keep probes away from the kink
    up = _c(r, (3, 4))
    return lambda x: T.reduce_sum(T.relu(x) * up), v


def _case(build, x_shape, positive=False):
    """``build(r)`` draws constants once and returns f; x is drawn after."""
    def make(r):
        f = build(r)
        x = _positive(r, x_shape) if positive else r.standard_normal(x_shape)
        return f, x
    return make


def _weighted(op, out_shape):
    def build(r):
        up = _c(r, out_shape)
        return lambda x: T.reduce_sum(op(x) * up)
    return build


def _conv_input(r):
    w, b, up = _c(r, (3, 2, 3, 3)), _c(r, 3), _c(r, (2, 3, 5, 5))
    return lambda x: T.reduce_sum(T.conv2d(x, w, b, padding=1) * up)


def _conv_weight(r):
    x, up = _c(r, (2, 2, 5, 5)), _c(r, (2, 3, 5, 5))
    return lambda w: T.reduce_sum(T.conv2d(x, w, padding=1) * up)


def _conv_bias(r):
    x, w, up = _c(r, (1, 2, 4, 4)), _c(r, (3, 2, 3, 3)), _c(r, (1, 3, 4, 4))
    return lambda b: T.reduce_sum(T.conv2d(x, w, b, padding=1) * up)


def _binary(op, other_shape, out_shape, x_first=True, positive_other=False):
    def build(r):
        o = Tensor(_positive(r, other_shape)) if positive_other else _c(r, other_shape)
        up = _c(r, out_shape)
        return lambda x: T.reduce_sum((op(x, o) if x_first else op(o, x)) * up)
    return build


PRIMITIVE_CASES = {
    "add": _case(_binary(T.add, (3, 1), (3, 4)), (3, 4)),
    "sub": _case(_binary(T.sub, (4,), (2, 4), x_first=False), (2, 4)),
    "mul": _case(_binary(T.mul, (1, 4), (3, 4)), (3, 4)),
    "div": _case(_binary(T.div, (3, 4), (3, 4), x_first=False), (3, 4), positive=True),
    "div-numerator": _case(_binary(T.div, (4,), (3, 4), positive_other=True), (3, 4)),
    "matmul-left": _case(_binary(T.matmul, (4, 2), (3, 2)), (3, 4)),
    "matmul-right": _case(_binary(T.matmul, (3, 4), (3, 2), x_first=False), (4, 2)),
    "conv2d-input": _case(_conv_input, (2, 2, 5, 5)),
    "conv2d-weight": _case(_conv_weight, (3, 2, 3, 3)),
    "conv2d-bias": _case(_conv_bias, (3,)),
    "relu": _case_relu,
    "avgpool2d": _case(_weighted(T.avgpool2d, (2, 2, 2, 2)), (2, 2, 4, 4)),
    "global-avgpool": _case(_weighted(T.global_avgpool, (2, 3)), (2, 3, 4, 4)),
    "reshape": _case(_weighted(lambda x: T.reshape(x, (4, 3)), (4, 3)), (3, 4)),
    "transpose": _case(_weighted(lambda x: T.transpose(x, (1, 0, 2)), (3, 2, 4)), (2, 3, 4)),
    "slice": _case(_weighted(lambda x: T.slice_axis(x, 1, 1, 3), (3, 2)), (3, 4)),
    "concat": _case(_weighted(lambda x: T.concat([x, T.scale(x, 2.0)], axis=0), (6, 4)), (3, 4)),
    "reduce-sum": _case(_weighted(lambda x: T.reduce_sum(x, axis=1), (3,)), (3, 4)),
    "reduce-mean": _case(_weighted(lambda x: T.reduce_mean(x, axis=(2, 3)), (2, 3)), (2, 3, 2, 2)),
    "reduce-var": _case(_weighted(lambda x: T.reduce_var(x, axis=(2, 3)), (2, 3)), (2, 3, 3, 3)),
    "sqrt": _case(_weighted(T.sqrt, (5,)), (5,), positive=True),
    "log": _case(_weighted(T.log, (5,)), (5,), positive=True),
    "exp": _case(_weighted(T.exp, (5,)), (5,)),
    "softmax": _case(_weighted(T.softmax, (3, 4)), (3, 4)),
    "log-softmax": _case(_weighted(T.log_softmax, (3, 4)), (3, 4)),
    "scalar-scale": _case(_weighted(lambda x: T.scale(x, -2.5), (4,)), (4,)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
@pytest.mark.parametrize("case", range(10))
def test_primitive_gradients(name, case):
    r = np.random.default_rng(1000 * case + len(name))
    f, x = PRIMITIVE_CASES[name](r)
    report = finite_difference_check(f, x, h=1e-4, tol=1e-5)
    assert report.passed, (name, report.max_rel_error)


def test_every_primitive_has_a_gradient_case():
    covered = {n.split("-")[0] if n.startswith(("conv2d", "matmul", "div")) else n for n in PRIMITIVE_CASES}
    assert set(T.PRIMITIVES) <= covered


# -- finite-difference oracle ------------------------------------------------

def test_fd_on_sum_of_squares():
    report = finite_difference_check(lambda x: T.reduce_sum(x * x), np.array([1.0, 2.0]))
    np.testing.assert_allclose(report.tape_grad, [2.0, 4.0])
    np.testing.assert_allclose(report.numeric_grad, [2.0, 4.0], atol=1e-8)
    assert report.max_rel_error < 1e-9


def test_fd_two_layer_net_cross_entropy():
    from styleadv.nn import cross_entropy
    r = np.random.default_rng(3)
    x = Tensor(r.standard_normal((4, 5)))
    w2 = Tensor(r.standard_normal((6, 3)))
    y = np.array([0, 2, 1, 2])

    def f(w1):
        return cross_entropy(T.matmul(T.relu(T.matmul(x, w1)), w2), y)

    assert finite_difference_check(f, r.standard_normal((5, 6)), tol=1e-5).passed


def test_fd_zero_tolerance_fails():
    report = finite_difference_check(lambda x: T.reduce_sum(T.exp(x)), np.array([0.3, 1.7]), tol=0.0)
    assert not report.passed


def test_fd_non_finite_probe():
    with pytest.raises(DomainError):
        finite_difference_check(lambda x: T.reduce_sum(T.sqrt(x)), np.array([0.0, 1.0]))


def test_fd_coordinate_subset():
    report = finite_difference_check(lambda x: T.reduce_sum(x * x), np.arange(10.0), coords=[2, 7])
    np.testing.assert_allclose(report.tape_grad, [4.0, 14.0])
