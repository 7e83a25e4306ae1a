import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modmatch import autodiff as ad
from modmatch.autodiff import Tensor, parameter


def grads_of(f, *params):
    with ad.Tape() as tape:
        loss = f()
    g = ad.backward(tape, loss)
    return [g[p] for p in params]


def central_diff(f, p, eps=1e-5):
    out = np.zeros_like(p.data)
    flat, gflat = p.data.reshape(-1), out.reshape(-1)
    with ad.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
    return out


def rel_err(a, n):
    scale = max(np.abs(a).max(), np.abs(n).max())
    return 0.0 if scale == 0 else np.abs(a - n).max() / scale


# -- forward examples --------------------------------------------------------


def test_matmul_hand_arithmetic():
    out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_softmax_symmetric():
    np.testing.assert_allclose(ad.softmax(Tensor(np.zeros(3))).data, np.full(3, 1 / 3), rtol=0, atol=1e-15)


def test_logsumexp_identity():
    out = ad.logsumexp(Tensor(np.log([2.0, 3.0])))
    assert abs(float(out.data) - np.log(5.0)) < 1e-14


def test_logsumexp_stable_for_large_inputs():
    out = ad.logsumexp(Tensor([1000.0, 1000.0]))
    assert abs(float(out.data) - (1000.0 + np.log(2.0))) < 1e-9


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ad.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError, match="add"):
        Tensor(np.ones(3)) + Tensor(np.ones(4))


def test_unknown_op_rejected():
    with pytest.raises(ValueError, match="unsupported op"):
        ad.forward_op("fft", Tensor([1.0]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_output_from_finite_input_is_an_error():
    with pytest.raises(ad.NonFiniteError):
        ad.log(Tensor([0.0, 1.0]))
    with pytest.raises(ad.NonFiniteError):
        ad.exp(Tensor([1e4]))


# -- backward examples ---------------------------------------------------------


def test_square_gradient():
    x = parameter(3.0)
    (g,) = grads_of(lambda: x * x, x)
    assert g == 6.0


def test_sum_of_softmax_has_zero_gradient():
    x = parameter(np.array([0.3, -1.2, 2.0, 0.1]))
    (g,) = grads_of(lambda: ad.softmax(x).sum(), x)
    np.testing.assert_allclose(g, 0.0, atol=1e-15)


def test_non_scalar_loss_rejected():
    x = parameter(np.ones(3))
    with ad.Tape() as tape:
        y = x * 2.0
    with pytest.raises(ad.ShapeError):
        ad.backward(tape, y)


def test_unused_parameter_gets_zero_gradient():
    x, y = parameter(np.ones(2)), parameter(np.ones(3))
    gx, gy = grads_of(lambda: (x * x).sum(), x, y)
    np.testing.assert_array_equal(gy, 0.0)
    np.testing.assert_array_equal(gx, 2.0)


def test_no_grad_records_nothing():
    x = parameter(np.ones(2))
    with ad.Tape() as tape:
        with ad.no_grad():
            _ = (x * x).sum()
    assert len(tape) == 0


def test_tape_is_topologically_ordered_and_each_node_used_once():
    x = parameter(np.array([1.0, 2.0]))
    calls = []
    with ad.Tape() as tape:
        y = ad.tanh(x)
        z = (y * y + y).sum()
    seen = set()
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.requires_grad and inp is not x:
                assert id(inp) in seen
        seen.add(id(node.out))
    original = [n.vjp for n in tape.nodes]
    for n, fn in zip(tape.nodes, original):
        n.vjp = (lambda fn, name: lambda g: (calls.append(name), fn(g))[1])(fn, n.op)
    ad.backward(tape, z)
    assert len(calls) == len(tape.nodes)


def test_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    ws = [parameter(rng.uniform(-1, 1, s)) for s in [(4, 6), (6, 5), (5, 1)]]
    bs = [parameter(rng.uniform(-1, 1, s)) for s in [6, 5, 1]]
    x = rng.uniform(-2, 2, (3, 4))

    def f():
        h = Tensor(x)
        for i, (w, b) in enumerate(zip(ws, bs)):
            h = h @ w + b
            if i < 2:
                h = ad.tanh(h)
        return ad.square(h).mean()

    analytic = grads_of(f, *ws, *bs)
    for p, a in zip(ws + bs, analytic):
        assert rel_err(a, central_diff(f, p)) <= 1e-6


# -- every registered op against central differences ---------------------------

RNG = np.random.default_rng(0)


def _u(*shape):
    return RNG.uniform(-2, 2, shape)


def _pos(*shape):
    return RNG.uniform(0.5, 2, shape)


# op name -> (input builders, attrs, output weights shape function)
OP_CASES = {
    "add": ([_u(3, 4), _u(4)], {}),
    "sub": ([_u(3, 4), _u(3, 1)], {}),
    "mul": ([_u(3, 4), _u(3, 4)], {}),
    "div": ([_u(3, 4), _pos(4)], {}),
    "neg": ([_u(5)], {}),
    "matmul": ([_u(2, 3, 4), _u(4, 5)], {}),
    "exp": ([_u(4)], {}),
    "log": ([_pos(4)], {}),
    "sqrt": ([_pos(4)], {}),
    "square": ([_u(4)], {}),
    "tanh": ([_u(4)], {}),
    "sigmoid": ([_u(4)], {}),
    "relu": ([np.array([-1.5, -0.3, 0.4, 1.7])], {}),
    "reduce_sum": ([_u(3, 4)], {"axis": 1}),
    "mean": ([_u(3, 4)], {"axis": 0, "keepdims": True}),
    "logsumexp": ([_u(3, 4)], {"axis": -1}),
    "softmax": ([_u(3, 4)], {"axis": -1}),
    "log_softmax": ([_u(3, 4)], {"axis": -1}),
    "layer_norm": ([_u(3, 6), _u(6), _u(6)], {}),
    "gather": ([_u(5, 3)], {"indices": np.array([[0, 4], [4, 2]])}),
    "slice": ([_u(4, 5)], {"index": (slice(1, 3), np.array([0, 0, 2]))}),
    "concat": ([_u(2, 3), _u(4, 3)], {"axis": 0}),
    "reshape": ([_u(3, 4)], {"shape": (2, 6)}),
    "transpose": ([_u(2, 3, 4)], {"axes": (2, 0, 1)}),
    "conv1d": ([_u(2, 6, 3), _u(4, 3, 3)], {}),
}


def test_op_table_covers_registry():
    builtin = set(OP_CASES)
    assert builtin <= set(ad.supported_ops())
    assert set(ad.supported_ops()) - builtin <= {"rnnt_loss"}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradient_matches_finite_differences(name):
    arrays, attrs = OP_CASES[name]
    params = [parameter(a.copy()) for a in arrays]
    with ad.no_grad():
        shape = ad.forward_op(name, *params, **attrs).shape
    weights = np.random.default_rng(1).uniform(-1, 1, shape)

    def f():
        return (ad.forward_op(name, *params, **attrs) * weights).sum()

    for p, a in zip(params, grads_of(f, *params)):
        assert rel_err(a, central_diff(f, p, eps=1e-6)) <= 1e-6, name


def test_depthwise_conv1d_gradient():
    x, w = parameter(_u(2, 7, 4)), parameter(_u(4, 5))
    weights = _u(2, 7, 4)

    def f():
        return (ad.conv1d(x, w) * weights).sum()

    for p, a in zip([x, w], grads_of(f, x, w)):
        assert rel_err(a, central_diff(f, p, eps=1e-6)) <= 1e-6


@settings(max_examples=25, deadline=None)
@given(
    a=st.floats(-3, 3),
    b=st.floats(-3, 3),
    seed=st.integers(0, 2**16),
)
def test_backward_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x = parameter(rng.uniform(-2, 2, 5))
    f = lambda: ad.tanh(x).sum()  # noqa: E731
    g = lambda: ad.square(x).mean()  # noqa: E731
    (gf,) = grads_of(f, x)
    (gg,) = grads_of(g, x)
    (gc,) = grads_of(lambda: f() * a + g() * b, x)
    np.testing.assert_allclose(gc, a * gf + b * gg, rtol=1e-12, atol=1e-12)


def test_forward_is_bitwise_deterministic():
    rng = np.random.default_rng(3)
    x, w = rng.standard_normal((4, 8)), rng.standard_normal((8, 8))
    outs = [ad.softmax(ad.matmul(Tensor(x), Tensor(w))).data for _ in range(3)]
    assert all(np.array_equal(outs[0], o) for o in outs[1:])


# -- grad_check ------------------------------------------------------------------


def test_grad_check_passes_on_mse():
    target = np.array([0.5, -1.0, 2.0])
    x = parameter(np.array([0.1, 0.2, 0.3]))
    rep = ad.grad_check(lambda: ad.square(x - target).mean(), {"x": x}, tol=1e-6)
    assert rep.passed


def test_grad_check_detects_nondeterminism():
    x = parameter(np.ones(2))
    counter = iter(range(10))
    with pytest.raises(ad.NonDeterministicError):
        ad.grad_check(lambda: x.sum() * float(next(counter)), {"x": x})


def test_grad_check_catches_injected_gradient_bug(monkeypatch):
    x = parameter(np.array([0.3, -0.7, 1.1]))
    f = lambda: ad.tanh(x).sum()  # noqa: E731
    assert ad.grad_check(f, {"x": x}, tol=1e-6).passed
    original = ad._OPS["tanh"]

    def doubled(a):
        out, vjp = original(a)
        return out, lambda g: tuple(2 * v for v in vjp(g))

    monkeypatch.setitem(ad._OPS, "tanh", doubled)
    rep = ad.grad_check(f, {"x": x}, tol=1e-6)
    assert not rep.passed
    assert rep.max_error > 0.4
