import numpy as np
import pytest

from arrowcd import autodiff as ad
from arrowcd.autodiff import ShapeError, Tape, Tensor, backward


def numeric_grad(f, arrays, h=1e-5):
    """Central differences of scalar f over every entry of every array."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            up = f(*arrays)
            a[i] = old - h
            down = f(*arrays)
            a[i] = old
            g[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def check(fn, *arrays, tol=1e-6):
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    # random projection makes any output shape a scalar
    probe = {}

    def scalar(*arrs):
        with Tape():
            out = fn(*[Tensor(a) for a in arrs])
        if "w" not in probe:
            probe["w"] = np.random.default_rng(7).normal(size=out.shape)
        return float(np.sum(out.data * probe["w"]))

    scalar(*arrays)
    ts = [Tensor(a.copy()) for a in arrays]
    with Tape() as tape:
        out = fn(*ts)
        loss = ad.reduce_sum(ad.multiply(out, Tensor(probe["w"])))
    got = backward(tape, loss, ts)
    want = numeric_grad(scalar, [a.copy() for a in arrays])
    for g, w in zip(got, want):
        scale = max(np.max(np.abs(w)), 1.0)
        assert np.max(np.abs(g - w)) / scale <= tol


R = np.random.default_rng(0)


def rn(*shape):
    return R.normal(size=shape)


PRIMITIVES = {
    "add": (lambda a, b: a + b, [rn(3, 4), rn(4)]),
    "subtract": (lambda a, b: a - b, [rn(2, 3), rn(2, 1)]),
    "multiply": (lambda a, b: a * b, [rn(3, 4), rn(3, 4)]),
    "divide": (lambda a, b: a / b, [rn(3, 4), rn(3, 4) ** 2 + 0.5]),
    "matmul": (lambda a, b: a @ b, [rn(2, 3), rn(3, 4)]),
    "matmul_batched": (lambda a, b: a @ b, [rn(5, 2, 3), rn(3, 4)]),
    "concat": (lambda a, b: ad.concat([a, b], axis=-1), [rn(2, 3), rn(2, 2)]),
    "slice": (lambda a: a[1:, ::2], [rn(3, 5)]),
    "transpose": (lambda a: ad.transpose(a, (1, 0, 2)), [rn(2, 3, 4)]),
    "reshape": (lambda a: ad.reshape(a, (6, 2)), [rn(3, 4)]),
    "reduce_mean": (lambda a: ad.reduce_mean(a, axis=1), [rn(3, 4)]),
    "reduce_sum": (lambda a: ad.reduce_sum(a, axis=0, keepdims=True), [rn(3, 4)]),
    "softmax": (ad.softmax, [rn(3, 5)]),
    "layer_norm": (ad.layer_norm, [rn(4, 6)]),
    "gelu": (ad.gelu, [rn(3, 4)]),
    "sigmoid": (ad.sigmoid, [rn(3, 4)]),
    "log": (ad.log, [rn(3, 4) ** 2 + 0.5]),
    "exp": (ad.exp, [rn(3, 4)]),
    "logsumexp": (lambda a: ad.logsumexp(a, axis=-1), [rn(3, 4)]),
    "log_sigmoid": (ad.log_sigmoid, [rn(3, 4) * 3]),
    "log1mexp": (ad.log1mexp, [-(rn(3, 4) ** 2) - 0.05]),
    "clip": (lambda a: ad.clip(a, -0.5, 0.5), [np.array([[-2.0, -0.2, 0.1, 3.0]])]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_central_differences(name):
    fn, arrays = PRIMITIVES[name]
    check(fn, *arrays)


def test_sigmoid_at_zero():
    x = Tensor(np.array(0.0))
    with Tape() as tape:
        y = ad.sigmoid(x)
    assert y.item() == 0.5
    (g,) = backward(tape, y, [x])
    assert g == 0.25


def test_matmul_shape_contract():
    assert (Tensor(rn(2, 3)) @ Tensor(rn(3, 4))).shape == (2, 4)
    with pytest.raises(ShapeError, match="matmul"):
        Tensor(rn(2, 3)) @ Tensor(rn(2, 4))


def test_shape_errors_name_primitive():
    with pytest.raises(ShapeError, match="add"):
        Tensor(rn(2, 3)) + Tensor(rn(4))
    with pytest.raises(ShapeError, match="concat"):
        ad.concat([Tensor(rn(2, 3)), Tensor(rn(3, 3))], axis=-1)


def test_logsumexp_no_overflow():
    x = Tensor(np.array([1000.0, 1000.0]))
    assert ad.logsumexp(x).item() == pytest.approx(1000 + np.log(2))


def test_sum_of_parameter_gives_ones():
    w = Tensor(rn(3, 2))
    with Tape() as tape:
        loss = ad.reduce_sum(w)
    (g,) = backward(tape, loss, [w])
    assert np.array_equal(g, np.ones((3, 2)))


def test_constant_loss_gives_zero_gradients():
    w = Tensor(rn(3))
    with Tape() as tape:
        loss = ad.reduce_sum(Tensor(np.ones(3)))
    (g,) = backward(tape, loss, [w])
    assert np.array_equal(g, np.zeros(3))


def test_non_scalar_loss_rejected():
    w = Tensor(rn(3))
    with Tape() as tape:
        y = w * 2.0
    with pytest.raises(ShapeError):
        backward(tape, y, [w])


def test_gradients_are_additive_over_independent_losses():
    w = rn(4, 3)
    x = rn(5, 4)

    def f1(w):
        return ad.reduce_sum(ad.gelu(Tensor(x) @ w))

    def f2(w):
        return ad.reduce_mean(ad.sigmoid(w) * w)

    wt = Tensor(w)
    with Tape() as t:
        total = f1(wt) + f2(wt)
    (g_total,) = backward(t, total, [wt])
    parts = []
    for f in (f1, f2):
        wt = Tensor(w)
        with Tape() as t:
            out = f(wt)
        parts.append(backward(t, out, [wt])[0])
    assert np.allclose(g_total, parts[0] + parts[1], rtol=1e-13, atol=1e-15)


def test_determinism_bit_identical():
    def run():
        w = Tensor(np.linspace(-1, 1, 12).reshape(3, 4))
        x = Tensor(np.linspace(0, 2, 15).reshape(5, 3))
        with Tape() as t:
            loss = ad.reduce_sum(ad.softmax(ad.layer_norm(x @ w)) * 3.0)
        return loss.data.copy(), backward(t, loss, [w])[0]

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


def test_reused_tensor_accumulates():
    x = Tensor(np.array(3.0))
    with Tape() as t:
        y = x * x * x
    (g,) = backward(t, y, [x])
    assert g == pytest.approx(27.0)


def test_value_and_grad_helper():
    f = ad.value_and_grad(lambda a: ad.reduce_sum(a * a))
    v, (g,) = f(np.array([1.0, 2.0]))
    assert v == 5.0 and np.allclose(g, [2.0, 4.0])


def test_no_tape_records_nothing():
    y = Tensor(rn(2)) * 2.0
    assert y._node is None


def test_float32_is_preserved():
    w = Tensor(rn(3, 3).astype(np.float32))
    y = ad.gelu(w @ w) * 2.0
    assert y.dtype == np.float32
