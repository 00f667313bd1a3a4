import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from typhoformer import autodiff as ad
from typhoformer.autodiff import NotScalarLoss, ShapeMismatch, Tensor, grad_check

rng = np.random.default_rng(1234)


def leaf(*shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def weighted_sum(t: Tensor, w: np.ndarray) -> Tensor:
    # a generic scalar read-out so every output entry gets a distinct weight
    return ad.sum_(ad.mul(t, w))


# op name -> (builder of inputs, op)
UNARY = {
    "sigmoid": ad.sigmoid,
    "tanh": ad.tanh,
    "relu": ad.relu,
    "softmax": lambda x: ad.softmax(x, axis=-1),
    "softmax_axis0": lambda x: ad.softmax(x, axis=0),
    "layer_norm": ad.layer_norm,
    "mean_axis": lambda x: ad.mean(x, axis=-1),
    "mean_all": ad.mean,
    "sum_keep": lambda x: ad.sum_(x, axis=0, keepdims=True),
    "slice": lambda x: ad.slice_(x, (slice(None), slice(1, 3))),
    "slice_fancy": lambda x: ad.slice_(x, (np.array([0, 0, 2]),)),
    "transpose": ad.transpose,
    "reshape": lambda x: ad.reshape(x, (-1,)),
    "neg": ad.neg,
    "broadcast_to": lambda x: ad.broadcast_to(ad.reshape(x, (1,) + x.shape), (2,) + x.shape),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_match_finite_differences(name):
    op = UNARY[name]
    x = leaf(3, 4)
    if name == "relu":
        x.data = np.where(np.abs(x.data) < 0.05, 0.3, x.data)  # stay off the kink
    w = rng.normal(size=op(Tensor(x.data)).shape)
    report = grad_check(lambda t: weighted_sum(op(t), w), x)
    assert report.passed, report.max_rel_error


BINARY = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "div": lambda a, b: ad.div(a, ad.add(ad.mul(b, b), 1.0)),
    "matmul": ad.matmul,
    "concat": lambda a, b: ad.concat([a, b], axis=-1),
    "stack": lambda a, b: ad.stack([a, b], axis=1),
    "mse": ad.mse,
}
SHAPES = {"matmul": ((2, 3, 4), (4, 5)), "concat": ((3, 4), (3, 2)), "stack": ((3, 4), (3, 4))}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("which", [0, 1])
def test_binary_ops_match_finite_differences(name, which):
    op = BINARY[name]
    sa, sb = SHAPES.get(name, ((3, 4), (3, 4)))
    a, b = leaf(*sa), leaf(*sb)
    w = rng.normal(size=op(Tensor(a.data), Tensor(b.data)).shape)
    if which == 0:
        report = grad_check(lambda t: weighted_sum(op(t, b), w), a)
    else:
        report = grad_check(lambda t: weighted_sum(op(a, t), w), b)
    assert report.passed, report.max_rel_error


@pytest.mark.parametrize("shape_b", [(4,), (1, 4), (3, 1), (1, 1)])
def test_broadcast_add_gradient_sums_over_broadcast_axes(shape_b):
    a, b = leaf(3, 4), leaf(*shape_b)
    w = rng.normal(size=(3, 4))
    report = grad_check(lambda t: weighted_sum(ad.add(a, t), w), b)
    assert report.passed
    assert report.analytic.shape == shape_b
    expected = w.sum(axis=0) if shape_b == (4,) else None
    if expected is not None:
        assert np.allclose(report.analytic, expected)


def test_three_layer_composition():
    x = leaf(5, 6)
    W1, W2, W3 = rng.normal(size=(6, 8)), rng.normal(size=(8, 8)), rng.normal(size=(8, 2))
    target = rng.normal(size=(5, 2))

    def f(t):
        h = ad.tanh(ad.matmul(t, W1))
        h = ad.layer_norm(ad.sigmoid(ad.matmul(h, W2)))
        return ad.mse(ad.matmul(h, W3), target)

    report = grad_check(f, x)
    assert report.max_rel_error < 1e-4


def test_closed_forms():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5
    x = Tensor(np.zeros(()), requires_grad=True)
    ad.sigmoid(x).backward()
    assert x.grad == 0.25
    sm = ad.softmax(Tensor(np.full(7, 3.3))).data
    assert np.allclose(sm, 1 / 7)

    x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    ad.mse(x, np.zeros((4, 3))).backward()
    assert np.allclose(x.grad, 2 * x.data / 12)

    y = Tensor(rng.normal(size=5), requires_grad=True)
    loss = ad.mse(y, y.data.copy())
    loss.backward()
    assert loss.item() == 0.0 and np.all(y.grad == 0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-100, 100)))
def test_layer_norm_statistics(x):
    out = ad.layer_norm(Tensor(x)).data
    assert np.allclose(out.mean(axis=-1), 0, atol=1e-9)
    var = x.var(axis=-1)
    expected = var / (var + ad.LAYER_NORM_EPS)
    assert np.allclose(out.var(axis=-1), expected, atol=1e-9)


@pytest.mark.parametrize("name", ["sigmoid", "tanh", "softmax", "layer_norm", "neg", "transpose"])
def test_backward_is_linear_in_outputs(name):
    # d(a*f1 + b*f2) = a*d(f1) + b*d(f2) for two read-outs of the same graph
    op = UNARY[name]
    x = leaf(3, 4)
    shape = op(Tensor(x.data)).shape
    w1, w2 = rng.normal(size=shape), rng.normal(size=shape)

    def grad_of(fn):
        x.grad = None
        fn().backward()
        return x.grad.copy()

    g1 = grad_of(lambda: weighted_sum(op(x), w1))
    g2 = grad_of(lambda: weighted_sum(op(x), w2))
    g12 = grad_of(lambda: ad.add(ad.mul(weighted_sum(op(x), w1), 2.0), ad.mul(weighted_sum(op(x), w2), -3.0)))
    assert np.allclose(g12, 2 * g1 - 3 * g2, atol=1e-12)


def test_shared_subgraph_accumulates():
    x = leaf(3)
    y = ad.tanh(x)
    ad.sum_(ad.add(ad.mul(y, y), y)).backward()
    t = np.tanh(x.data)
    assert np.allclose(x.grad, (2 * t + 1) * (1 - t * t))


def test_deep_chain_is_not_recursive():
    x = Tensor(np.ones(2), requires_grad=True)
    y = x
    for _ in range(5000):
        y = ad.add(y, 0.0)
    ad.sum_(y).backward()
    assert np.all(x.grad == 1)


def test_not_scalar_loss():
    with pytest.raises(NotScalarLoss):
        leaf(2, 2).__mul__(2.0).backward()


@pytest.mark.parametrize("fn", [
    lambda: ad.add(leaf(3, 4), leaf(2, 4)),
    lambda: ad.matmul(leaf(3, 4), leaf(3, 4)),
    lambda: ad.mse(leaf(3), leaf(4)),
    lambda: ad.concat([leaf(3, 4), leaf(2, 3)], axis=-1),
    lambda: ad.reshape(leaf(3, 4), (5,)),
])
def test_shape_mismatch(fn):
    with pytest.raises(ShapeMismatch):
        fn()


def test_no_grad_builds_no_graph():
    x = leaf(3)
    with ad.no_grad():
        y = ad.tanh(x)
    assert not y.requires_grad and y._parents == ()


def test_no_grad_is_thread_local():
    seen = []
    gate = threading.Event()
    done = threading.Event()

    def other():
        gate.wait()
        seen.append(ad.is_grad_enabled())
        done.set()

    t = threading.Thread(target=other)
    t.start()
    with ad.no_grad():
        gate.set()
        done.wait()
    t.join()
    assert seen == [True]


def test_grad_check_detects_wrong_gradient():
    x = leaf(4)

    def bad(t):
        sq = ad.mul(t, t)
        sq._grad_fn = lambda g: (g * t.data, None)  # drop half of the product rule
        return ad.sum_(sq)

    assert not grad_check(bad, x).passed


def test_checkpoint_round_trip(tmp_path):
    tensors = {"a.W": rng.normal(size=(3, 2)), "b": np.array([1e-300, -0.0, 1 / 3]), "s": np.array(2.5)}
    path = tmp_path / "ck.tyfo"
    ad.save_tensors(path, tensors)
    assert path.read_text().startswith("TYFO1\n")
    back = ad.load_tensors(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == np.shape(tensors[k])
        assert back[k].tobytes() == np.asarray(tensors[k], dtype=np.float64).tobytes()


@pytest.mark.parametrize("text", ["", "TYFO2\n", "TYFO1\na|2|1.0\n", "TYFO1\na|2|1.0,x\n", "TYFO1\nab\n"])
def test_checkpoint_errors(tmp_path, text):
    path = tmp_path / "bad.tyfo"
    path.write_text(text)
    with pytest.raises(ad.CheckpointError):
        ad.load_tensors(path)
