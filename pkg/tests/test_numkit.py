import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from detgen.errors import ConfigError, TrainingAbort
from detgen.numkit import Adam, AdamState, Mlp, Rng, adam_step, kernels
from detgen.numkit import _pykernels

from .conftest import finite_difference

compiled = pytest.mark.skipif(kernels.compiled_backend is None, reason="compiled kernels not built")


@compiled
@pytest.mark.parametrize("rows,fan_in,fan_out", [(1, 3, 5), (7, 19, 64), (256, 64, 64), (3, 96, 1)])
def test_backends_bit_identical(rows, fan_in, fan_out):
    r = np.random.default_rng(rows * 1000 + fan_in)
    x = r.standard_normal((rows, fan_in))
    w = r.standard_normal((fan_in, fan_out))
    b = r.standard_normal(fan_out)
    d = r.standard_normal((rows, fan_out))
    c, p = kernels.compiled_backend, _pykernels
    assert np.array_equal(c.affine(x, w, b), p.affine(x, w, b))
    assert np.array_equal(c.grad_weight(x, d), p.grad_weight(x, d))
    wt = np.ascontiguousarray(w.T)
    assert np.array_equal(c.grad_input(d, wt), p.grad_input(d, wt))


@given(st.integers(2, 40), st.integers(0, 2**31 - 1))
def test_affine_rows_independent_of_batch(n, seed):
    # a row's output must not depend on which other rows share the batch
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, 6))
    w = r.standard_normal((6, 5))
    b = r.standard_normal(5)
    full = kernels.affine(x, w, b)
    k = int(r.integers(0, n))
    assert np.array_equal(full[k], kernels.affine(x[k : k + 1], w, b)[0])


def test_affine_matches_matmul():
    r = np.random.default_rng(0)
    x, w, b = r.standard_normal((20, 8)), r.standard_normal((8, 3)), r.standard_normal(3)
    np.testing.assert_allclose(kernels.affine(x, w, b), x @ w + b, rtol=1e-12, atol=1e-12)
    d = r.standard_normal((20, 3))
    np.testing.assert_allclose(kernels.grad_weight(x, d), x.T @ d, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(kernels.grad_input(d, np.ascontiguousarray(w.T)), d @ w.T, rtol=1e-12, atol=1e-12)


def test_rng_streams_reproducible_and_distinct():
    a = Rng(5).child("x", 1).normal(size=4)
    assert np.array_equal(a, Rng(5).child("x", 1).normal(size=4))
    assert not np.array_equal(a, Rng(5).child("x", 2).normal(size=4))
    assert not np.array_equal(a, Rng(6).child("x", 1).normal(size=4))
    assert not np.array_equal(Rng(5, stream=1).normal(size=4), Rng(5).normal(size=4))


@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_mlp_gradient_finite_difference(activation):
    r = Rng(3)
    net = Mlp.init([4, 7, 5, 2], r.child("init"), activation)
    x = r.child("x").normal(size=(6, 4))
    g_out = r.child("g").normal(size=(6, 2))

    def loss():
        return float((net.forward(x) * g_out).sum())

    out, acts = net.forward_trace(x)
    grads, _ = net.backward(acts, g_out)
    assert finite_difference(loss, net.params(), grads, r.child("fd")) < 1e-6


def test_mlp_matches_torch_oracle():
    torch = pytest.importorskip("torch")
    r = Rng(11)
    net = Mlp.init([3, 8, 2], r.child("init"))
    x = r.child("x").normal(size=(5, 3))
    layers = []
    for W, b in zip(net.weights, net.biases):
        lin = torch.nn.Linear(W.shape[0], W.shape[1]).double()
        with torch.no_grad():
            lin.weight.copy_(torch.tensor(W.T))
            lin.bias.copy_(torch.tensor(b))
        layers.append(lin)
    tx = torch.tensor(x, requires_grad=True)
    ty = layers[1](torch.tanh(layers[0](tx)))
    np.testing.assert_allclose(net.forward(x), ty.detach().numpy(), rtol=1e-12, atol=1e-12)
    g = r.child("g").normal(size=(5, 2))
    ty.backward(torch.tensor(g))
    _, acts = net.forward_trace(x)
    grads, g_in = net.backward(acts, g)
    np.testing.assert_allclose(grads["W0"], layers[0].weight.grad.numpy().T, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(g_in, tx.grad.numpy(), rtol=1e-10, atol=1e-12)


def test_mlp_rejects_bad_shapes_and_nonfinite():
    net = Mlp.init([2, 3, 1], Rng(0))
    with pytest.raises(ConfigError):
        net.forward(np.zeros((4, 3)))
    with pytest.raises(TrainingAbort):
        net.forward(np.array([[np.nan, 0.0]]))


def test_mlp_checkpoint_round_trip_and_freeze():
    net = Mlp.init([2, 4, 3], Rng(0))
    back = Mlp.from_dict(net.to_dict())
    x = np.ones((2, 2))
    assert np.array_equal(net.forward(x), back.forward(x))
    net.freeze()
    with pytest.raises(ValueError):
        net.weights[0][0, 0] = 1.0


def test_adam_matches_torch_oracle():
    torch = pytest.importorskip("torch")
    r = np.random.default_rng(2)
    p0 = r.standard_normal((3, 2))
    grads = [r.standard_normal((3, 2)) for _ in range(5)]
    tp = torch.tensor(p0.copy(), requires_grad=True)
    opt = torch.optim.Adam([tp], lr=1e-2)
    params = {"p": p0.copy()}
    ours = Adam(params, 1e-2)
    for g in grads:
        opt.zero_grad()
        tp.grad = torch.tensor(g)
        opt.step()
        ours.step({"p": g})
    np.testing.assert_allclose(params["p"], tp.detach().numpy(), rtol=1e-12, atol=1e-13)


def test_adam_step_is_pure_and_rejects_nan():
    p = {"w": np.ones(3)}
    new, state = adam_step(p, {"w": np.ones(3)}, AdamState(), 0.1)
    assert np.array_equal(p["w"], np.ones(3))
    assert state.step == 1
    # first bias-corrected step moves each coordinate by about lr
    np.testing.assert_allclose(new["w"], 0.9, atol=1e-6)
    with pytest.raises(TrainingAbort, match="'w'"):
        adam_step(p, {"w": np.array([1.0, np.inf, 0.0])}, AdamState(), 0.1)
