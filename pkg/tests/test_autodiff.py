import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asrdefense import autodiff as ad
from asrdefense.autodiff import Tensor


def zero_grad(t):
    return t.grad is None or not np.any(t.grad)


def T(values, grad=False, dtype=np.float64):
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=grad, dtype=dtype)


# ----------------------------------------------------------------------
# worked examples


def test_add_componentwise():
    np.testing.assert_array_equal((T([1, 2]) + T([3, 4])).data, [4, 6])


def test_sign_zero_is_zero_and_has_no_gradient():
    x = T([-0.5, 0.0, 2.0], grad=True)
    y = ad.sign(x)
    np.testing.assert_array_equal(y.data, [-1, 0, 1])
    (y * T([3.0, 3.0, 3.0]) + x * 0.0).sum().backward()
    assert zero_grad(x)


def test_relu_backward():
    x = T([-1.0, 2.0], grad=True)
    ad.relu(x).backward(np.ones(2))
    np.testing.assert_array_equal(x.grad, [0, 1])


def test_matmul_examples():
    np.testing.assert_array_equal(ad.matmul(T([[1, 0], [0, 1]]), T([[5], [7]])).data, [[5], [7]])
    np.testing.assert_array_equal(ad.matmul(T([[1, 2]]), T([[3], [4]])).data, [[11]])
    b = T([[3.0], [4.0]], grad=True)
    ad.matmul(T([[1, 2]]), b).sum().backward()
    np.testing.assert_array_equal(b.grad, [[1], [2]])


def test_matmul_dimension_mismatch():
    with pytest.raises(ValueError):
        ad.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


@pytest.mark.parametrize("x, k, stride, dilation, expected", [
    ([1, 2, 3], [1], 1, 1, [1, 2, 3]),
    ([1, 2, 3, 4], [1, 1], 2, 1, [3, 7]),
    ([1, 2, 3, 4], [1, 1], 1, 2, [4, 6]),
])
def test_conv1d_examples(x, k, stride, dilation, expected):
    out = ad.conv1d(T([x]), T([[k]]), stride=stride, dilation=dilation)
    np.testing.assert_array_equal(out.data, [expected])


def test_conv1d_rejects_empty_output():
    with pytest.raises(ValueError):
        ad.conv1d(T([[1.0, 2.0]]), T([[[1.0, 1.0, 1.0]]]))


def test_log_softmax_examples():
    np.testing.assert_allclose(ad.log_softmax(T([0.0, 0.0])).data, np.log([0.5, 0.5]))
    v = np.random.default_rng(0).normal(size=(4, 7))
    np.testing.assert_allclose(np.exp(ad.log_softmax(T(v)).data).sum(-1), 1.0)
    assert np.isfinite(ad.log_softmax(T([1000.0, 0.0])).data).all()


def test_backward_examples():
    x = T([1.0, 2.0], grad=True)
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2, 4])

    y = T([1.0, 2.0], grad=True)
    z = T([5.0], grad=True)
    (z * 2.0).sum().backward()
    assert zero_grad(y)


def test_backward_needs_scalar():
    x = T([1.0, 2.0], grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_backward_accumulates():
    x = T([1.0, 2.0], grad=True)
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [6, 6])


def test_backward_only_restricts_leaves():
    x, w = T([1.0, 2.0], grad=True), T([3.0, 4.0], grad=True)
    ad.backward((x * w).sum(), only=[x])
    np.testing.assert_array_equal(x.grad, [3, 4])
    assert w.grad is None


def test_non_finite_is_an_error():
    with pytest.raises(ad.NonFiniteError):
        T([1.0]) / T([0.0]) * np.inf
    with pytest.raises(ad.NonFiniteError):
        ad.exp(T([1e5]))


def test_log_guard():
    np.testing.assert_allclose(ad.log(T([0.0])).data, np.log(1e-8))
    with pytest.raises(ValueError):
        ad.log(T([-1.0]))


def test_no_grad_is_thread_local():
    import threading

    seen = []
    with ad.no_grad():
        t = threading.Thread(target=lambda: seen.append(ad.grad_enabled()))
        t.start()
        t.join()
        assert not ad.grad_enabled()
    assert seen == [True] and ad.grad_enabled()


def test_tape_is_topological_and_visits_once():
    x = T([1.0, 2.0], grad=True)
    y = x * 2.0
    loss = (y * y + y).sum()
    tape = ad.build_tape(loss)
    seen = set()
    for node in tape.nodes:
        assert all(id(p) in seen or not p._parents for p in node._parents if p.requires_grad)
        assert id(node) not in seen
        seen.add(id(node))


def test_optimizers():
    w = T([3.0], grad=True)
    (w * w).sum().backward()
    ad.sgd_step([w], lr=0.1)
    np.testing.assert_allclose(w.data, [2.4])

    w = T([0.0], grad=True)
    opt = ad.SGD([w], lr=0.1)
    for _ in range(200):
        opt.zero_grad()
        ((w - 5.0) * (w - 5.0)).sum().backward()
        opt.step()
    assert abs(w.data[0] - 5) < 1e-3

    w = T([1.5, -2.0], grad=True)
    w.grad = np.zeros(2)
    adam = ad.Adam([w], lr=0.1)
    adam.step()
    adam.step()
    np.testing.assert_array_equal(w.data, [1.5, -2.0])


def test_optimizer_missing_grad():
    with pytest.raises(ValueError):
        ad.sgd_step([T([1.0], grad=True)], lr=0.1)


def test_aten_round_trip(tmp_path):
    arr = np.random.default_rng(1).normal(size=(3, 4, 5)).astype(np.float32)
    ad.save_tensor(tmp_path / "x.aten", arr)
    raw = (tmp_path / "x.aten").read_bytes()
    assert raw[:4] == b"ATEN"
    assert np.frombuffer(raw[4:8], "<u4")[0] == 3
    np.testing.assert_array_equal(np.frombuffer(raw[8:20], "<u4"), [3, 4, 5])
    assert len(raw) == 20 + arr.size * 4
    np.testing.assert_array_equal(ad.load_tensor(tmp_path / "x.aten"), arr)


def test_aten_rejects_bad_magic(tmp_path):
    (tmp_path / "bad.aten").write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(ValueError):
        ad.load_tensor(tmp_path / "bad.aten")


# ----------------------------------------------------------------------
# finite-difference checks (float64)

RNG = np.random.default_rng(1234)


def rand(*shape, positive=False):
    v = RNG.normal(size=shape)
    return T(np.abs(v) + 0.5 if positive else v, grad=True)


GRAD_CASES = {
    "add": lambda a, b: (a + b).sum(),
    "sub_broadcast": lambda a, b: (a - b[0]).sum(),
    "mul": lambda a, b: (a * b).sum(),
    "div": lambda a, b: (a / (b * b + 1.0)).sum(),
    "abs": lambda a, b: ad.abs_(a + 0.1).sum(),
    "exp": lambda a, b: ad.exp(a * 0.5).sum(),
    "tanh": lambda a, b: (ad.tanh(a) * b).sum(),
    "sigmoid": lambda a, b: (ad.sigmoid(a) * b).sum(),
    "relu": lambda a, b: (ad.relu(a) * b).sum(),
    "power": lambda a, b: ad.power(a * a + 1.0, 1.5).sum(),
    "sqrt": lambda a, b: ad.sqrt(a * a + 1.0).sum(),
    "log": lambda a, b: ad.log(a * a + 0.5).sum(),
    "magnitude": lambda a, b: (ad.magnitude(a, b) * a).sum(),
    "reduce_mean_axis": lambda a, b: (ad.reduce_mean(a * b, axis=0) ** 2).sum(),
    "reduce_max": lambda a, b: ad.reduce_max(a * b, axis=1).sum(),
    "log_softmax": lambda a, b: (ad.log_softmax(a, axis=-1) * b).sum(),
    "matmul": lambda a, b: ad.matmul(a, ad.transpose(b)).sum(),
    "reshape_getitem": lambda a, b: (ad.reshape(a, (-1,))[2:7] * ad.reshape(b, (-1,))[:5]).sum(),
    "pad_reflect": lambda a, b: (ad.pad_last(a, 2, 1, mode="reflect") ** 2).sum(),
    "concat": lambda a, b: (ad.concat([a, b], axis=1) ** 2).sum(),
    "frame": lambda a, b: (ad.frame(ad.reshape(a, (-1,)), 4, 2) ** 2).sum(),
    "pick": lambda a, b: ad.pick(ad.log_softmax(a * b), np.array([0, 2, 1])).sum(),
    "maximum": lambda a, b: (ad.maximum(a, 0.1) * b).sum(),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradcheck_ops(name):
    a, b = rand(3, 4), rand(3, 4)
    err = ad.gradcheck(lambda: GRAD_CASES[name](a, b), [a, b])
    assert err < 1e-3, f"{name}: relative error {err:.2e}"


def test_gradcheck_conv_layers():
    x, w = rand(2, 3, 11), rand(4, 3, 3)
    assert ad.gradcheck(lambda: (ad.conv1d(x, w, stride=2, dilation=2, padding=1) ** 2).sum(), [x, w]) < 1e-3
    y, v = rand(2, 3, 5), rand(3, 2, 4)
    assert ad.gradcheck(lambda: (ad.conv_transpose1d(y, v, stride=2) ** 2).sum(), [y, v]) < 1e-3


def test_gradcheck_twenty_parameter_network():
    w1, w2 = rand(3, 4), rand(4, 2)
    x = T(RNG.normal(size=(5, 3)))
    net = lambda: ad.log_softmax(ad.matmul(ad.tanh(ad.matmul(x, w1)), w2)).sum()  # noqa: E731
    assert w1.data.size + w2.data.size == 20
    assert ad.gradcheck(net, [w1, w2]) < 1e-3


def test_tape_determinism():
    def run():
        rng = np.random.default_rng(5)
        w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        x = Tensor(rng.normal(size=(3, 4)))
        loss = ad.log_softmax(ad.matmul(x, w)).sum()
        loss.backward()
        return loss.data.tobytes(), w.grad.tobytes()

    assert run() == run()


# ----------------------------------------------------------------------
# conv1d against a naive loop oracle


def naive_conv1d(x, w, stride, dilation, padding):
    c_in, n = x.shape
    c_out, _, k = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding)))
    n_out = (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((c_out, n_out), dtype=np.int64)
    for o in range(c_out):
        for t in range(n_out):
            for c in range(c_in):
                for j in range(k):
                    out[o, t] += w[o, c, j] * xp[c, t * stride + j * dilation]
    return out


@settings(max_examples=200, deadline=None)
@given(n=st.integers(1, 16), k=st.integers(1, 4), stride=st.integers(1, 3), dilation=st.integers(1, 3),
       padding=st.integers(0, 3), c_in=st.integers(1, 3), c_out=st.integers(1, 3), seed=st.integers(0, 2**16))
def test_conv1d_matches_naive_oracle(n, k, stride, dilation, padding, c_in, c_out, seed):
    if n + 2 * padding < dilation * (k - 1) + 1:
        return
    rng = np.random.default_rng(seed)
    x = rng.integers(-5, 6, size=(c_in, n))
    w = rng.integers(-3, 4, size=(c_out, c_in, k))
    got = ad.conv1d(T(x), T(w), stride=stride, dilation=dilation, padding=padding).data
    np.testing.assert_array_equal(got, naive_conv1d(x, w, stride, dilation, padding))


@settings(max_examples=50, deadline=None)
@given(shape=st.lists(st.integers(1, 4), min_size=1, max_size=3), seed=st.integers(0, 2**16))
def test_grad_shape_matches_values(shape, seed):
    x = Tensor(np.random.default_rng(seed).normal(size=shape), requires_grad=True)
    (ad.tanh(x) * x).sum().backward()
    assert x.grad.shape == x.data.shape
    assert x.dtype == np.float32
