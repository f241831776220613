import numpy as np
import pytest

from speechkd import diffcore as dc
from speechkd.errors import ConfigError, ContractError, ShapeError


def test_matmul_identity():
    a = dc.as_ndarray(np.eye(2))
    b = dc.as_ndarray([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(dc.matmul(a, b).data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_scalar_case():
    out = dc.matmul(dc.as_ndarray([[2.0]]), dc.as_ndarray([[3.0]]))
    assert out.data[0, 0] == 6.0


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(5, 4))
    b = rng.normal(size=(4, 3))
    expect = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(4):
                expect[i, j] += a[i, k] * b[k, j]
    got = dc.matmul(dc.as_ndarray(a), dc.as_ndarray(b)).data
    assert np.max(np.abs(got - expect)) <= 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        dc.matmul(dc.as_ndarray(np.zeros((2, 3))), dc.as_ndarray(np.zeros((2, 3))))


def test_softmax_trivial_rows():
    out = dc.softmax_rows(dc.as_ndarray([0.0, 0.0]))
    assert np.allclose(out.data, [0.5, 0.5], atol=1e-12)
    out = dc.softmax_rows(dc.as_ndarray([0.0, np.log(3.0)]))
    assert np.allclose(out.data, [0.25, 0.75], atol=1e-12)


def test_softmax_shift_invariance_and_row_sums():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6, 9))
    base = dc.softmax_rows(dc.as_ndarray(x)).data
    shifted = dc.softmax_rows(dc.as_ndarray(x + 17.5)).data
    assert np.max(np.abs(base - shifted)) <= 1e-12
    assert np.max(np.abs(base.sum(axis=-1) - 1.0)) <= 1e-9


def test_layer_norm_constant_vector_is_zero():
    gain = dc.Parameter(np.ones(4))
    bias = dc.Parameter(np.zeros(4))
    out = dc.layer_norm(dc.as_ndarray([3.0, 3.0, 3.0, 3.0]), gain, bias)
    assert np.allclose(out.data, 0.0)


def test_layer_norm_two_point_case():
    gain = dc.Parameter(np.ones(2))
    bias = dc.Parameter(np.zeros(2))
    out = dc.layer_norm(dc.as_ndarray([1.0, 3.0]), gain, bias)
    assert np.allclose(out.data, [-1.0, 1.0], atol=1e-4)


def test_layer_norm_moments():
    rng = np.random.default_rng(11)
    x = rng.normal(2.0, 3.0, size=(5, 8))
    gain = dc.Parameter(np.ones(8))
    bias = dc.Parameter(np.zeros(8))
    out = dc.layer_norm(dc.as_ndarray(x), gain, bias, eps=1e-12).data
    assert np.max(np.abs(out.mean(axis=-1))) <= 1e-9
    assert np.max(np.abs(out.var(axis=-1) - 1.0)) <= 1e-6


def test_layer_norm_rejects_tiny_dim():
    with pytest.raises(ShapeError):
        dc.layer_norm(dc.as_ndarray([1.0]), dc.Parameter(np.ones(1)), dc.Parameter(np.zeros(1)))


def test_activation_values():
    assert dc.activation(dc.as_ndarray([-1.0, 2.0]), "relu").data.tolist() == [0.0, 2.0]
    assert dc.activation(dc.as_ndarray([0.0]), "tanh").data[0] == 0.0
    assert dc.activation(dc.as_ndarray([0.0]), "gelu").data[0] == 0.0
    with pytest.raises(ConfigError):
        dc.activation(dc.as_ndarray([0.0]), "swish")


def test_gelu_exact_erf_form():
    from scipy.special import erf

    x = np.linspace(-3, 3, 13)
    got = dc.activation(dc.as_ndarray(x), "gelu").data
    expect = 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))
    assert np.allclose(got, expect, atol=1e-15)


def test_backward_sum_of_squares():
    p = dc.Parameter(np.array([1.0, -2.0]))
    with dc.Tape() as tape:
        out = dc.reduce_sum(dc.mul(p.node, p.node))
    tape.backward(out)
    assert np.allclose(p.grad, [2.0, -4.0])


def test_backward_requires_scalar():
    p = dc.Parameter(np.ones(3))
    with dc.Tape() as tape:
        out = dc.mul(p.node, p.node)
    with pytest.raises(ContractError):
        tape.backward(out)


def test_frozen_parameter_grad_stays_zero():
    frozen = dc.Parameter(np.array([1.0, 2.0]), trainable=False)
    live = dc.Parameter(np.array([3.0, 4.0]))
    with dc.Tape() as tape:
        out = dc.reduce_sum(dc.mul(frozen.node, live.node))
    tape.backward(out)
    assert np.array_equal(frozen.grad, [0.0, 0.0])
    assert np.allclose(live.grad, [1.0, 2.0])


def test_grad_accumulates_until_zeroed():
    p = dc.Parameter(np.array([2.0]))
    for _ in range(2):
        with dc.Tape() as tape:
            out = dc.reduce_sum(dc.mul(p.node, p.node))
        tape.backward(out)
    assert np.allclose(p.grad, [8.0])
    p.zero_grad()
    assert np.array_equal(p.grad, [0.0])


def test_backward_does_not_mutate_forward_values():
    rng = np.random.default_rng(5)
    p = dc.Parameter(rng.normal(size=(4, 4)))
    x = dc.as_ndarray(rng.normal(size=(2, 4)))
    with dc.Tape() as tape:
        h = dc.activation(dc.matmul(x, p.node), "tanh")
        out = dc.reduce_sum(dc.mul(h, h))
    snap = h.data.copy()
    tape.backward(out)
    assert np.array_equal(h.data, snap)


def _mlp_nll_factory(seed):
    """Two-layer MLP + softmax + NLL closure on a random 6-dim input."""
    rng = np.random.default_rng(seed)
    w1 = dc.Parameter(rng.normal(size=(6, 5)))
    b1 = dc.Parameter(rng.normal(size=5))
    w2 = dc.Parameter(rng.normal(size=(5, 4)))
    b2 = dc.Parameter(rng.normal(size=4))
    x = rng.normal(size=(3, 6))
    onehot = np.zeros((3, 4))
    onehot[np.arange(3), rng.integers(0, 4, size=3)] = 1.0

    def forward():
        h = dc.activation(dc.add(dc.matmul(dc.as_ndarray(x), w1.node), b1.node), "tanh")
        logits = dc.add(dc.matmul(h, w2.node), b2.node)
        logp = dc.log_softmax(logits)
        return dc.neg(dc.reduce_mean(dc.reduce_sum(dc.mul(logp, dc.as_ndarray(onehot)), axis=-1)))

    return forward, {"w1": w1, "b1": b1, "w2": w2, "b2": b2}


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_mlp_nll_finite_difference(seed):
    forward, params = _mlp_nll_factory(seed)
    report = dc.backward_and_check(forward, params)
    assert report.passed, str(report)


def test_conv1d_floor_length_and_gradient():
    rng = np.random.default_rng(13)
    x = dc.as_ndarray(rng.normal(size=(2, 3, 17)))
    w = dc.Parameter(rng.normal(size=(4, 3, 5)))
    b = dc.Parameter(rng.normal(size=4))
    out = dc.conv1d(x, w, b, stride=2, padding="floor")
    assert out.shape == (2, 4, 8)

    def forward():
        y = dc.conv1d(x, w, b, stride=2, padding="floor")
        return dc.reduce_sum(dc.mul(y, y))

    report = dc.backward_and_check(forward, {"w": w, "b": b}, max_coords=30)
    assert report.passed, str(report)


def test_conv1d_same_keeps_length():
    rng = np.random.default_rng(14)
    x = dc.as_ndarray(rng.normal(size=(1, 2, 9)))
    w = dc.Parameter(rng.normal(size=(2, 2, 7)))
    out = dc.conv1d(x, w, None, stride=1, padding="same")
    assert out.shape == (1, 2, 9)


def test_gather_rows_gradient():
    table = dc.Parameter(np.arange(12.0).reshape(4, 3))
    ids = np.array([1, 1, 3])
    with dc.Tape() as tape:
        out = dc.reduce_sum(dc.gather_rows(table.node, ids))
    tape.backward(out)
    expect = np.zeros((4, 3))
    expect[1] = 2.0
    expect[3] = 1.0
    assert np.array_equal(table.grad, expect)


def test_operator_sugar_matches_primitives():
    a = dc.as_ndarray([1.0, 2.0])
    b = dc.as_ndarray([3.0, 4.0])
    assert np.array_equal((a + b).data, [4.0, 6.0])
    assert np.array_equal((a - b).data, [-2.0, -2.0])
    assert np.array_equal((a * b).data, [3.0, 8.0])
    assert np.allclose((a / b).data, [1 / 3, 0.5])
    assert np.array_equal((-a).data, [-1.0, -2.0])
    assert np.array_equal((2.0 * a).data, [2.0, 4.0])


def test_tape_visits_each_op_once():
    calls = []
    p = dc.Parameter(np.array([1.0]))
    with dc.Tape() as tape:
        h = dc.mul(p.node, p.node)
        out = dc.reduce_sum(h)
    original = tape._ops
    tape._ops = [(node, (lambda f: (lambda g: (calls.append(1), f(g))))(fn)) for node, fn in original]
    tape.backward(out)
    assert len(calls) == len(original)
