import numpy as np
import pytest
from helpers import away_from_zero, conv2d_reference, distinct_values, gradcheck

from robumtl import tensor as T
from robumtl.errors import DimensionError, ValidationError
from robumtl.tensor import Tape, Tensor

CASES = range(20)
TOL = 1e-5


def _rng(case):
    return np.random.default_rng(1000 + case)


# ---------------------------------------------------------------------------
# tape semantics
# ---------------------------------------------------------------------------


def test_no_recording_without_tape():
    a = Tensor(np.ones(3), requires_grad=True)
    b = a * 2.0
    assert b.requires_grad
    with Tape() as tape:
        c = a * 3.0
    assert len(tape.records) == 1 and tape.records[0][0] is c


def test_constants_are_not_recorded():
    with Tape() as tape:
        Tensor(np.ones(3)) * 2.0
    assert tape.records == []


class _LoggingTape(Tape):
    def __init__(self):
        super().__init__()
        self.visits = []

    def record(self, out, inputs, backward):
        def wrapped(g, key=id(out)):
            self.visits.append(key)
            return backward(g)

        super().record(out, inputs, wrapped)


def test_backward_visits_records_in_reverse():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with _LoggingTape() as tape:
        b = a * 2.0
        c = b + 1.0
        d = c.sum()
        tape.backward(d)
    assert tape.visits == [id(d), id(c), id(b)]
    np.testing.assert_array_equal(a.grad, [2.0, 2.0])


def test_gradients_accumulate_over_shared_inputs():
    a = Tensor(np.array([3.0]), requires_grad=True)
    with Tape() as tape:
        y = a * a + a
        tape.backward(y.sum())
    np.testing.assert_allclose(a.grad, [7.0])


def test_backward_needs_scalar_or_seed():
    a = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        y = a * 2.0
        with pytest.raises(ValidationError):
            tape.backward(y)
        tape.backward(y, np.array([1.0, 0.5]))
    np.testing.assert_allclose(a.grad, [2.0, 1.0])


def test_default_dtype_is_float32_and_float64_is_kept():
    assert Tensor([1, 2]).dtype == np.float32
    assert Tensor(np.zeros(2, dtype=np.float64)).dtype == np.float64


def test_nested_tapes_record_on_innermost():
    a = Tensor(np.ones(2), requires_grad=True)
    with Tape() as outer:
        with Tape() as inner:
            a * 2.0
        a * 3.0
    assert len(inner.records) == 1 and len(outer.records) == 1


# ---------------------------------------------------------------------------
# forward values against direct numpy
# ---------------------------------------------------------------------------


def test_broadcast_add_and_unbroadcast_grad(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4,)), requires_grad=True)
    with Tape() as tape:
        tape.backward((a + b).sum())
    np.testing.assert_allclose(b.grad, np.full(4, 3.0))


def test_matmul_batched_forward(rng):
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(2, 4, 5))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, a @ b)


def test_linear_matches_xwt_plus_b(rng):
    x, w, b = rng.normal(size=(5, 3)), rng.normal(size=(4, 3)), rng.normal(size=4)
    np.testing.assert_allclose(T.linear(Tensor(x), Tensor(w), Tensor(b)).data, x @ w.T + b)


def test_conv2d_matches_direct_loops(rng):
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    for stride, pad in [(1, 0), (1, 1), (2, 1)]:
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
        np.testing.assert_allclose(got, conv2d_reference(x, w, b, stride, pad), atol=1e-12)


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 4, 3, 3))))


def test_depthwise_equals_grouped_direct(rng):
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(3, 1, 3, 3))
    got = T.depthwise_conv2d(Tensor(x), Tensor(w), padding=1).data
    for c in range(3):
        ref = conv2d_reference(x[:, c : c + 1], w[c : c + 1], padding=1)
        np.testing.assert_allclose(got[:, c : c + 1], ref, atol=1e-12)


def test_depthwise_separable_param_count():
    c, co, k = 16, 48, 3
    dw, pw = np.zeros((c, 1, k, k)), np.zeros((co, c, 1, 1))
    assert dw.size + pw.size == c * k * k + c * co


def test_pointwise_kernel_must_be_1x1():
    with pytest.raises(DimensionError):
        T.depthwise_separable_conv(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((2, 1, 3, 3))),
                                   Tensor(np.zeros((3, 2, 3, 3))))


def test_maxpool_and_avgpool_values():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    np.testing.assert_array_equal(T.maxpool2d(Tensor(x)).data[0, 0], [[5, 7], [13, 15]])
    np.testing.assert_allclose(T.adaptive_avgpool(Tensor(x), 1).data.ravel(), [7.5])
    np.testing.assert_allclose(T.adaptive_avgpool(Tensor(x), 2).data[0, 0], [[2.5, 4.5], [10.5, 12.5]])


def test_pool_rejects_bad_windows():
    with pytest.raises(DimensionError):
        T.maxpool2d(Tensor(np.zeros((1, 1, 1, 1))), 2)
    with pytest.raises(DimensionError):
        T.adaptive_avgpool(Tensor(np.zeros((1, 1, 3, 3))), 2)


def test_softmax_shift_invariant_and_stable():
    x = np.array([[1000.0, 1001.0, 1002.0]])
    s = T.softmax(Tensor(x)).data
    np.testing.assert_allclose(s, T.softmax(Tensor(x - 1000)).data)
    assert np.isfinite(s).all() and abs(s.sum() - 1) < 1e-12
    np.testing.assert_allclose(T.log_softmax(Tensor(x)).data, np.log(s))


def test_cross_entropy_against_manual(rng):
    logits = rng.normal(size=(4, 5))
    labels = np.array([0, 4, 2, 2])
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    ref = -np.mean(np.log(p[np.arange(4), labels]))
    assert abs(T.cross_entropy(Tensor(logits), labels).item() - ref) < 1e-12


def test_cross_entropy_rejects_out_of_range_labels():
    with pytest.raises(ValidationError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_bce_matches_naive_form(rng):
    x = rng.normal(size=10)
    t = (rng.random(10) > 0.5).astype(float)
    s = 1 / (1 + np.exp(-x))
    ref = -np.mean(t * np.log(s) + (1 - t) * np.log(1 - s))
    assert abs(T.bce_with_logits(Tensor(x), t).item() - ref) < 1e-12
    big = T.bce_with_logits(Tensor(np.array([800.0, -800.0])), np.array([0.0, 1.0])).item()
    assert np.isfinite(big) and abs(big - 800.0) < 1e-9


def test_l2_mask_selects_entries():
    pred = Tensor(np.array([[[[1.0, 2.0]]]]))
    target = np.array([[[[0.0, 0.0]]]])
    mask = np.array([[[[1.0, 0.0]]]])
    assert T.l2_loss(pred, target, mask).item() == 1.0
    assert T.l2_loss(pred, target, np.zeros_like(mask)).item() == 0.0


def test_layer_norm_normalizes(rng):
    x = rng.normal(3.0, 2.0, size=(4, 8))
    y = T.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.std(-1), 1, atol=1e-5)


def test_upsample_identity_and_constant():
    x = np.arange(6.0).reshape(1, 1, 2, 3)
    np.testing.assert_allclose(T.upsample_bilinear(Tensor(x), (2, 3)).data, x)
    c = np.full((1, 2, 3, 3), 4.0)
    np.testing.assert_allclose(T.upsample_bilinear(Tensor(c), (7, 5)).data, 4.0)


def test_upsample_half_pixel_centers():
    x = np.array([[[[0.0, 1.0]]]])
    out = T.upsample_bilinear(Tensor(x), (1, 4)).data.ravel()
    np.testing.assert_allclose(out, [0.0, 0.25, 0.75, 1.0])


def test_gelu_tanh_form():
    x = np.linspace(-3, 3, 7)
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(T.gelu(Tensor(x)).data, ref, atol=1e-12)


def test_three_dim_inputs_are_accepted(rng):
    x = rng.normal(size=(2, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    assert T.conv2d(Tensor(x), Tensor(w), padding=1).shape == (3, 4, 4)
    assert T.maxpool2d(Tensor(x)).shape == (2, 2, 2)


# ---------------------------------------------------------------------------
# gradient checks, 64-bit, 20 random cases per primitive
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("case", CASES)
def test_grad_matmul(case):
    r = _rng(case)
    m, k, n = r.integers(1, 5, size=3)
    assert gradcheck(T.matmul, [r.normal(size=(m, k)), r.normal(size=(k, n))], case) < TOL


@pytest.mark.parametrize("case", CASES)
def test_grad_linear(case):
    r = _rng(case)
    assert gradcheck(T.linear, [r.normal(size=(2, 3, 4)), r.normal(size=(5, 4)), r.normal(size=5)], case) < TOL


@pytest.mark.parametrize("case", CASES)
def test_grad_conv2d(case):
    r = _rng(case)
    stride, pad = [(1, 0), (1, 1), (2, 1), (2, 0)][case % 4]
    x = r.normal(size=(2, 2, 5, 5))
    w = r.normal(size=(3, 2, 3, 3))
    b = r.normal(size=3)
    fn = lambda x, w, b: T.conv2d(x, w, b, stride=stride, padding=pad)
    assert gradcheck(fn, [x, w, b], case) < TOL


@pytest.mark.parametrize("case", CASES)
def test_grad_depthwise_separable(case):
    r = _rng(case)
    x = r.normal(size=(2, 3, 5, 5))
    dw, pw = r.normal(size=(3, 1, 3, 3)), r.normal(size=(4, 3, 1, 1))
    db, pb = r.normal(size=3), r.normal(size=4)
    assert gradcheck(T.depthwise_separable_conv, [x, dw, pw, db, pb], case) < TOL


@pytest.mark.parametrize("case", CASES)
def test_grad_maxpool(case):
    r = _rng(case)
    x = distinct_values(r, (2, 2, 4, 6))
    assert gradcheck(T.maxpool2d, [x], case, eps=1e-5) < TOL


@pytest.mark.parametrize("case", CASES)
def test_grad_adaptive_avgpool(case):
    r = _rng(case)
    size = 1 + case % 2
    assert gradcheck(lambda x: T.adaptive_avgpool(x, size), [r.normal(size=(2, 3, 4, 4))], case) < TOL


@pytest.mark.parametrize("case", CASES)
def test_grad_relu(case):
    r = _rng(case)
    assert gradcheck(T.relu, [away_from_zero(r, (3, 5))], case) < TOL


@pytest.mark.parametrize("case", CASES)
def test_grad_softmax(case):
    r = _rng(case)
    axis = [-1, 0][case % 2]
    assert gradcheck(lambda x: T.softmax(x, axis), [r.normal(size=(3, 4))], case) < TOL


@pytest.mark.parametrize("case", CASES)
def test_grad_log_softmax(case):
    r = _rng(case)
    assert gradcheck(T.log_softmax, [r.normal(size=(3, 4))], case) < TOL


@pytest.mark.parametrize("case", CASES)
def test_grad_cross_entropy(case):
    r = _rng(case)
    if case % 2:
        logits, labels = r.normal(size=(4, 5)), r.integers(0, 5, size=4)
    else:
        logits, labels = r.normal(size=(2, 3, 2, 2)), r.integers(0, 3, size=(2, 2, 2))
    assert gradcheck(lambda z: T.cross_entropy(z, labels), [logits], case) < TOL


@pytest.mark.parametrize("case", CASES)
def test_grad_bce(case):
    r = _rng(case)
    t = (r.random((3, 4)) > 0.5).astype(float)
    assert gradcheck(lambda z: T.bce_with_logits(z, t), [r.normal(size=(3, 4)) * 3], case) < TOL


@pytest.mark.parametrize("case", CASES)
def test_grad_l2(case):
    r = _rng(case)
    target = r.normal(size=(2, 2, 3, 3))
    mask = (r.random((2, 1, 3, 3)) > 0.3).astype(float)
    mask.flat[0] = 1.0
    assert gradcheck(lambda p: T.l2_loss(p, target, mask), [r.normal(size=(2, 2, 3, 3))], case) < TOL


@pytest.mark.parametrize("case", CASES)
def test_grad_layer_norm(case):
    r = _rng(case)
    assert gradcheck(T.layer_norm, [r.normal(size=(3, 6)), r.normal(size=6), r.normal(size=6)], case) < TOL


@pytest.mark.parametrize("case", CASES)
def test_grad_gelu(case):
    r = _rng(case)
    assert gradcheck(T.gelu, [r.normal(size=(4, 3)) * 2], case) < TOL


@pytest.mark.parametrize("case", CASES)
def test_grad_upsample(case):
    r = _rng(case)
    h, w = r.integers(1, 4, size=2)
    oh, ow = r.integers(2, 7, size=2)
    assert gradcheck(lambda x: T.upsample_bilinear(x, (oh, ow)), [r.normal(size=(1, 2, h, w))], case) < TOL


@pytest.mark.parametrize("case", CASES)
def test_grad_elementwise_and_shape_ops(case):
    r = _rng(case)
    a = r.normal(size=(2, 3))
    b = r.uniform(0.5, 2.0, size=(3,))

    def fn(a, b):
        y = T.div(T.mul(T.add(a, b), T.exp(T.sub(a, 1.0))), b)
        y = T.log(T.mul(y, y) + 1.0)
        y = T.transpose(T.reshape(y, (3, 2)), (1, 0))
        y = T.concat([y, y[:, 1:]], axis=1)
        return T.mean(y, axis=0) + T.tsum(y)

    assert gradcheck(fn, [a, b], case) < TOL


@pytest.mark.parametrize("case", CASES)
def test_grad_fancy_index_with_repeats(case):
    r = _rng(case)
    idx = r.integers(0, 4, size=6)
    assert gradcheck(lambda x: x[idx], [r.normal(size=(4, 2))], case) < TOL
