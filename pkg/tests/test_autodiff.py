import numpy as np
import pytest

from segfuse import autodiff as ad
from segfuse.autodiff import (
    GradientTape,
    Tensor,
    finite_diff_check,
    gradients_of,
)


def test_row_softmax_symmetry():
    out = ad.row_softmax(Tensor([[0.0, 0.0]]))
    np.testing.assert_allclose(out.data, [[0.5, 0.5]])


def test_row_softmax_large_logits_no_overflow():
    with np.errstate(over="raise"):
        out = ad.row_softmax(Tensor([[1000.0, 0.0]]))
    assert out.data[0, 0] == pytest.approx(1.0)
    assert out.data[0, 1] == pytest.approx(0.0, abs=1e-300)


def test_row_softmax_hand_computed():
    # exp([ln1, ln2, ln3]) = [1, 2, 3], normalizes to sixths
    row = np.log(np.array([[1.0, 2.0, 3.0]]))
    out = ad.row_softmax(Tensor(row))
    np.testing.assert_allclose(out.data, [[1 / 6, 2 / 6, 3 / 6]], atol=1e-12)


def test_row_softmax_rows_sum_to_one_and_shift_invariant():
    rng = np.random.default_rng(0)
    m = rng.normal(size=(20, 7))
    out = ad.row_softmax(Tensor(m)).data
    np.testing.assert_allclose(out.sum(axis=1), np.ones(20), atol=1e-9)
    shifted = ad.row_softmax(Tensor(m + 3.7)).data
    np.testing.assert_allclose(out, shifted, atol=1e-9)


def test_row_softmax_rejects_rank3():
    with pytest.raises(ValueError):
        ad.row_softmax(Tensor(np.zeros((2, 2, 2))))


def _layer_norm_oracle(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


@pytest.mark.parametrize(
    "row,gain,bias",
    [
        ([1.0, 1.0, 1.0], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0]),
        ([0.0, 2.0], [1.0, 1.0], [0.0, 0.0]),
        ([0.0, 2.0], [3.0, 3.0], [1.0, 1.0]),
    ],
)
def test_layer_norm_matches_direct_formula(row, gain, bias):
    x = np.array([row])
    out = ad.layer_norm(Tensor(x), Tensor(gain), Tensor(bias))
    np.testing.assert_allclose(out.data, _layer_norm_oracle(x, np.array(gain), np.array(bias)), atol=1e-12)


def test_layer_norm_constant_row_is_zero():
    out = ad.layer_norm(Tensor([[1.0, 1.0, 1.0]]), Tensor([1.0, 1.0, 1.0]), Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [[0.0, 0.0, 0.0]])


def test_layer_norm_spec_values():
    out = ad.layer_norm(Tensor([[0.0, 2.0]]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]))
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-5)
    out = ad.layer_norm(Tensor([[0.0, 2.0]]), Tensor([3.0, 3.0]), Tensor([1.0, 1.0]))
    np.testing.assert_allclose(out.data, [[-2.0, 4.0]], atol=1e-4)


def test_layer_norm_empty_axis_rejected():
    with pytest.raises(ValueError):
        ad.layer_norm(Tensor(np.zeros((3, 0))), Tensor(np.zeros(0)), Tensor(np.zeros(0)))


def test_set_max_pool_examples():
    np.testing.assert_array_equal(ad.set_max_pool(Tensor([[1.0, 5.0], [3.0, 2.0]])).data, [3.0, 5.0])
    np.testing.assert_array_equal(ad.set_max_pool(Tensor([[7.0, 7.0]])).data, [7.0, 7.0])


def test_set_max_pool_permutation_invariant_bitwise():
    rng = np.random.default_rng(1)
    rows = rng.normal(size=(100, 6))
    base = ad.set_max_pool(Tensor(rows)).data
    for seed in range(20):
        perm = np.random.default_rng(seed).permutation(100)
        out = ad.set_max_pool(Tensor(rows[perm])).data
        assert np.array_equal(base, out)


def test_set_max_pool_empty_rejected():
    with pytest.raises(ValueError):
        ad.set_max_pool(Tensor(np.zeros((0, 3))))


def test_matmul_associativity():
    rng = np.random.default_rng(2)
    for _ in range(10):
        a, b, c = (Tensor(rng.normal(size=(8, 8))) for _ in range(3))
        left = ad.matmul(ad.matmul(a, b), c).data
        right = ad.matmul(a, ad.matmul(b, c)).data
        np.testing.assert_allclose(left, right, atol=1e-9)


def test_gradient_of_square():
    x = Tensor(np.array(3.0), trainable=True)
    tape = GradientTape()
    with tape:
        loss = ad.mul(x, x)
    grads = gradients_of(loss, tape, [x])
    assert grads[x] == pytest.approx(6.0)


def test_gradient_through_softmax_sum_is_zero():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(4, 5)), trainable=True)
    tape = GradientTape()
    with tape:
        loss = ad.sum_all(ad.row_softmax(x))
    grads = gradients_of(loss, tape, [x])
    np.testing.assert_allclose(grads[x], np.zeros((4, 5)), atol=1e-12)


def test_unused_parameter_gets_zero_gradient():
    x = Tensor(np.array(2.0), trainable=True)
    unused = Tensor(np.ones((3, 3)), trainable=True)
    tape = GradientTape()
    with tape:
        loss = ad.mul(x, x)
    grads = gradients_of(loss, tape, [x, unused])
    np.testing.assert_array_equal(grads[unused], np.zeros((3, 3)))


def test_gradients_require_scalar_loss():
    x = Tensor(np.ones(3), trainable=True)
    tape = GradientTape()
    with tape:
        y = ad.mul(x, x)
    with pytest.raises(ValueError):
        gradients_of(y, tape, [x])


def test_finite_diff_square_tight():
    err = finite_diff_check(lambda x: ad.mul(x, x), Tensor(np.array(1.0)))
    assert err < 1e-8


def test_finite_diff_layer_norm():
    rng = np.random.default_rng(4)
    gain = Tensor(rng.normal(size=6))
    bias = Tensor(rng.normal(size=6))

    def f(x):
        return ad.sum_all(ad.mul(ad.layer_norm(x, gain, bias), Tensor(rng2)))

    rng2 = np.random.default_rng(5).normal(size=(3, 6))
    err = finite_diff_check(f, Tensor(rng.normal(size=(3, 6))))
    assert err < 1e-4


def _probe_case(op, in_shape, probe_shape=None, **kwargs):
    """Build (f, at): f contracts op(x) against a fixed random probe."""
    rng = np.random.default_rng(7)
    at = rng.normal(size=in_shape)
    probe = Tensor(rng.normal(size=probe_shape)) if probe_shape else None

    def f(x):
        y = op(x, **kwargs)
        return ad.sum_all(ad.mul(y, probe)) if probe is not None else ad.sum_all(y)

    return f, at


@pytest.mark.parametrize(
    "case",
    [
        lambda: _probe_case(ad.relu, (4, 3)),
        lambda: _probe_case(ad.softmax_last, (2, 3, 4), (2, 3, 4)),
        lambda: _probe_case(ad.set_max_pool, (6, 4)),
        lambda: _probe_case(ad.segment_max_pool, (9, 5), starts=np.array([0, 2, 6, 9])),
        lambda: _probe_case(lambda x: ad.bmatmul(x, _B34), (3, 5, 4)),
        lambda: _probe_case(lambda x: ad.concat([x, ad.mul(x, x)], axis=1), (3, 4), (3, 8)),
        lambda: _probe_case(lambda x: ad.slice_axis(x, 1, 1, 3), (2, 5), (2, 2)),
        lambda: _probe_case(lambda x: ad.transpose(x, (1, 0, 2)), (2, 3, 4), (3, 2, 4)),
        lambda: _probe_case(lambda x: ad.scatter_rows(x, np.array([4, 1, 6]), 8), (3, 3), (8, 3)),
        lambda: _probe_case(lambda x: ad.gather_rows(x, np.array([0, 2, 2, 1])), (3, 3), (4, 3)),
        lambda: _probe_case(ad.upsample2, (2, 3, 4), (2, 3, 8)),
        lambda: _probe_case(lambda x: ad.mean_all(ad.mul(x, x)), (5, 2)),
        lambda: _probe_case(lambda x: ad.sum_axis(x, 1), (3, 5, 4), (3, 4)),
    ],
)
def test_op_gradients_match_finite_differences(case):
    f, at = case()
    assert finite_diff_check(f, Tensor(at)) < 1e-4


_B34 = Tensor(np.random.default_rng(11).normal(size=(3, 4, 2)))


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
def test_conv1d_gradients(stride, pad):
    rng = np.random.default_rng(8)
    w = Tensor(rng.normal(size=(4, 3, 3)) * 0.3)
    b = Tensor(rng.normal(size=4) * 0.1)
    lout = (6 + 2 * pad - 3) // stride + 1
    probe = Tensor(rng.normal(size=(2, 4, lout)))

    def wrt_x(x):
        return ad.sum_all(ad.mul(ad.conv1d(x, w, b, stride=stride, pad=pad), probe))

    assert finite_diff_check(wrt_x, Tensor(rng.normal(size=(2, 3, 6)))) < 1e-4

    x = Tensor(rng.normal(size=(2, 3, 6)))

    def wrt_w(wflat):
        wk = ad.reshape(wflat, (4, 3, 3))
        return ad.sum_all(ad.mul(ad.conv1d(x, wk, b, stride=stride, pad=pad), probe))

    assert finite_diff_check(wrt_w, Tensor(w.data.reshape(-1))) < 1e-4


def test_conv1d_matches_direct_computation():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(1, 2, 5))
    w = rng.normal(size=(3, 2, 3))
    b = rng.normal(size=3)
    out = ad.conv1d(Tensor(x), Tensor(w), Tensor(b), stride=1, pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1)))
    expect = np.zeros((1, 3, 5))
    for o in range(3):
        for t in range(5):
            expect[0, o, t] = (xp[0, :, t : t + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_three_layer_mlp_gradcheck():
    rng = np.random.default_rng(10)
    sizes = [(4, 8), (8, 8), (8, 1)]
    n_w = sum(a * b for a, b in sizes)

    def f(flat):
        h = Tensor(rng_x)
        off = 0
        for i, (a, b) in enumerate(sizes):
            w = ad.reshape(ad.slice_axis(flat, 0, off, off + a * b), (a, b))
            off += a * b
            h = ad.matmul(h, w)
            if i < len(sizes) - 1:
                h = ad.relu(h)
        return ad.sum_all(h)

    rng_x = rng.normal(size=(3, 4))
    flat0 = rng.normal(size=n_w) * 0.5
    assert finite_diff_check(f, Tensor(flat0)) < 1e-4


def test_forward_runs_without_tape():
    # evaluation path: no active tape, plain numpy forward
    out = ad.matmul(Tensor(np.eye(2)), Tensor([[1.0], [2.0]]))
    np.testing.assert_array_equal(out.data, [[1.0], [2.0]])


def test_nested_tape_rejected():
    t1 = GradientTape()
    with t1:
        with pytest.raises(ad.TapeError):
            with GradientTape():
                pass


def test_tape_records_in_topological_order():
    x = Tensor(np.array(2.0), trainable=True)
    tape = GradientTape()
    with tape:
        y = ad.mul(x, x)
        z = ad.add(y, x)
    for rec in tape._records:
        assert all(rec.out_id > i for i in rec.in_ids)
    grads = gradients_of(z, tape, [x])
    assert grads[x] == pytest.approx(5.0)
