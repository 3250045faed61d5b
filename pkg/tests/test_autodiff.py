"""Unit tests for the reverse-mode engine: values, gradients, errors."""

import numpy as np
import pytest
import scipy.sparse

from tgnn4i import autodiff as ad


def finite_diff(fn, arrays, k, index, step=1e-5):
    """Central finite difference of fn w.r.t. arrays[k][index]."""
    plus = [a.copy() for a in arrays]
    minus = [a.copy() for a in arrays]
    plus[k][index] += step
    minus[k][index] -= step
    return (fn(plus) - fn(minus)) / (2 * step)


def check_op_gradients(build, shapes, rtol=1e-5, seed=0):
    """Compare backward() against central differences for one op.

    ``build`` maps a list of Tensors to the op output; a fixed random
    projection turns it into a scalar.
    """
    rng = np.random.default_rng(seed)
    arrays = [rng.uniform(-2.0, 2.0, s) for s in shapes]
    out_probe = build([ad.constant(a) for a in arrays])
    proj = rng.uniform(-1.0, 1.0, out_probe.values.shape)

    def scalar(arrs):
        out = build([ad.constant(a) for a in arrs])
        return float((out.values * proj).sum())

    params = [ad.parameter(a.copy()) for a in arrays]
    loss = ad.tensor_sum(ad.mul(build(params), ad.constant(proj)))
    ad.backward(loss, leaves=params)
    for k, p in enumerate(params):
        flat = p.grad.ravel()
        for flat_idx in rng.choice(flat.size, size=min(flat.size, 12), replace=False):
            index = np.unravel_index(flat_idx, p.values.shape)
            fd = finite_diff(scalar, arrays, k, index)
            assert abs(flat[flat_idx] - fd) <= rtol * max(1.0, abs(fd)), (
                f"input {k} entry {index}: analytic {flat[flat_idx]}, numeric {fd}")


# ---------------------------------------------------------------------------
# forward values


def test_matmul_identity():
    v = np.array([[2.0], [3.0]])
    out = ad.matmul(ad.constant(np.eye(2)), ad.constant(v))
    assert np.array_equal(out.values, v)


def test_softplus_at_zero():
    out = ad.softplus(ad.constant(np.zeros(3)))
    assert np.allclose(out.values, np.log(2.0), rtol=0, atol=1e-12)


def test_sigmoid_at_zero():
    out = ad.sigmoid(ad.constant(np.zeros(2)))
    assert np.allclose(out.values, 0.5, rtol=0, atol=1e-15)


def test_scatter_mean_rows_value():
    src = np.array([[2.0], [4.0]])
    out = ad.scatter_mean_rows(ad.constant(src), [1, 1], 3, [0.0, 2.0, 0.0])
    assert np.array_equal(out.values, np.array([[0.0], [3.0], [0.0]]))


def test_forward_determinism():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))

    def run():
        return ad.tanh(ad.matmul(ad.constant(a), ad.constant(b))).values

    assert np.array_equal(run(), run())


# ---------------------------------------------------------------------------
# backward values


def test_sum_gradient_is_ones():
    x = ad.parameter(np.random.default_rng(0).normal(size=(3, 4)))
    ad.backward(ad.tensor_sum(x))
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_square_gradient():
    x = ad.parameter(np.array(3.0))
    ad.backward(ad.square(x))
    assert np.allclose(x.grad, 6.0, rtol=0, atol=1e-12)


def test_unreachable_leaf_gets_zero_grad():
    x = ad.parameter(np.ones(2))
    unused = ad.parameter(np.ones(3))
    ad.backward(ad.tensor_sum(x), leaves=[x, unused])
    assert np.array_equal(unused.grad, np.zeros(3))


def test_backward_requires_scalar():
    x = ad.parameter(np.ones(3))
    with pytest.raises(ad.ShapeError, match="scalar"):
        ad.backward(ad.exp(x))


def test_backward_is_linear():
    rng = np.random.default_rng(1)
    xv = rng.normal(size=(4,))

    def grad_of(a, b):
        x = ad.parameter(xv.copy())
        f = ad.tensor_sum(ad.sin(x))
        g = ad.tensor_sum(ad.square(x))
        ad.backward(ad.add(ad.scale(f, a), ad.scale(g, b)))
        return x.grad

    combined = grad_of(2.0, -3.0)
    expected = 2.0 * grad_of(1.0, 0.0) - 3.0 * grad_of(0.0, 1.0)
    assert np.allclose(combined, expected, rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------------------
# per-op finite-difference checks (inputs in [-2, 2], rel err < 1e-5)


@pytest.mark.parametrize("name,build,shapes", [
    ("matmul", lambda ts: ad.matmul(ts[0], ts[1]), [(3, 4), (4, 2)]),
    ("matvec", lambda ts: ad.matmul(ts[0], ts[1]), [(3, 4), (4,)]),
    ("add", lambda ts: ad.add(ts[0], ts[1]), [(3, 2), (3, 2)]),
    ("add-scalar", lambda ts: ad.add(ts[0], ts[1]), [(3, 2), ()]),
    ("sub", lambda ts: ad.sub(ts[0], ts[1]), [(4,), (4,)]),
    ("mul", lambda ts: ad.mul(ts[0], ts[1]), [(2, 3), (2, 3)]),
    ("mul-scalar", lambda ts: ad.mul(ts[0], ts[1]), [(), (2, 3)]),
    ("add_bias", lambda ts: ad.add_bias(ts[0], ts[1]), [(3, 4), (4,)]),
    ("concat", lambda ts: ad.concat(ts, axis=1), [(2, 3), (2, 2)]),
    ("split", lambda ts: ad.split(ts[0], 3, axis=1)[1], [(2, 6)]),
    ("reshape", lambda ts: ad.reshape(ts[0], (6,)), [(2, 3)]),
    ("gather", lambda ts: ad.gather_rows(ts[0], [2, 0, 2]), [(4, 3)]),
    ("gather-unique", lambda ts: ad.gather_rows(ts[0], [2, 0], unique=True), [(4, 3)]),
    ("gather-blocks", lambda ts: ad.gather_blocks(ts[0], [1, 0, 1], 2), [(4, 3)]),
    ("set-rows", lambda ts: ad.set_rows(ts[0], [0, 2], ts[1]), [(4, 3), (2, 3)]),
    ("scatter-mean", lambda ts: ad.scatter_mean_rows(ts[0], [0, 2, 2], 3, [1.0, 0.0, 2.0]),
     [(3, 2)]),
    ("sigmoid", lambda ts: ad.sigmoid(ts[0]), [(3, 3)]),
    ("tanh", lambda ts: ad.tanh(ts[0]), [(5,)]),
    ("softplus", lambda ts: ad.softplus(ts[0]), [(4,)]),
    ("exp", lambda ts: ad.exp(ts[0]), [(3, 2)]),
    ("sin", lambda ts: ad.sin(ts[0]), [(4,)]),
    ("cos", lambda ts: ad.cos(ts[0]), [(4,)]),
    ("negate", lambda ts: ad.negate(ts[0]), [(2, 2)]),
    ("square", lambda ts: ad.square(ts[0]), [(3,)]),
    ("scale", lambda ts: ad.scale(ts[0], -1.7), [(3, 2)]),
    ("sum", lambda ts: ad.tensor_sum(ts[0]), [(3, 4)]),
    ("sum-axis", lambda ts: ad.tensor_sum(ts[0], axis=1), [(3, 4)]),
    ("mean", lambda ts: ad.tensor_mean(ts[0]), [(3, 4)]),
    ("mean-axis", lambda ts: ad.tensor_mean(ts[0], axis=0), [(3, 4)]),
])
def test_op_gradients(name, build, shapes):
    check_op_gradients(build, shapes)


def test_relu_gradient_away_from_kink():
    # shift inputs away from 0 where the derivative is undefined
    def build(ts):
        return ad.relu(ad.add(ts[0], ad.constant(np.array(0.31))))

    check_op_gradients(build, [(4, 3)])


def test_spmm_gradient():
    mat = scipy.sparse.csr_matrix(np.array([[0.0, 1.5], [0.5, 0.0], [1.0, 1.0]]))
    op = ad.SparseOperand(mat)
    check_op_gradients(lambda ts: ad.spmm(op, ts[0]), [(2, 3)])


def test_composite_of_many_ops_gradient():
    def build(ts):
        a = ad.sigmoid(ad.matmul(ts[0], ts[1]))
        b = ad.tanh(ad.add(a, ts[2]))
        c = ad.concat([b, ad.exp(ad.scale(ts[2], 0.3))], axis=1)
        d = ad.mul(ad.sin(c), ad.cos(c))
        e = ad.softplus(ad.sub(d, ad.square(ts[3])))
        return ad.tensor_sum(e, axis=0)

    check_op_gradients(build, [(3, 2), (2, 4), (3, 4), (3, 8)])


def test_reused_tensor_accumulates():
    x = ad.parameter(np.array([1.5, -0.5]))
    y = ad.mul(x, x)
    ad.backward(ad.tensor_sum(y))
    assert np.allclose(x.grad, 2 * x.values, rtol=1e-14)


# ---------------------------------------------------------------------------
# shape and finiteness errors


@pytest.mark.parametrize("fn,args,fragment", [
    (ad.matmul, (np.ones((2, 3)), np.ones((2, 3))), "matmul"),
    (ad.add, (np.ones((2, 3)), np.ones((3, 2))), "add"),
    (ad.mul, (np.ones(2), np.ones(3)), "elementwise-mul"),
    (ad.add_bias, (np.ones((2, 3)), np.ones(2)), "add-bias"),
])
def test_shape_errors_name_the_op(fn, args, fragment):
    with pytest.raises(ad.ShapeError, match=fragment):
        fn(*[ad.constant(a) for a in args])


def test_concat_shape_error():
    with pytest.raises(ad.ShapeError, match="concat"):
        ad.concat([ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 2)))], axis=0)


def test_set_rows_rejects_duplicates():
    with pytest.raises(ad.ShapeError, match="duplicate"):
        ad.set_rows(ad.constant(np.ones((3, 2))), [1, 1], ad.constant(np.zeros((2, 2))))


def test_non_finite_loss_raises():
    x = ad.parameter(np.array(1e308))
    with pytest.raises(ad.NonFiniteError):
        ad.backward(ad.mul(ad.exp(x), ad.constant(np.array(0.0))))


# ---------------------------------------------------------------------------
# tape structure


def test_tape_is_topologically_ordered():
    rng = np.random.default_rng(2)
    x = ad.parameter(rng.normal(size=(3, 3)))
    y = ad.sigmoid(ad.matmul(x, ad.constant(rng.normal(size=(3, 2)))))
    z = ad.tensor_sum(ad.mul(y, y))
    tape = ad.record_tape(z)
    assert len(tape) > 0
    assert tape.check_topological()


def test_no_grad_suppresses_recording():
    x = ad.parameter(np.ones(3))
    with ad.no_grad():
        y = ad.exp(x)
    assert not y.requires_grad
    tape = ad.record_tape(y)
    assert len(tape) == 0


# ---------------------------------------------------------------------------
# parameter serialization


def test_params_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(9)
    params = {
        "w": ad.parameter(rng.normal(size=(7, 3)) * np.pi),
        "b": ad.parameter(np.array([1e-300, -1.5, 0.1 + 0.2])),
    }
    path = tmp_path / "params.json"
    ad.save_params(params, path)
    loaded = ad.load_params(path)
    for name, tensor in params.items():
        assert loaded[name].shape == tensor.values.shape
        assert np.array_equal(loaded[name], tensor.values), name


def test_load_rejects_non_finite(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"w": {"shape": [1], "values": [NaN]}}')
    with pytest.raises(ad.NonFiniteError):
        ad.load_params(path)
