import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from shrinknet import ops
from shrinknet.gradcheck import check_gradients
from shrinknet.optim import OptimizerState, optimizer_step
from shrinknet.tensor import GraphError, Tape, Tensor, backward, no_grad


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# --- forward examples ---------------------------------------------------------


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = ops.forward_op("matmul", [t64(a), t64(np.eye(2))])
    np.testing.assert_array_equal(out.data, a)


def test_relu_clamps():
    np.testing.assert_array_equal(ops.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])


def test_cross_entropy_uniform_logits_is_log_classes():
    loss = ops.cross_entropy_with_softmax(Tensor(np.zeros((3, 4))), [0, 1, 3])
    assert loss.item() == pytest.approx(math.log(4), abs=1e-6)
    assert loss.item() == pytest.approx(1.3863, abs=1e-4)


def test_default_dtype_is_float32_and_float64_is_kept():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    assert Tensor(np.zeros(2)).dtype == np.float64


def test_shape_mismatch_names_op_and_dims():
    with pytest.raises(ops.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ops.ShapeError, match="groups=3"):
        ops.conv2d(Tensor(np.ones((1, 4, 4, 4))), Tensor(np.ones((6, 1, 3, 3))), groups=3)


def test_non_finite_input_rejected():
    with pytest.raises(ops.NonFiniteError):
        ops.relu(Tensor([1.0, np.nan]))
    with pytest.raises(ops.NonFiniteError):
        ops.dense(Tensor(np.ones((1, 2))), Tensor(np.array([[np.inf, 0.0]])))


def test_forward_op_unknown_kind():
    with pytest.raises(ValueError, match="unknown op"):
        ops.forward_op("maxpool", [])


def test_conv2d_matches_naive_loop():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 5, 6, 4))
    w = rng.standard_normal((6, 2, 3, 3))
    b = rng.standard_normal(6)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=1, groups=2).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ho, wo = (5 + 2 - 3) // 2 + 1, (6 + 2 - 3) // 2 + 1
    ref = np.zeros((2, ho, wo, 6))
    for n in range(2):
        for i in range(ho):
            for j in range(wo):
                for o in range(6):
                    g = o // 3
                    patch = xp[n, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3, 2 * g : 2 * g + 2]
                    ref[n, i, j, o] = np.sum(patch.transpose(2, 0, 1) * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


# --- backward ------------------------------------------------------------------


def test_square_gradient_matches_finite_difference():
    w = t64([3.0])
    backward(ops.sum_all(ops.mul(w, w)))
    h = 1e-5
    fd = ((3 + h) ** 2 - (3 - h) ** 2) / (2 * h)
    assert w.grad[0] == pytest.approx(fd, rel=1e-8)
    assert w.grad[0] == pytest.approx(6.0)


def test_relu_flat_region_has_zero_grad():
    x = t64([-1.0])
    backward(ops.sum_all(ops.relu(x)))
    assert x.grad[0] == 0.0


def test_dropout_eval_passes_gradient_through():
    x = t64([1.0, -2.0, 3.0])
    y = ops.dropout(x, 0.5, training=False)
    backward(ops.sum_all(ops.mul(y, t64([2.0, 3.0, 4.0], grad=False))))
    np.testing.assert_array_equal(x.grad, [2.0, 3.0, 4.0])


def test_backward_rejects_non_scalar_and_detached():
    with pytest.raises(GraphError, match="scalar"):
        backward(ops.relu(t64([1.0, 2.0])))
    with pytest.raises(GraphError, match="detached"):
        backward(ops.sum_all(Tensor(np.ones(3))))


def test_tape_visits_in_reverse_execution_order_and_clears():
    x = t64([1.0, 2.0])
    a = ops.relu(x)
    b = ops.mul(a, a)
    c = ops.sum_all(ops.add(b, a))
    tape = Tape.from_loss(c)
    seqs = [n._seq for n in tape.nodes]
    assert seqs == sorted(seqs, reverse=True)
    assert len(tape.nodes) == len({id(n) for n in tape.nodes}) == 4
    backward(c)
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)
    assert c._backward is None and a._parents == ()


def test_no_grad_does_not_record():
    x = t64([1.0])
    with no_grad():
        y = ops.relu(x)
    assert not y.requires_grad and y.is_leaf


def test_shared_subexpression_accumulates():
    x = t64([2.0])
    y = ops.mul(x, x)
    z = ops.sum_all(ops.add(y, y))
    backward(z)
    assert x.grad[0] == pytest.approx(8.0)


@pytest.mark.parametrize(
    "name,make",
    [
        ("dense", lambda r: ([t64(r.standard_normal((3, 4))), t64(r.standard_normal((2, 4))), t64(r.standard_normal(2))], lambda a: ops.dense(*a))),
        ("conv2d", lambda r: ([t64(r.standard_normal((2, 5, 5, 2))), t64(r.standard_normal((4, 2, 3, 3))), t64(r.standard_normal(4))], lambda a: ops.conv2d(*a, stride=2, pad=1))),
        ("depthwise", lambda r: ([t64(r.standard_normal((2, 4, 4, 3))), t64(r.standard_normal((3, 1, 3, 3)))], lambda a: ops.conv2d(*a, pad=1, groups=3))),
        ("bn_train", lambda r: ([t64(r.standard_normal((4, 3))), t64(r.standard_normal(3)), t64(r.standard_normal(3))], lambda a: ops.batchnorm(*a, np.zeros(3), np.ones(3), training=True))),
        ("softmax", lambda r: ([t64(r.standard_normal((2, 5)))], lambda a: ops.softmax(a[0]))),
        ("gap", lambda r: ([t64(r.standard_normal((2, 3, 3, 2)))], lambda a: ops.global_avg_pool(a[0]))),
    ],
)
def test_gradcheck_smoke(name, make):
    rng = np.random.default_rng(1)
    inputs, fn = make(rng)
    assert check_gradients(fn, inputs, rng) < 1e-6


# --- invariants ----------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(z):
    s = ops.softmax(Tensor(z)).data
    assert (s >= 0).all()
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, st.just((3, 4)), elements=st.floats(-5, 5)),
    arrays(np.float64, st.just((3, 4)), elements=st.floats(-5, 5)),
)
def test_kl_nonnegative_and_zero_on_equal(a, b):
    p = ops.softmax(Tensor(a)).data
    q = ops.softmax(Tensor(b)).data
    assert ops.kl_divergence(Tensor(p), Tensor(q)).item() >= -1e-12
    assert abs(ops.kl_divergence(Tensor(p), Tensor(p)).item()) <= 1e-9


def test_kl_positive_when_distributions_differ():
    assert ops.kl_divergence(Tensor(np.array([[0.9, 0.1]])), Tensor(np.array([[0.5, 0.5]]))).item() > 1e-3


def test_eval_modes_are_deterministic():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((4, 3)))
    g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
    rm, rv = rng.standard_normal(3), rng.random(3) + 0.5
    out1 = ops.batchnorm(x, g, b, rm, rv, training=False).data
    out2 = ops.batchnorm(x, g, b, rm, rv, training=False).data
    np.testing.assert_array_equal(out1, out2)
    assert ops.dropout(x, 0.7, training=False) is x


def test_dropout_train_inverted_scaling():
    x = Tensor(np.ones(1000, dtype=np.float32))
    y = ops.dropout(x, 0.25, training=True, rng=np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, np.float32(1 / 0.75)}


def test_batchnorm_running_stats_momentum():
    x = Tensor(np.array([[1.0], [3.0]]))
    rm, rv = np.zeros(1), np.ones(1)
    ops.batchnorm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv, training=True)
    assert rm[0] == pytest.approx(0.1 * 2.0)
    assert rv[0] == pytest.approx(0.9 + 0.1 * 2.0)  # unbiased var of {1, 3} is 2


# --- optimizers -------------------------------------------------------------------


def _param(value, grad):
    p = Tensor(np.array([value], dtype=np.float64), requires_grad=True)
    p.grad = np.array([grad], dtype=np.float64)
    return p


def test_sgd_without_momentum():
    p = _param(1.0, 1.0)
    optimizer_step(OptimizerState("sgd_momentum", lr=0.1, momentum=0.0), {"w": p})
    assert p.data[0] == pytest.approx(0.9)


def test_adam_first_step():
    p = _param(1.0, 1.0)
    optimizer_step(OptimizerState("adam", lr=0.001), {"w": p})
    assert p.data[0] == pytest.approx(0.999, abs=1e-9)


@pytest.mark.parametrize("kind", ["sgd_momentum", "adam"])
def test_zero_mask_annihilates(kind):
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    p.grad = np.array([0.5, 0.5, -0.5])
    optimizer_step(OptimizerState(kind, lr=0.1), {"w": p}, {"w": np.zeros(3, dtype=bool)})
    assert (p.data == 0).all() and not np.signbit(p.data).any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["sgd_momentum", "adam"]))
def test_masked_step_preserves_zeros(seed, kind):
    rng = np.random.default_rng(seed)
    p = Tensor(rng.standard_normal(20), requires_grad=True)
    mask = rng.random(20) > 0.5
    state = OptimizerState(kind, lr=0.05)
    for _ in range(3):
        p.grad = rng.standard_normal(20)
        optimizer_step(state, {"w": p}, {"w": mask})
        assert (p.data[~mask] == 0).all() and not np.signbit(p.data[~mask]).any()
    assert state.step_count == 3
    assert all(b.shape == p.shape for b in state.buffers["w"].values())


def test_missing_grad_names_parameter():
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError, match="'layer.weight'"):
        optimizer_step(OptimizerState(), {"layer.weight": p})


def test_unknown_optimizer_kind():
    with pytest.raises(ValueError):
        OptimizerState("rmsprop")


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_masked_zeroes_any_value_behind_the_mask(dtype):
    w = Tensor(np.array([[1.5, -2.0, np.inf], [-np.inf, np.nan, -0.25]], dtype=dtype), requires_grad=True)
    keep = np.array([[True, False, False], [False, False, True]])
    out = ops.masked(w, keep)
    assert out.dtype == dtype
    np.testing.assert_array_equal(out.data, np.array([[1.5, 0, 0], [0, 0, -0.25]], dtype=dtype))
    assert not np.signbit(out.data[~keep]).any()
    backward(ops.sum_all(ops.mul(out, Tensor(np.full((2, 3), -3.0, dtype=dtype)))))
    np.testing.assert_array_equal(w.grad, np.where(keep, -3.0, 0.0).astype(dtype))
    assert not np.signbit(w.grad[~keep]).any()
