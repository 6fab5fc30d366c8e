import numpy as np
import pytest

from uchfr import autograd as ag
from uchfr.autograd import Tensor


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = ag.matmul(a, b)
    assert np.array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])


def test_matmul_orthogonal_pick():
    out = ag.matmul(Tensor([[1.0, 0.0]]), Tensor([[0.0], [5.0]]))
    assert np.array_equal(out.data, [[0.0]])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        ag.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    b = rng.standard_normal((3, 3))
    res = ag.gradcheck(lambda a: ag.sum_all(ag.matmul(a, Tensor(b))), rng.standard_normal((3, 3)), tol=1e-6)
    assert res.passed, res
    a_fix = Tensor(rng.standard_normal((3, 3)))
    res = ag.gradcheck(lambda bb: ag.sum_all(ag.matmul(a_fix, bb)), rng.standard_normal((3, 3)), tol=1e-6)
    assert res.passed, res


def test_matmul_fixed_order_row_independent():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((64, 16))
    w = rng.standard_normal((16, 8))
    full = ag.matmul(Tensor(x), Tensor(w), fixed_order=True).data
    for i in (0, 17, 63):
        row = ag.matmul(Tensor(x[i:i + 1]), Tensor(w), fixed_order=True).data
        assert np.array_equal(row[0], full[i])


def test_sigmoid_symmetry_point():
    assert ag.sigmoid(Tensor([0.0])).data[0] == 0.5


def test_relu_definition():
    out = ag.relu(Tensor([-3.0, 3.0]))
    assert np.array_equal(out.data, [0.0, 3.0])


def test_sigmoid_gradient_at_zero():
    x = Tensor(np.array([0.0]), requires_grad=True)
    ag.sum_all(ag.sigmoid(x)).backward()
    assert abs(x.grad[0] - 0.25) < 1e-12
    res = ag.gradcheck(lambda t: ag.sum_all(ag.sigmoid(t)), np.array([0.0]), tol=1e-6)
    assert res.passed, res


def test_elementwise_incompatible_shapes_rejected():
    with pytest.raises(ValueError, match="incompatible shapes"):
        ag.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
    with pytest.raises(ValueError, match="incompatible shapes"):
        ag.mul(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))


def test_scalar_broadcasting():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    out = ag.sum_all(ag.add(ag.mul(x, 2.0), 1.0))
    assert out.item() == 15.0
    out.backward()
    assert np.array_equal(x.grad, [2.0, 2.0, 2.0])


def test_l2_normalize_345_triangle():
    out = ag.l2_normalize(Tensor([3.0, 4.0]))
    assert np.allclose(out.data, [0.6, 0.8], atol=1e-15)


def test_l2_normalize_unit_vector_fixed_point():
    v = np.array([1.0, 0.0, 0.0])
    assert np.allclose(ag.l2_normalize(Tensor(v)).data, v, atol=1e-15)


def test_l2_normalize_rows_and_gradient():
    rng = np.random.default_rng(2)
    w_fix = Tensor(rng.standard_normal(8))
    res = ag.gradcheck(lambda t: ag.sum_all(ag.mul(ag.l2_normalize(t), w_fix)),
                       rng.standard_normal(8), tol=1e-6)
    assert res.passed, res
    m = rng.standard_normal((4, 5))
    out = ag.l2_normalize(Tensor(m))
    assert np.allclose(np.linalg.norm(out.data, axis=1), 1.0, atol=1e-12)


def test_l2_normalize_rejects_degenerate():
    with pytest.raises(ValueError, match="degenerate"):
        ag.l2_normalize(Tensor([1e-9, 0.0]))


def test_softmax_cross_entropy_uniform():
    logits = Tensor(np.zeros((2, 4)))
    loss = ag.softmax_cross_entropy(logits, [0, 3])
    assert abs(loss.item() - np.log(4.0)) < 1e-12


def test_softmax_cross_entropy_saturated():
    logits = np.full((1, 3), -50.0)
    logits[0, 1] = 50.0
    loss = ag.softmax_cross_entropy(Tensor(logits), [1])
    assert loss.item() < 1e-12


def test_softmax_cross_entropy_label_range():
    with pytest.raises(ValueError, match="out of range"):
        ag.softmax_cross_entropy(Tensor(np.zeros((1, 3))), [3])


def test_softmax_cross_entropy_gradient():
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 5, size=6)
    res = ag.gradcheck(lambda t: ag.softmax_cross_entropy(t, labels), rng.standard_normal((6, 5)), tol=1e-6)
    assert res.passed, res


def test_bce_maximal_uncertainty():
    p = Tensor(np.full(4, 0.5))
    y = np.array([0.0, 1.0, 0.0, 1.0])
    assert abs(ag.binary_cross_entropy(p, y).item() - np.log(2.0)) < 1e-12


def test_bce_perfect_prediction():
    y = np.array([0.0, 1.0])
    loss = ag.binary_cross_entropy(Tensor(y.copy()), y)
    assert loss.item() < 1e-6


def test_bce_rejects_non_binary_targets():
    with pytest.raises(ValueError, match="0 or 1"):
        ag.binary_cross_entropy(Tensor([0.5]), np.array([0.3]))


def test_bce_gradient():
    rng = np.random.default_rng(4)
    p = rng.uniform(0.05, 0.95, size=10)
    y = rng.integers(0, 2, size=10).astype(float)
    res = ag.gradcheck(lambda t: ag.binary_cross_entropy(t, y), p, tol=1e-6)
    assert res.passed, res


def test_bce_masked_mean():
    p = Tensor(np.array([[0.5, 0.9], [0.1, 0.5]]))
    y = np.array([[1.0, 1.0], [0.0, 0.0]])
    mask = np.array([[True, False], [False, True]])
    loss = ag.binary_cross_entropy(p, y, mask=mask)
    assert abs(loss.item() - np.log(2.0)) < 1e-12
    with pytest.raises(ValueError, match="empty mask"):
        ag.binary_cross_entropy(p, y, mask=np.zeros((2, 2), dtype=bool))


def test_gradcheck_quadratic_exact():
    rng = np.random.default_rng(5)
    res = ag.gradcheck(lambda t: ag.sum_all(ag.mul(t, t)), rng.standard_normal(7), tol=1e-6)
    assert res.passed, res


def test_gradcheck_rejects_non_scalar():
    with pytest.raises(ValueError, match="scalar"):
        ag.gradcheck(lambda t: ag.mul(t, t), np.ones(3))


def test_gradcheck_rejects_float32():
    with pytest.raises(ValueError, match="float64"):
        ag.gradcheck(lambda t: ag.sum_all(t), np.ones(3, dtype=np.float32))


def test_gradcheck_detects_corrupted_adjoint():
    def bad_square(t):
        out = ag.make_op(t.data * t.data, (t,), lambda g: ag.accumulate(t, g * 3.0 * t.data))
        return ag.sum_all(out)

    res = ag.gradcheck(bad_square, np.random.default_rng(6).standard_normal(5) + 2.0, tol=1e-4)
    assert not res.passed


def test_gradient_accumulation_matches_algebraic_rewrite():
    # x used twice: f = sum(x*x) + sum(2*x) should give 2x + 2,
    # same as the single-use rewrite g = sum(x*x + 2*x).
    rng = np.random.default_rng(7)
    xv = rng.standard_normal(6)
    x = Tensor(xv.copy(), requires_grad=True)
    ag.add(ag.sum_all(ag.mul(x, x)), ag.sum_all(ag.scale(x, 2.0))).backward()
    assert np.allclose(x.grad, 2.0 * xv + 2.0, atol=1e-12)


def test_forward_determinism_bit_identical():
    rng = np.random.default_rng(8)
    a, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
    r1 = ag.sigmoid(ag.matmul(Tensor(a), Tensor(b))).data
    r2 = ag.sigmoid(ag.matmul(Tensor(a.copy()), Tensor(b.copy()))).data
    assert np.array_equal(r1, r2)


def test_pairwise_sqdist_values_and_gradient():
    a = np.array([[0.0, 0.0], [1.0, 0.0]])
    b = np.array([[0.0, 1.0]])
    out = ag.pairwise_sqdist(Tensor(a), Tensor(b))
    assert np.allclose(out.data, [[1.0], [2.0]], atol=1e-15)
    rng = np.random.default_rng(9)
    bfix = rng.standard_normal((4, 3))
    res = ag.gradcheck(lambda t: ag.sum_all(ag.sqrt(ag.pairwise_sqdist(t, Tensor(bfix)))),
                       rng.standard_normal((5, 3)), tol=1e-6)
    assert res.passed, res


def test_gather2d_and_structure_ops_gradients():
    rng = np.random.default_rng(10)
    rows = np.array([0, 2, 1])
    cols = np.array([1, 0, 1])
    res = ag.gradcheck(lambda t: ag.sum_all(ag.mul(ag.gather2d(t, rows, cols), Tensor([1.0, -2.0, 0.5]))),
                       rng.standard_normal((3, 2)), tol=1e-6)
    assert res.passed, res
    w32 = Tensor(rng.standard_normal((3, 2)))
    res = ag.gradcheck(lambda t: ag.sum_all(ag.mul(ag.transpose(t), w32)),
                       rng.standard_normal((2, 3)), tol=1e-6)
    assert res.passed, res
    w6 = Tensor(rng.standard_normal(6))
    res = ag.gradcheck(lambda t: ag.sum_all(ag.mul(ag.reshape(t, (6,)), w6)),
                       rng.standard_normal((2, 3)), tol=1e-6)
    assert res.passed, res


def test_conv_path_gradients():
    rng = np.random.default_rng(11)
    w = rng.standard_normal((3, 3, 1, 2))
    bias = rng.standard_normal(2)
    x = rng.standard_normal((2, 6, 6, 1))

    res = ag.gradcheck(lambda t: ag.sum_all(ag.sigmoid(ag.conv2d(t, Tensor(w), Tensor(bias)))), x, tol=1e-6)
    assert res.passed, res
    res = ag.gradcheck(lambda t: ag.sum_all(ag.sigmoid(ag.conv2d(Tensor(x), t, Tensor(bias)))), w, tol=1e-6)
    assert res.passed, res
    res = ag.gradcheck(lambda t: ag.sum_all(ag.avg_pool2d(ag.mul(t, t), 2)), x, tol=1e-6)
    assert res.passed, res
    res = ag.gradcheck(lambda t: ag.sum_all(ag.mul(ag.mean_spatial(t), ag.mean_spatial(t))), x, tol=1e-6)
    assert res.passed, res
    s = rng.standard_normal((2, 1))
    res = ag.gradcheck(lambda t: ag.sum_all(ag.scale_channels(t, Tensor(s))), x, tol=1e-6)
    assert res.passed, res
    res = ag.gradcheck(lambda t: ag.sum_all(ag.scale_channels(Tensor(x), t)), s, tol=1e-6)
    assert res.passed, res


def test_backward_requires_scalar():
    t = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ag.mul(t, t).backward()
