"""Autodiff core: forward values, gradients against finite differences, contracts."""

import numpy as np
import pytest

from relayvi.errors import ContractError, DomainError, ShapeError
from relayvi.tensor import (
    Tensor,
    absolute,
    add,
    elementwise,
    exp,
    gather_rows,
    log,
    matmul,
    mul,
    reduce,
    reduce_mean,
    reduce_sum,
    relu,
    sqrt,
    square,
    sub,
)

from oracles import finite_diff_grad, rel_err


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = matmul(Tensor(np.eye(2)), Tensor(a))
        np.testing.assert_array_equal(out.values, a)

    def test_unit_selection(self):
        out = matmul(Tensor([[1.0, 0.0]]), Tensor([[2.0], [5.0]]))
        np.testing.assert_array_equal(out.values, [[2.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_grad_of_sum_wrt_a(self):
        rng = np.random.default_rng(11)
        a_val = rng.standard_normal((3, 4))
        b_val = rng.standard_normal((4, 2))
        a = Tensor(a_val, requires_grad=True)
        b = Tensor(b_val, requires_grad=True)
        matmul(a, b).sum().backward()
        # analytic: ones(3,2) @ b.T
        np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b_val.T, rtol=1e-12)
        fd = finite_diff_grad(lambda av, bv: (av @ bv).sum(), [a_val, b_val], which=0)
        assert rel_err(a.grad, fd) < 1e-6
        fd_b = finite_diff_grad(lambda av, bv: (av @ bv).sum(), [a_val, b_val], which=1)
        assert rel_err(b.grad, fd_b) < 1e-6


class TestElementwise:
    def test_relu_definition(self):
        np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).values, [0.0, 0.0, 2.0])

    def test_exp_identity(self):
        np.testing.assert_array_equal(exp(Tensor([0.0])).values, [1.0])

    def test_abs_gradient(self):
        x = Tensor([-3.0, 5.0], requires_grad=True)
        absolute(x).sum().backward()
        np.testing.assert_array_equal(x.grad, [-1.0, 1.0])
        fd = finite_diff_grad(lambda v: np.abs(v).sum(), [np.array([-3.0, 5.0])], which=0)
        assert rel_err(x.grad, fd) < 1e-6

    def test_relu_grad_at_zero_is_zero(self):
        x = Tensor([0.0], requires_grad=True)
        relu(x).sum().backward()
        np.testing.assert_array_equal(x.grad, [0.0])

    def test_scalar_broadcast(self):
        x = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        c = Tensor(2.0, requires_grad=True)
        (x * c).sum().backward()
        np.testing.assert_array_equal(x.grad, np.full((2, 2), 2.0))
        np.testing.assert_array_equal(c.grad, np.asarray(10.0))

    def test_incompatible_shapes_rejected(self):
        with pytest.raises(ShapeError):
            add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))

    def test_log_negative_domain_error(self):
        with pytest.raises(DomainError):
            log(Tensor([-1.0]))

    def test_sqrt_negative_domain_error(self):
        with pytest.raises(DomainError):
            sqrt(Tensor([-0.5]))

    def test_dispatcher_matches_functions(self):
        x = Tensor([1.0, 2.0])
        np.testing.assert_array_equal(elementwise("exp", x).values, exp(x).values)
        np.testing.assert_array_equal(elementwise("add", x, x).values, (x + x).values)
        with pytest.raises(ShapeError):
            elementwise("nosuch", x)


class TestReduce:
    def test_sum_all(self):
        assert reduce_sum(Tensor([[1.0, 2.0], [3.0, 4.0]])).item() == 10.0

    def test_mean_singleton(self):
        assert reduce_mean(Tensor([5.0])).item() == 5.0

    def test_sum_axis_grad_is_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        reduce_sum(x, axes=0).sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_invalid_axis(self):
        with pytest.raises(ShapeError):
            reduce_sum(Tensor(np.ones((2, 2))), axes=2)

    def test_dispatcher(self):
        x = Tensor([[1.0, 2.0]])
        assert reduce("sum", x).item() == 3.0
        assert reduce("mean", x).item() == 1.5


class TestGatherRows:
    def test_selection(self):
        t = Tensor([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
        np.testing.assert_array_equal(gather_rows(t, [2, 0]).values, [[3.0, 3.0], [1.0, 1.0]])

    def test_empty(self):
        out = gather_rows(Tensor(np.ones((3, 4))), [])
        assert out.values.shape == (0, 4)

    def test_unselected_rows_get_exact_zero_grad(self):
        t = Tensor(np.ones((3, 2)), requires_grad=True)
        gather_rows(t, [1]).sum().backward()
        np.testing.assert_array_equal(t.grad, [[0.0, 0.0], [1.0, 1.0], [0.0, 0.0]])

    def test_grad_mass_conserved_with_duplicates(self):
        rng = np.random.default_rng(3)
        t = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        out = gather_rows(t, [0, 2, 2, 1])
        weights = Tensor(rng.standard_normal(out.values.shape))
        (out * weights).sum().backward()
        assert t.grad.sum() == pytest.approx(weights.values.sum(), rel=1e-12)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            gather_rows(Tensor(np.ones((3, 2))), [3])


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        square(x).sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_constant_leaf_gets_no_grad(self):
        c = Tensor([3.0])
        c.sum().backward()
        assert c.grad is None

    def test_non_scalar_root_rejected(self):
        with pytest.raises(ContractError):
            Tensor(np.ones(3), requires_grad=True).backward()

    def test_repeated_backward_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        y = square(x).sum()
        y.backward()
        y.backward()
        np.testing.assert_array_equal(x.grad, [8.0])

    def test_composite_mlp_loss_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        x_val = rng.standard_normal((4, 3))
        w1_val = rng.standard_normal((3, 5))
        b1_val = rng.standard_normal((1, 5))
        w2_val = rng.standard_normal((5, 2))

        def loss_np(x, w1, b1, w2):
            h = np.maximum(x @ w1 + np.ones((4, 1)) @ b1, 0.0)
            return ((h @ w2) ** 2).sum()

        params = [Tensor(v, requires_grad=True) for v in (w1_val, b1_val, w2_val)]
        w1, b1, w2 = params
        h = relu(matmul(Tensor(x_val), w1) + matmul(Tensor(np.ones((4, 1))), b1))
        square(matmul(h, w2)).sum().backward()
        for i, p in enumerate(params):
            fd = finite_diff_grad(loss_np, [x_val, w1_val, b1_val, w2_val], which=i + 1)
            assert rel_err(p.grad, fd) < 1e-4


UNARY_CASES = [
    ("exp", exp, np.exp, (-2.0, 2.0)),
    ("log", log, np.log, (0.5, 3.0)),
    ("relu", relu, lambda v: np.maximum(v, 0.0), (0.2, 2.0)),
    ("square", square, np.square, (-2.0, 2.0)),
    ("abs", absolute, np.abs, (0.2, 2.0)),
    ("sqrt", sqrt, np.sqrt, (0.5, 3.0)),
]


class TestGradientProperty:
    """Every differentiable op matches central finite differences on random small inputs."""

    @pytest.mark.parametrize("name,op,np_op,support", UNARY_CASES, ids=[c[0] for c in UNARY_CASES])
    def test_unary_ops(self, name, op, np_op, support):
        rng = np.random.default_rng(hash(name) % 2**32)
        for trial in range(5):
            shape = tuple(rng.integers(1, 6, size=rng.integers(1, 3)))
            v = rng.uniform(*support, size=shape)
            if name in ("relu", "abs"):
                v = np.where(rng.random(shape) < 0.5, -v, v)  # keep |v| away from the kink
            x = Tensor(v, requires_grad=True)
            op(x).sum().backward()
            fd = finite_diff_grad(lambda a: np_op(a).sum(), [v], which=0)
            assert rel_err(x.grad, fd) < 1e-4

    @pytest.mark.parametrize("name,op,np_op", [
        ("add", add, np.add),
        ("sub", sub, np.subtract),
        ("mul", mul, np.multiply),
    ])
    def test_binary_ops(self, name, op, np_op):
        rng = np.random.default_rng(hash(name) % 2**32)
        for scalar_b in (False, True):
            shape = tuple(rng.integers(1, 6, size=2))
            a_val = rng.standard_normal(shape)
            b_val = rng.standard_normal(()) if scalar_b else rng.standard_normal(shape)
            a, b = Tensor(a_val, requires_grad=True), Tensor(b_val, requires_grad=True)
            op(a, b).sum().backward()
            for i, p in enumerate((a, b)):
                fd = finite_diff_grad(lambda x, y: np_op(x, y).sum(), [a_val, b_val], which=i)
                assert rel_err(p.grad, fd) < 1e-4

    def test_reductions(self):
        rng = np.random.default_rng(99)
        v = rng.standard_normal((4, 5))
        for axes in (None, 0, 1):
            for op, np_op in ((reduce_sum, np.sum), (reduce_mean, np.mean)):
                x = Tensor(v, requires_grad=True)
                out = op(x, axes=axes)
                weights = rng.standard_normal(out.values.shape)
                (out * Tensor(weights)).sum().backward()
                fd = finite_diff_grad(
                    lambda a: (np_op(a, axis=axes) * weights).sum(), [v], which=0
                )
                assert rel_err(x.grad, fd) < 1e-4

    def test_gather_rows_grad(self):
        rng = np.random.default_rng(5)
        v = rng.standard_normal((5, 3))
        idx = [4, 0, 2]
        weights = rng.standard_normal((3, 3))
        x = Tensor(v, requires_grad=True)
        (gather_rows(x, idx) * Tensor(weights)).sum().backward()
        fd = finite_diff_grad(lambda a: (a[idx] * weights).sum(), [v], which=0)
        assert rel_err(x.grad, fd) < 1e-4


class TestDeterminism:
    def test_forward_bit_exact_across_calls(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.standard_normal((6, 6)))
        b = Tensor(rng.standard_normal((6, 6)))

        def run():
            return relu(matmul(a, b)).exp().mean().item()

        first = run()
        for _ in range(5):
            assert run() == first
