import numpy as np
import pytest

from cbnn import autodiff as ad
from cbnn.autodiff import (
    ContractError,
    DimensionError,
    DomainError,
    Tensor,
    apply_op,
    backward,
    watch_kinks,
)


from _util import fd_grad, max_rel_err


class TestForwardValues:
    def test_rbf_peak_is_one(self):
        out = ad.rbf_activation(Tensor(0.0), mu=0.0, sigma=1.0)
        np.testing.assert_allclose(out.value, 1.0)

    def test_rbf_formula(self):
        x = np.array([-1.0, 0.5, 2.0])
        out = ad.rbf_activation(Tensor(x), mu=0.5, sigma=2.0)
        np.testing.assert_allclose(out.value, np.exp(-((x - 0.5) ** 2) / 4.0))

    def test_matmul_value(self):
        out = ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_allclose(out.value, [[11.0]])

    def test_min_max_const_values(self):
        x = Tensor([-1.0, 2.0])
        np.testing.assert_allclose(ad.min_const(x, 0.0).value, [-1.0, 0.0])
        np.testing.assert_allclose(ad.max_const(x, 0.0).value, [0.0, 2.0])

    def test_clamp_value(self):
        out = ad.clamp(Tensor([-2.0, 0.3, 5.0]), 0.0, 1.0)
        np.testing.assert_allclose(out.value, [0.0, 0.3, 1.0])

    def test_mean_sum(self):
        x = Tensor([1.0, 2.0, 3.0, 4.0])
        np.testing.assert_allclose(ad.tsum(x).value, 10.0)
        np.testing.assert_allclose(ad.tmean(x).value, 2.5)

    def test_operator_sugar_matches_functions(self):
        a = Tensor([1.0, -2.0])
        b = Tensor([3.0, 5.0])
        np.testing.assert_allclose((a + b).value, [4.0, 3.0])
        np.testing.assert_allclose((a - b).value, [-2.0, -7.0])
        np.testing.assert_allclose((a * b).value, [3.0, -10.0])
        np.testing.assert_allclose((a / b).value, [1.0 / 3.0, -0.4])
        np.testing.assert_allclose((-a).value, [-1.0, 2.0])
        np.testing.assert_allclose((2.0 * a + 1.0).value, [3.0, -3.0])


class TestBackwardBasics:
    def test_sum_of_squares_gradient(self):
        w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        loss = ad.tsum(ad.square(w))
        grads = backward(loss)
        np.testing.assert_allclose(grads[w], [2.0, 4.0, 6.0])
        np.testing.assert_allclose(w.grad, [2.0, 4.0, 6.0])

    def test_grad_accumulates_until_zeroed(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        for _ in range(2):
            backward(ad.tsum(ad.square(w)))
        np.testing.assert_allclose(w.grad, [4.0, 8.0])
        w.zero_grad()
        assert w.grad is None
        backward(ad.tsum(ad.square(w)))
        np.testing.assert_allclose(w.grad, [2.0, 4.0])

    def test_unreachable_leaf_absent_from_map(self):
        w = Tensor([1.0], requires_grad=True)
        u = Tensor([5.0], requires_grad=True)
        grads = backward(ad.tsum(ad.square(w)))
        assert w in grads and u not in grads
        assert u.grad is None

    def test_no_grad_leaf_not_tracked(self):
        w = Tensor([1.0, 2.0])
        out = ad.tsum(ad.square(w))
        assert out._parents == ()
        assert backward(out) == {}

    def test_shared_subexpression_accumulates(self):
        # y = x*x + x has dy/dx = 2x + 1
        x = Tensor([3.0], requires_grad=True)
        y = ad.tsum(x * x + x)
        grads = backward(y)
        np.testing.assert_allclose(grads[x], [7.0])

    def test_broadcast_unbroadcast(self):
        a = Tensor(np.ones((3, 2)), requires_grad=True)
        b = Tensor(np.ones((1, 2)), requires_grad=True)
        c = Tensor(2.0, requires_grad=True)
        out = ad.tsum(a * b + c)
        grads = backward(out)
        assert grads[a].shape == (3, 2)
        assert grads[b].shape == (1, 2)
        np.testing.assert_allclose(grads[b], [[3.0, 3.0]])
        np.testing.assert_allclose(grads[c], 6.0)

    def test_matmul_gradients(self):
        a = Tensor([[1.0, 2.0]], requires_grad=True)
        b = Tensor([[3.0], [4.0]], requires_grad=True)
        grads = backward(ad.tsum(ad.matmul(a, b)))
        np.testing.assert_allclose(grads[a], [[3.0, 4.0]])
        np.testing.assert_allclose(grads[b], [[1.0], [2.0]])

    def test_backward_on_parameter_leaf(self):
        w = Tensor(2.0, requires_grad=True)
        grads = backward(w)
        np.testing.assert_allclose(grads[w], 1.0)


class TestKinkConventions:
    def test_min_const_subgradient(self):
        x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
        grads = backward(ad.tsum(ad.min_const(x, 0.0)))
        np.testing.assert_allclose(grads[x], [1.0, 0.0, 0.0])

    def test_max_const_subgradient(self):
        x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
        grads = backward(ad.tsum(ad.max_const(x, 0.0)))
        np.testing.assert_allclose(grads[x], [0.0, 0.0, 1.0])

    def test_abs_sign_zero_at_zero(self):
        x = Tensor([-2.0, 0.0, 3.0], requires_grad=True)
        grads = backward(ad.tsum(ad.tabs(x)))
        np.testing.assert_allclose(grads[x], [-1.0, 0.0, 1.0])

    def test_relu_zero_at_zero(self):
        x = Tensor([-2.0, 0.0, 3.0], requires_grad=True)
        grads = backward(ad.tsum(ad.relu(x)))
        np.testing.assert_allclose(grads[x], [0.0, 0.0, 1.0])

    def test_clamp_gradient_strictly_inside(self):
        x = Tensor([-2.0, 0.0, 0.5, 1.0, 3.0], requires_grad=True)
        grads = backward(ad.tsum(ad.clamp(x, 0.0, 1.0)))
        np.testing.assert_allclose(grads[x], [0.0, 0.0, 1.0, 0.0, 0.0])

    def test_rbf_gradient_zero_at_peak(self):
        x = Tensor(0.0, requires_grad=True)
        grads = backward(ad.rbf_activation(x, mu=0.0, sigma=1.0))
        np.testing.assert_allclose(grads[x], 0.0)


class TestErrors:
    def test_leaf_rejects_nonfinite(self):
        with pytest.raises(DomainError):
            Tensor([1.0, np.nan])
        with pytest.raises(DomainError):
            Tensor(np.inf)

    def test_log_domain(self):
        with pytest.raises(DomainError):
            ad.log(Tensor([1.0, 0.0]))
        with pytest.raises(DomainError):
            ad.log(Tensor([-1.0]))

    def test_div_by_zero(self):
        with pytest.raises(DomainError):
            ad.div(Tensor([1.0]), Tensor([0.0]))

    def test_matmul_shape_errors(self):
        with pytest.raises(DimensionError):
            ad.matmul(Tensor([1.0, 2.0]), Tensor([[1.0], [2.0]]))
        with pytest.raises(DimensionError):
            ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[1.0, 2.0]]))

    def test_elementwise_shape_error(self):
        with pytest.raises(DimensionError):
            ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_backward_requires_scalar_root(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            backward(ad.square(x))

    def test_clamp_bounds_order(self):
        with pytest.raises(ContractError):
            ad.clamp(Tensor([0.0]), 1.0, 0.0)

    def test_unknown_op_kind(self):
        with pytest.raises(ContractError):
            apply_op("softmax", Tensor([1.0]))


class TestApplyOp:
    def test_dispatch_matches_direct_call(self):
        x = Tensor([0.5, -0.5], requires_grad=True)
        out = apply_op("min_const", x, c=0.0)
        np.testing.assert_allclose(out.value, [0.0, -0.5])
        grads = backward(ad.tsum(out))
        np.testing.assert_allclose(grads[x], [0.0, 1.0])

    def test_op_kinds_inventory(self):
        kinds = ad.op_kinds()
        for k in ["add", "matmul", "rbf_activation", "min_const", "clamp", "mean"]:
            assert k in kinds


class TestKinkMonitor:
    def test_records_min_distance(self):
        x = Tensor([0.4, -2.0])
        with watch_kinks() as rec:
            ad.min_const(x, 0.5)
            ad.relu(x)
        np.testing.assert_allclose(rec.min_distance, 0.1)

    def test_no_piecewise_ops_leaves_inf(self):
        with watch_kinks() as rec:
            ad.exp(Tensor([1.0]))
        assert rec.min_distance == np.inf


class TestFiniteDifferenceOracle:
    """Backward pass against central differences on random compositions."""

    def test_smooth_composition_many_seeds(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            x0 = rng.normal(size=(4, 3))

            def fn(xv):
                x = Tensor(xv, requires_grad=True)
                y = ad.exp(x * 0.3) + ad.square(x) / 2.0
                y = y * ad.log(ad.exp(x) + 1.5)
                y = ad.rbf_activation(y, mu=0.2, sigma=1.3)
                return ad.tmean(y)

            x = Tensor(x0, requires_grad=True)
            y = ad.exp(x * 0.3) + ad.square(x) / 2.0
            y = y * ad.log(ad.exp(x) + 1.5)
            y = ad.rbf_activation(y, mu=0.2, sigma=1.3)
            grads = backward(ad.tmean(y))
            num = fd_grad(lambda v: fn(v).item(), x0)
            assert max_rel_err(grads[x], num) < 1e-5, f"seed {seed}"

    def test_piecewise_composition_away_from_kinks(self):
        for seed in range(20):
            rng = np.random.default_rng(100 + seed)
            # keep draws at least 0.05 from every kink so FD windows are clean
            x0 = rng.uniform(0.1, 0.9, size=(3, 2)) * rng.choice([-1.0, 1.0], size=(3, 2))
            x0 = np.where(np.abs(x0) < 0.05, 0.2, x0)

            def scalar(xv):
                x = Tensor(xv, requires_grad=True)
                y = ad.min_const(x, 0.0) + 0.5 * ad.max_const(x, 0.0)
                y = y + ad.tabs(x * 0.7 - 0.01) + ad.relu(x - 0.02)
                y = y + ad.clamp(x, -0.5, 0.5)
                return ad.tsum(y), x

            out, x = scalar(x0)
            grads = backward(out)
            num = fd_grad(lambda v: scalar(v)[0].item(), x0)
            assert max_rel_err(grads[x], num) < 1e-5, f"seed {seed}"

    def test_two_layer_network_all_parameters(self):
        rng = np.random.default_rng(7)
        xb = rng.normal(size=(5, 1))
        yb = rng.normal(size=(5, 1))
        params = {
            "w1": rng.normal(size=(1, 10)) * 0.5,
            "b1": rng.normal(size=(1, 10)) * 0.1,
            "w2": rng.normal(size=(10, 1)) * 0.5,
            "b2": rng.normal(size=(1, 1)) * 0.1,
        }

        def loss_value(p):
            h = ad.rbf_activation(ad.matmul(Tensor(xb), Tensor(p["w1"])) + Tensor(p["b1"]))
            out = ad.matmul(h, Tensor(p["w2"])) + Tensor(p["b2"])
            return ad.tmean(ad.square(out - Tensor(yb))).item()

        tensors = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
        h = ad.rbf_activation(ad.matmul(Tensor(xb), tensors["w1"]) + tensors["b1"])
        out = ad.matmul(h, tensors["w2"]) + tensors["b2"]
        grads = backward(ad.tmean(ad.square(out - Tensor(yb))))

        for name, t in tensors.items():
            def perturbed(v, name=name):
                q = {k: (v if k == name else params[k]) for k in params}
                return loss_value(q)

            num = fd_grad(perturbed, params[name])
            assert max_rel_err(grads[t], num) < 1e-5, name
