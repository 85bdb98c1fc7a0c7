"""Tests for the reverse-mode tensor core."""

import numpy as np
import pytest

from styleforge import autodiff as ad
from styleforge.autodiff import Adam, AdamState, Tensor, adam_step
from styleforge.errors import ShapeError


def finite_difference(tensor, f, h=1e-5):
    """Central-difference gradient of scalar-valued f w.r.t. tensor entries."""
    grad = np.zeros_like(tensor.data)
    it = np.nditer(tensor.data, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        original = tensor.data[idx]
        tensor.data[idx] = original + h
        f_plus = f()
        tensor.data[idx] = original - h
        f_minus = f()
        tensor.data[idx] = original
        grad[idx] = (f_plus - f_minus) / (2 * h)
    return grad


def max_rel_err(analytic, numeric):
    denom = np.maximum(1e-8, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((np.abs(analytic - numeric) / denom).max())


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(np.random.default_rng(0).random((5, 5, 1)))
        k = Tensor(np.ones((1, 1, 1, 1)))
        b = Tensor(np.zeros(1))
        out = ad.conv2d(x, k, b, padding="same")
        assert np.array_equal(out.data, x.data)

    def test_constant_field(self):
        x = Tensor(np.full((4, 4, 1), 5.0))
        k = Tensor(np.ones((3, 3, 1, 1)))
        b = Tensor(np.zeros(1))
        out = ad.conv2d(x, k, b, padding="valid")
        assert out.data.shape == (2, 2, 1)
        assert np.allclose(out.data, 45.0)

    def test_matches_nested_loop_oracle(self):
        rng = np.random.default_rng(42)
        x = rng.normal(size=(4, 4, 2))
        k = rng.normal(size=(3, 3, 2, 3))
        b = rng.normal(size=3)
        out = ad.conv2d(Tensor(x), Tensor(k), Tensor(b), padding="valid").data

        expected = np.zeros((2, 2, 3))
        for oy in range(2):
            for ox in range(2):
                for co in range(3):
                    acc = b[co]
                    for ky in range(3):
                        for kx in range(3):
                            for ci in range(2):
                                acc += x[oy + ky, ox + kx, ci] * k[ky, kx, ci, co]
                    expected[oy, ox, co] = acc
        assert np.abs(out - expected).max() < 1e-12

    def test_same_padding_keeps_size(self):
        x = Tensor(np.random.default_rng(1).random((7, 5, 2)))
        k = Tensor(np.random.default_rng(2).random((3, 3, 2, 4)))
        b = Tensor(np.zeros(4))
        assert ad.conv2d(x, k, b, "same").data.shape == (7, 5, 4)

    def test_batched_matches_per_image(self):
        rng = np.random.default_rng(3)
        xs = rng.normal(size=(3, 6, 6, 2))
        k = Tensor(rng.normal(size=(3, 3, 2, 2)))
        b = Tensor(rng.normal(size=2))
        batched = ad.conv2d(Tensor(xs), k, b, "same").data
        single = np.stack([ad.conv2d(Tensor(x), k, b, "same").data for x in xs])
        assert np.array_equal(batched, single)

    def test_shape_errors(self):
        x = Tensor(np.zeros((4, 4, 2)))
        with pytest.raises(ShapeError, match="channels"):
            ad.conv2d(x, Tensor(np.zeros((3, 3, 3, 1))), Tensor(np.zeros(1)))
        with pytest.raises(ShapeError, match="odd"):
            ad.conv2d(x, Tensor(np.zeros((2, 2, 2, 1))), Tensor(np.zeros(1)))
        with pytest.raises(ShapeError, match="bias"):
            ad.conv2d(x, Tensor(np.zeros((3, 3, 2, 4))), Tensor(np.zeros(3)))


class TestMaxPool:
    def test_simple_window(self):
        out = ad.max_pool2d(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None]))
        assert out.data.shape == (1, 1, 1)
        assert out.data[0, 0, 0] == 4.0

    def test_constant_input(self):
        out = ad.max_pool2d(Tensor(np.full((4, 6, 2), 3.5)))
        assert out.data.shape == (2, 3, 2)
        assert np.all(out.data == 3.5)

    def test_matches_bruteforce_scan(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(6, 6, 1))
        out = ad.max_pool2d(Tensor(x)).data
        expected = np.zeros((3, 3, 1))
        for i in range(3):
            for j in range(3):
                expected[i, j, 0] = x[2 * i : 2 * i + 2, 2 * j : 2 * j + 2, 0].max()
        assert np.array_equal(out, expected)

    def test_odd_size_edge_replication(self):
        x = np.arange(9, dtype=float).reshape(3, 3, 1)
        out = ad.max_pool2d(Tensor(x)).data
        assert out.shape == (2, 2, 1)
        # bottom-right window sees only replicated copies of cell 8
        assert out[1, 1, 0] == 8.0

    def test_gradient_conservation(self):
        rng = np.random.default_rng(11)
        for h, w in [(6, 6), (5, 7), (4, 5)]:
            x = Tensor(rng.normal(size=(h, w, 3)), requires_grad=True)
            out = ad.max_pool2d(x)
            loss = ad.mse(out, Tensor(np.zeros_like(out.data)))
            loss.backward()
            scaled = out.data * (2.0 / out.data.size)  # d(mse)/d(out)
            assert abs(x.grad.sum() - scaled.sum()) < 1e-12

    def test_tie_routes_to_lowest_rowmajor(self):
        x = Tensor(np.full((2, 2, 1), 2.0), requires_grad=True)
        out = ad.max_pool2d(x)
        loss = ad.mse(out, Tensor(np.zeros_like(out.data)))
        loss.backward()
        grads = x.grad[:, :, 0]
        assert grads[0, 0] != 0.0
        assert grads[0, 1] == grads[1, 0] == grads[1, 1] == 0.0

    def test_empty_rejected(self):
        with pytest.raises(ShapeError, match="empty"):
            ad.max_pool2d(Tensor(np.zeros((0, 4, 1))))


class TestRelu:
    def test_examples(self):
        out = ad.relu(Tensor(np.array([-1.0, 0.0, 2.0])))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_all_negative_zero_grad(self):
        x = Tensor(np.array([-3.0, -1.0, -0.5]), requires_grad=True)
        out = ad.relu(x)
        loss = ad.mse(out, Tensor(np.ones(3)))
        loss.backward()
        assert np.all(out.data == 0.0)
        assert np.all(x.grad == 0.0)

    def test_elementwise_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 4, 2))
        assert np.array_equal(ad.relu(Tensor(x)).data, np.maximum(0.0, x))


class TestDense:
    def test_identity(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]))
        out = ad.dense(x, Tensor(np.eye(3)), Tensor(np.zeros(3)))
        assert np.array_equal(out.data, x.data)

    def test_zero_weights_gives_bias(self):
        x = Tensor(np.array([1.0, 2.0]))
        b = np.array([5.0, -1.0, 0.5])
        out = ad.dense(x, Tensor(np.zeros((2, 3))), Tensor(b))
        assert np.array_equal(out.data, b)

    def test_matvec_oracle(self):
        rng = np.random.default_rng(8)
        x, w, b = rng.normal(size=5), rng.normal(size=(5, 4)), rng.normal(size=4)
        out = ad.dense(Tensor(x), Tensor(w), Tensor(b)).data
        expected = np.array(
            [sum(x[i] * w[i, j] for i in range(5)) + b[j] for j in range(4)]
        )
        assert np.abs(out - expected).max() < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.dense(Tensor(np.zeros(3)), Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))


class TestMse:
    def test_worked_example(self):
        a = Tensor(np.array([1.0, 2.0, 3.0, 4.0]))
        b = Tensor(np.array([1.0, 2.0, 3.0, 5.0]))
        assert ad.mse(a, b).item() == 0.25

    def test_identical_is_zero(self):
        a = Tensor(np.random.default_rng(0).random(10))
        assert ad.mse(a, Tensor(a.data.copy())).item() == 0.0

    def test_elementwise_oracle(self):
        rng = np.random.default_rng(9)
        a, b = rng.normal(size=12), rng.normal(size=12)
        expected = sum((x - y) ** 2 for x, y in zip(a, b)) / 12
        assert abs(ad.mse(Tensor(a), Tensor(b)).item() - expected) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.mse(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


class TestBackward:
    def test_analytic_example(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        loss = ad.mse(x, Tensor(np.array([0.0])))
        loss.backward()
        assert np.allclose(x.grad, [6.0])

    def test_unreachable_tensor_gets_zero(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        y = Tensor(np.array([3.0]), requires_grad=True)
        loss = ad.mse(y, Tensor(np.array([0.0])))
        loss.backward()
        assert np.array_equal(x.grad, np.zeros(2))

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ShapeError, match="scalar"):
            (x * 2.0).backward()

    def test_composed_graph_matches_finite_differences(self):
        rng = np.random.default_rng(123)
        x = Tensor(rng.normal(size=(6, 6, 2)), requires_grad=True)
        k = Tensor(rng.normal(size=(3, 3, 2, 3)) * 0.5, requires_grad=True)
        b = Tensor(rng.normal(size=3) * 0.5, requires_grad=True)
        target = rng.normal(size=(3, 3, 3))

        def forward():
            h = ad.relu(ad.conv2d(x, k, b, "same"))
            return ad.mse(ad.max_pool2d(h), Tensor(target))

        loss = forward()
        loss.backward()
        for t in (x, k, b):
            numeric = finite_difference(t, lambda: forward().item())
            assert max_rel_err(t.grad, numeric) <= 1e-4

    def test_linearity_of_backward(self):
        rng = np.random.default_rng(77)
        alpha, beta = 0.7, -1.3
        x_data = rng.normal(size=(4, 4, 2))
        t1 = rng.normal(size=(4, 4, 2))
        t2 = rng.normal(size=(2, 2, 2))

        def grads(scale1, scale2):
            x = Tensor(x_data.copy(), requires_grad=True)
            l1 = ad.mse(x, Tensor(t1))
            l2 = ad.mse(ad.max_pool2d(x), Tensor(t2))
            (l1 * scale1 + l2 * scale2).backward()
            return x.grad

        combined = grads(alpha, beta)
        separate = alpha * grads(1.0, 0.0) + beta * grads(0.0, 1.0)
        assert np.abs(combined - separate).max() < 1e-10

    def test_each_node_visited_once(self):
        # diamond graph: y used twice; gradient must be the sum, not doubled
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * 3.0
        z = y + y
        loss = ad.mse(z, Tensor(np.array([0.0])))
        loss.backward()
        # d/dx mse(6x, 0) = 2*6x*6 = 72x = 144
        assert np.allclose(x.grad, [144.0])

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(99)
            x = Tensor(rng.normal(size=(6, 6, 1)), requires_grad=True)
            k = Tensor(rng.normal(size=(3, 3, 1, 2)), requires_grad=True)
            loss = ad.mse(
                ad.relu(ad.conv2d(x, k, Tensor(np.zeros(2)), "same")),
                Tensor(np.zeros((6, 6, 2))),
            )
            loss.backward()
            return loss.item(), x.grad.copy(), k.grad.copy()

        l1, gx1, gk1 = run()
        l2, gx2, gk2 = run()
        assert l1 == l2
        assert np.array_equal(gx1, gx2)
        assert np.array_equal(gk1, gk2)


class TestGradientSuite:
    """Randomized finite-difference checks over many seeds for every op."""

    @pytest.mark.parametrize("seed", range(10))
    def test_all_ops_random_seeds(self, seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(5, 6, 2)) + 0.05, requires_grad=True)
        k = Tensor(rng.normal(size=(3, 3, 2, 2)) * 0.6, requires_grad=True)
        b = Tensor(rng.normal(size=2) * 0.3, requires_grad=True)
        w = Tensor(rng.normal(size=(8, 4)) * 0.5, requires_grad=True)
        wb = Tensor(rng.normal(size=4) * 0.2, requires_grad=True)
        target = rng.normal(size=4)
        labels = np.array([rng.integers(0, 4)])

        def forward():
            h = ad.relu(ad.conv2d(x, k, b, "valid"))
            p = ad.max_pool2d(h)
            flat = ad.reshape(p, (int(np.prod(p.data.shape)),))
            out = ad.dense(flat, w, wb)
            return ad.mse(out, Tensor(target)) + ad.cross_entropy_logits(out, labels)

        loss = forward()
        loss.backward()
        for t in (x, k, b, w, wb):
            numeric = finite_difference(t, lambda: forward().item())
            assert max_rel_err(t.grad, numeric) <= 1e-4


class TestStructuralOps:
    def test_reshape_roundtrip_grad(self):
        x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
        y = ad.reshape(x, (2, 6))
        loss = ad.mse(y, Tensor(np.zeros((2, 6))))
        loss.backward()
        assert x.grad.shape == (3, 4)

    def test_matmul_grad_matches_fd(self):
        rng = np.random.default_rng(4)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)

        def forward():
            return ad.mse(ad.matmul(a, b), Tensor(np.ones((3, 2))))

        forward().backward()
        for t in (a, b):
            numeric = finite_difference(t, lambda: forward().item())
            assert max_rel_err(t.grad, numeric) <= 1e-4

    def test_concat_channels_splits_grad(self):
        a = Tensor(np.ones((2, 2, 1)), requires_grad=True)
        b = Tensor(np.full((2, 2, 2), 2.0), requires_grad=True)
        out = ad.concat_channels([a, b])
        assert out.data.shape == (2, 2, 3)
        loss = ad.mse(out, Tensor(np.zeros((2, 2, 3))))
        loss.backward()
        assert a.grad.shape == (2, 2, 1)
        assert b.grad.shape == (2, 2, 2)

    def test_cross_entropy_matches_manual(self):
        logits = np.array([[1.0, -1.0], [0.5, 0.5]])
        labels = np.array([0, 1])
        out = ad.cross_entropy_logits(Tensor(logits), labels).item()
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        expected = -np.log([probs[0, 0], probs[1, 1]]).mean()
        assert abs(out - expected) < 1e-12


class TestAdam:
    def test_zero_grad_no_change(self):
        p = np.array([1.0, 2.0])
        state = AdamState.for_param(p, lr=0.01)
        adam_step(p, np.zeros(2), state)
        assert np.array_equal(p, [1.0, 2.0])
        assert state.t == 1

    def test_first_step_closed_form(self):
        p = np.array([0.0])
        state = AdamState.for_param(p, lr=0.01)
        adam_step(p, np.array([1.0]), state)
        # first bias-corrected update is lr * 1 / (1 + eps)
        assert abs(p[0] + 0.01) < 1e-6

    def test_determinism(self):
        def run():
            p = np.array([0.3, -0.7])
            state = AdamState.for_param(p, lr=0.05)
            for step in range(5):
                adam_step(p, np.array([0.1 * step, -0.2]), state)
            return p

        assert np.array_equal(run(), run())

    def test_shape_mismatch_rejected(self):
        p = np.zeros(3)
        state = AdamState.for_param(np.zeros(2))
        with pytest.raises(ShapeError):
            adam_step(p, np.zeros(3), state)

    def test_optimizer_over_tensors(self):
        x = Tensor(np.array([4.0]), requires_grad=True)
        opt = Adam([x], lr=0.1)
        for _ in range(50):
            loss = ad.mse(x, Tensor(np.array([1.0])))
            opt.zero_grad()
            loss.backward()
            opt.step()
        assert abs(x.data[0] - 1.0) < 0.5
