import math

import numpy as np
import pytest

from conftest import finite_difference_grad, relative_error
from orientdet.autodiff import CIRCLE_OFFSETS, Tape, Tensor, conv3x3, softmax_over_k
from orientdet.cls_sampling import (
    CORNER_BLEND,
    KernelBank,
    circularize,
    circularize_matrix,
    cls_plan_coords,
    cls_sample_points,
    cls_conv_forward,
    fuse_kernels,
    rotate_kernel,
)
from orientdet.errors import ContractError
from orientdet.geometry import RotRect


class TestCircularize:
    def test_blend_rows_are_convex(self):
        for blend in CORNER_BLEND.values():
            weights = np.array([w for _, w in blend])
            assert np.all(weights >= 0)
            assert abs(weights.sum() - 1.0) < 1e-12

    def test_all_ones_fixed_point(self):
        out = circularize(Tensor(np.ones((3, 3))))
        np.testing.assert_allclose(out.data, 1.0, atol=1e-12)

    def test_zero_kernel(self):
        out = circularize(Tensor(np.zeros((3, 3))))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_single_corner_source(self):
        k = np.zeros((3, 3))
        k[0, 0] = 1.0  # flat index 0
        out = circularize(Tensor(k)).data.reshape(9)
        assert out[0] == pytest.approx(0.5)
        assert out[2] == 0.0 and out[6] == 0.0 and out[8] == 0.0
        np.testing.assert_array_equal(out[[1, 3, 4, 5, 7]], [0, 0, 0, 0, 0])

    def test_edges_and_center_unchanged(self):
        rng = np.random.default_rng(0)
        k = rng.normal(size=(3, 3))
        out = circularize(Tensor(k)).data.reshape(9)
        np.testing.assert_array_equal(out[[1, 3, 4, 5, 7]], k.reshape(9)[[1, 3, 4, 5, 7]])

    def test_linearity(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
            ca, cb = rng.normal(size=2)
            lhs = circularize(Tensor(ca * a + cb * b)).data
            rhs = ca * circularize(Tensor(a)).data + cb * circularize(Tensor(b)).data
            np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_matches_matrix_form(self):
        rng = np.random.default_rng(2)
        k = rng.normal(size=(3, 3))
        out = circularize(Tensor(k)).data.reshape(9)
        np.testing.assert_allclose(out, circularize_matrix() @ k.reshape(9), atol=1e-14)

    def test_full_kernel_shape(self):
        rng = np.random.default_rng(3)
        k = rng.normal(size=(3, 3, 2, 4))
        out = circularize(Tensor(k))
        assert out.data.shape == (3, 3, 2, 4)
        # per channel pair it must match the scalar transform
        np.testing.assert_allclose(
            out.data[:, :, 1, 2].reshape(9),
            circularize_matrix() @ k[:, :, 1, 2].reshape(9),
            atol=1e-14,
        )


class TestRotateKernel:
    def test_identity(self):
        rng = np.random.default_rng(4)
        k = rng.normal(size=(3, 3))
        np.testing.assert_array_equal(rotate_kernel(Tensor(k), 0).data, k)

    def test_full_turn(self):
        rng = np.random.default_rng(5)
        k = circularize(Tensor(rng.normal(size=(3, 3))))
        out = k
        for _ in range(8):
            out = rotate_kernel(out, 1, circular=True)
        np.testing.assert_array_equal(out.data, k.data)

    def test_top_center_to_right_center_at_k2(self):
        k = np.zeros((3, 3))
        k.reshape(9)[1] = 1.0
        out = rotate_kernel(Tensor(k), 2).data.reshape(9)
        assert out[5] == 1.0 and out.sum() == 1.0

    def test_group_law(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            k = circularize(Tensor(rng.normal(size=(3, 3))))
            k1, k2 = rng.integers(0, 8, size=2)
            lhs = rotate_kernel(rotate_kernel(k, int(k1), circular=True), int(k2), circular=True)
            rhs = rotate_kernel(k, int((k1 + k2) % 8), circular=True)
            np.testing.assert_array_equal(lhs.data, rhs.data)

    def test_odd_rotation_of_square_kernel_rejected(self):
        with pytest.raises(ContractError):
            rotate_kernel(Tensor(np.ones((3, 3))), 1)


class TestFuseKernels:
    def test_convex_endpoints(self):
        rng = np.random.default_rng(7)
        sq = Tensor(rng.normal(size=(3, 3)))
        circ = Tensor(rng.normal(size=(3, 3)))
        np.testing.assert_allclose(fuse_kernels(sq, circ, Tensor(1.0), 0).data, circ.data)
        np.testing.assert_allclose(fuse_kernels(sq, circ, Tensor(0.0), 0).data, sq.data, atol=1e-15)

    def test_odd_rotation_ignores_lambda(self):
        rng = np.random.default_rng(8)
        sq = Tensor(rng.normal(size=(3, 3)))
        circ = Tensor(rng.normal(size=(3, 3)))
        a = fuse_kernels(sq, circ, Tensor(0.1), 3)
        b = fuse_kernels(sq, circ, Tensor(0.9), 3)
        np.testing.assert_array_equal(a.data, b.data)
        np.testing.assert_array_equal(a.data, circ.data)


class TestKernelBank:
    def test_beta_must_have_eight_entries(self):
        from orientdet.errors import ShapeError

        with pytest.raises(ShapeError):
            KernelBank.build(Tensor(np.ones((3, 3))), Tensor(np.full(4, 0.5)), Tensor(np.ones(4)))

    def test_effective_kernel_is_weighted_sum(self):
        rng = np.random.default_rng(9)
        base = Tensor(rng.normal(size=(3, 3)))
        lam = Tensor(rng.uniform(0.2, 0.8, size=4))
        beta = softmax_over_k(Tensor(rng.normal(size=8)))
        bank = KernelBank.build(base, lam, beta)
        want = sum(beta.data[k] * bank.kernels[k].data for k in range(8))
        np.testing.assert_allclose(bank.effective_kernel().data, want, atol=1e-12)


class TestClsSamplePoints:
    def test_center_placement(self):
        rect = RotRect(center=np.array([3.0, 5.0]), s1=4.0, s2=2.0, angle=0.0)
        plan = cls_sample_points(rect, np.full(18, 0.5))
        np.testing.assert_allclose(plan.coords, np.tile(rect.center, (9, 1)), atol=1e-12)

    def test_mid_right_edge(self):
        rect = RotRect(center=np.array([3.0, 5.0]), s1=4.0, s2=2.0, angle=0.0)
        omega = np.full(18, 0.5)
        omega[0] = 1.0 - 1e-12
        plan = cls_sample_points(rect, omega)
        np.testing.assert_allclose(plan.coords[0], [3.0 + 2.0, 5.0], atol=1e-9)

    def test_containment_in_rotated_rect(self):
        rng = np.random.default_rng(10)
        for _ in range(200):
            rect = RotRect(
                center=rng.uniform(-5, 5, size=2),
                s1=rng.uniform(2.0, 8.0),
                s2=rng.uniform(1.0, 2.0),
                angle=rng.uniform(0, math.pi),
            )
            plan = cls_sample_points(rect, rng.uniform(1e-6, 1 - 1e-6, size=18))
            assert rect.containment_residual(plan.coords).max() < 1e-9


class TestCsConvForward:
    def test_one_hot_beta_zero_lambda_matches_square_conv_on_edge_taps(self):
        rng = np.random.default_rng(11)
        grid = Tensor(rng.normal(size=(6, 6, 2)))
        base = np.zeros((3, 3))
        base.reshape(9)[[1, 3, 4, 5, 7]] = rng.normal(size=5)  # corner taps zero
        beta = np.zeros(8)
        beta[0] = 1.0
        bank = KernelBank.build(Tensor(base), Tensor(np.zeros(4)), Tensor(beta))
        m = Tensor(rng.uniform(0.2, 0.9, size=9))
        out = cls_conv_forward(grid, bank, m, None, None)
        ref = conv3x3(grid, Tensor(base), modulation=m)
        np.testing.assert_allclose(out.data, ref.data, atol=1e-12)

    def test_diagonal_taps_match_bilinear_oracle(self):
        rng = np.random.default_rng(12)
        grid = Tensor(rng.normal(size=(6, 6, 1)))
        base = rng.normal(size=(3, 3))
        beta = np.zeros(8)
        beta[0] = 1.0
        bank = KernelBank.build(Tensor(base), Tensor(np.full(4, 1.0)), Tensor(beta))
        out = cls_conv_forward(grid, bank, Tensor(np.ones(9)), None, None)
        from orientdet.autodiff import bilinear_sample

        x, y = 3, 2
        taps = bilinear_sample(grid, Tensor(CIRCLE_OFFSETS + np.array([x, y], dtype=float)))
        want = float(taps.data[:, 0] @ circularize(Tensor(base)).data.reshape(9))
        assert out.data[x, y, 0] == pytest.approx(want, rel=1e-12)

    def test_constant_grid_invariant_to_beta(self):
        # every orientation sees the same constant, so the output cannot
        # depend on how the orientations are weighted. This needs uniform
        # per-tap modulation (a ring shift against non-uniform modulation
        # changes the response) and a blend that preserves the tap sum:
        # lambda = 1 keeps all eight kernels pure rotations of one kernel.
        rng = np.random.default_rng(13)
        grid = Tensor(np.full((7, 7, 1), 2.5))
        base = Tensor(rng.normal(size=(3, 3)))
        lam = Tensor(np.ones(4))
        m = Tensor(np.full(9, 0.6))
        outputs = []
        for _ in range(4):
            beta = softmax_over_k(Tensor(rng.normal(size=8)))
            bank = KernelBank.build(base, lam, beta)
            outputs.append(cls_conv_forward(grid, bank, m, None, None).data[3, 3, 0])
        np.testing.assert_allclose(outputs, outputs[0], atol=1e-12)

    def test_constant_grid_invariant_to_beta_all_ones_base(self):
        # the all-ones kernel is a fixed point of circularization, so any
        # blend weight keeps the tap sum and the invariance holds
        rng = np.random.default_rng(16)
        grid = Tensor(np.full((7, 7, 1), -1.25))
        base = Tensor(np.ones((3, 3)))
        lam = Tensor(rng.uniform(0, 1, size=4))
        m = Tensor(np.full(9, 0.4))
        outputs = []
        for _ in range(4):
            beta = softmax_over_k(Tensor(rng.normal(size=8)))
            bank = KernelBank.build(base, lam, beta)
            outputs.append(cls_conv_forward(grid, bank, m, None, None).data[3, 3, 0])
        np.testing.assert_allclose(outputs, outputs[0], atol=1e-12)

    def test_expanded_orientation_sum_matches_collapsed(self):
        rng = np.random.default_rng(14)
        grid = Tensor(rng.normal(size=(6, 6, 2)))
        base = Tensor(rng.normal(size=(3, 3)))
        lam = Tensor(rng.uniform(0.2, 0.8, size=4))
        beta = softmax_over_k(Tensor(rng.normal(size=8)))
        bank = KernelBank.build(base, lam, beta)
        m = Tensor(rng.uniform(0.2, 0.9, size=9))
        pos = np.array([[2, 2]])
        coords = Tensor(rng.uniform(1.2, 4.3, size=(1, 9, 2)))
        collapsed = cls_conv_forward(grid, bank, m, coords, pos)
        expanded = None
        for k in range(8):
            term = conv3x3(grid, bank.kernels[k], modulation=m, offsets=CIRCLE_OFFSETS,
                           plan_coords=coords, plan_positions=pos) * beta[k]
            expanded = term if expanded is None else expanded + term
        np.testing.assert_allclose(collapsed.data, expanded.data, atol=1e-12)

    def test_gradients_wrt_beta_lambda_omega_kernel(self):
        rng = np.random.default_rng(15)
        grid = Tensor(rng.normal(size=(7, 7, 2)))
        weights = rng.normal(size=(7, 7, 2))
        rects = [RotRect(center=np.array([3.3, 3.6]), s1=4.0, s2=2.0, angle=0.7)]
        pos = np.array([[3, 3]])
        m = Tensor(rng.uniform(0.3, 0.7, size=9))

        base0 = rng.normal(size=(3, 3))
        lam_logits0 = rng.normal(size=4) * 0.3
        beta_logits0 = rng.normal(size=8) * 0.3
        omega_logits0 = rng.normal(size=(1, 18)) * 0.3

        def run(base_t, lam_logits, beta_logits, omega_logits):
            from orientdet.autodiff import sigmoid

            bank = KernelBank.build(base_t, sigmoid(lam_logits), softmax_over_k(beta_logits))
            omega = sigmoid(omega_logits)
            coords = cls_plan_coords(rects, omega)
            out = cls_conv_forward(grid, bank, m, coords, pos)
            return (out * weights).sum()

        cases = [
            ("kernel", base0.copy(), lambda t: run(t, Tensor(lam_logits0), Tensor(beta_logits0), Tensor(omega_logits0))),
            ("lam", lam_logits0.copy(), lambda t: run(Tensor(base0), t, Tensor(beta_logits0), Tensor(omega_logits0))),
            ("beta", beta_logits0.copy(), lambda t: run(Tensor(base0), Tensor(lam_logits0), t, Tensor(omega_logits0))),
            ("omega", omega_logits0.copy(), lambda t: run(Tensor(base0), Tensor(lam_logits0), Tensor(beta_logits0), t)),
        ]
        for name, x, build in cases:
            leaf = Tensor(x, requires_grad=True)
            with Tape() as tape:
                tape.backward(build(leaf))
            numeric = finite_difference_grad(lambda: build(leaf).item(), x)
            assert relative_error(leaf.grad, numeric) < 1e-3, name
