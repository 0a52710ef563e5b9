import numpy as np
import pytest

from conftest import finite_difference_grad, random_glide_box, relative_error
from orientdet.autodiff import SQUARE_OFFSETS, Tape, Tensor, conv3x3
from orientdet.errors import ContractError
from orientdet.geometry import decode_glide
from orientdet.loc_sampling import (
    embed_coords,
    loc_plan_coords,
    loc_sample_points,
    loc_conv_forward,
    refine_obb,
)
from test_geometry import make_box


def point_segment_distance(p, a, b):
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t * ab))


def plan_edge_segments(box):
    _, poly = decode_glide(box)
    top, right, bottom, left = poly
    return {0: (top, left), 2: (top, right), 6: (left, bottom), 8: (right, bottom)}


class TestEmbedCoords:
    def test_column_pattern(self):
        sce = embed_coords(Tensor(np.zeros((4, 4, 1))))
        assert sce.data.shape == (4, 4, 3)
        np.testing.assert_array_equal(sce.data[:, 0, 1], [0, 1, 2, 3])
        np.testing.assert_array_equal(sce.data[0, :, 2], [0, 1, 2, 3])

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        grid = rng.normal(size=(5, 3, 4))
        sce = embed_coords(Tensor(grid))
        np.testing.assert_array_equal(sce.data[:, :, :4], grid)

    def test_specific_cell(self):
        sce = embed_coords(Tensor(np.zeros((6, 6, 2))))
        np.testing.assert_array_equal(sce.data[3, 2, 2:], [3.0, 2.0])


class TestSamplePoints:
    def test_diamond_midpoint(self):
        box = make_box((2, 2), (2, 2, 2, 2), (2, 2, 2, 2))
        plan = loc_sample_points(box, sigma=np.array([0.5, 0.5, 0.5, 0.5]))
        np.testing.assert_allclose(plan.coords[0], [1.0, 1.0], atol=1e-12)

    def test_vertical_edge_equality_branch(self):
        box = make_box((2, 2), (2, 2, 2, 2), (0.0, 2, 2, 2))
        plan = loc_sample_points(box, sigma=np.array([0.5, 0.5, 0.5, 0.5]))
        # top vertex collapses onto the top-left corner; the tap slides on the
        # vertical left edge halfway between the top and left vertices
        _, poly = decode_glide(box)
        top, _, _, left = poly
        assert top[0] == poly[:, 0].min()
        expected = [top[0], top[1] + 0.5 * (left[1] - top[1])]
        np.testing.assert_allclose(plan.coords[0], expected, atol=1e-12)

    def test_slide_limits_hit_segment_endpoints(self):
        rng = np.random.default_rng(1)
        box = random_glide_box(rng)
        segments = plan_edge_segments(box)
        lo = loc_sample_points(box, sigma=np.full(4, 1e-9)).coords
        hi = loc_sample_points(box, sigma=np.full(4, 1.0 - 1e-9)).coords
        for tap, (a, b) in segments.items():
            ends = {tuple(np.round(a, 6)), tuple(np.round(b, 6))}
            assert tuple(np.round(lo[tap], 6)) in ends
            assert tuple(np.round(hi[tap], 6)) in ends
            assert not np.allclose(lo[tap], hi[tap])

    def test_fixed_taps_are_anchor_and_vertices(self):
        rng = np.random.default_rng(2)
        box = random_glide_box(rng)
        plan = loc_sample_points(box, sigma=rng.uniform(0.1, 0.9, size=4))
        _, poly = decode_glide(box)
        np.testing.assert_allclose(plan.coords[4], box.anchor, atol=1e-12)
        np.testing.assert_allclose(plan.coords[1], poly[0], atol=1e-12)
        np.testing.assert_allclose(plan.coords[5], poly[1], atol=1e-12)
        np.testing.assert_allclose(plan.coords[7], poly[2], atol=1e-12)
        np.testing.assert_allclose(plan.coords[3], poly[3], atol=1e-12)

    def test_segment_membership_and_hbb_containment(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            box = random_glide_box(rng)
            sigma = rng.uniform(1e-6, 1.0 - 1e-6, size=4)
            plan = loc_sample_points(box, sigma)
            hbb, _ = decode_glide(box)
            for tap, (a, b) in plan_edge_segments(box).items():
                assert point_segment_distance(plan.coords[tap], a, b) < 1e-9
            assert np.all(plan.coords[:, 0] >= hbb[0] - 1e-9)
            assert np.all(plan.coords[:, 1] >= hbb[1] - 1e-9)
            assert np.all(plan.coords[:, 0] <= hbb[2] + 1e-9)
            assert np.all(plan.coords[:, 1] <= hbb[3] + 1e-9)

    def test_equality_branches_stay_on_their_edges(self):
        # force each corner tap into its degenerate binding in turn
        rng = np.random.default_rng(4)
        for tap, szero in ((0, "s1=0"), (2, "s1=w"), (6, "s3=w"), (8, "s3=0")):
            l = rng.uniform(1.0, 4.0, size=4)
            w, h = l[1] + l[3], l[0] + l[2]
            s = rng.uniform(0.2, 0.8, size=4) * np.array([w, h, w, h])
            if szero == "s1=0":
                s[0] = 0.0
            elif szero == "s1=w":
                s[0] = w
            elif szero == "s3=w":
                s[2] = w
            else:
                s[2] = 0.0
            box = make_box((5, 5), l, s)
            plan = loc_sample_points(box, rng.uniform(0.1, 0.9, size=4))
            a, b = plan_edge_segments(box)[tap]
            assert point_segment_distance(plan.coords[tap], a, b) < 1e-9

    def test_sigma_out_of_range_rejected(self):
        box = make_box((2, 2), (2, 2, 2, 2), (1, 1, 1, 1))
        with pytest.raises(ContractError):
            loc_sample_points(box, np.array([0.0, 0.5, 0.5, 0.5]))


class TestLsConvForward:
    def test_no_positives_matches_plain_conv(self):
        rng = np.random.default_rng(5)
        sce = Tensor(rng.normal(size=(6, 6, 4)))
        kernel = Tensor(rng.normal(size=(3, 3)))
        m = Tensor(rng.uniform(0.2, 0.8, size=9))
        out = loc_conv_forward(sce, kernel, m, None, None)
        ref = conv3x3(sce, kernel, modulation=m, offsets=SQUARE_OFFSETS)
        np.testing.assert_array_equal(out.data, ref.data)

    def test_all_taps_at_anchor_collapse(self):
        rng = np.random.default_rng(6)
        sce = Tensor(rng.normal(size=(6, 6, 3)))
        kernel = np.full((3, 3), 1.0 / 9.0)  # taps sum to 1
        pos = np.array([[2, 3]])
        coords = Tensor(np.tile(np.array([2.0, 3.0]), (1, 9, 1)))
        out = loc_conv_forward(sce, Tensor(kernel), Tensor(np.ones(9)), coords, pos)
        np.testing.assert_allclose(out.data[2, 3], sce.data[2, 3], atol=1e-12)

    def test_mismatched_plan_count_rejected(self):
        sce = Tensor(np.zeros((4, 4, 1)))
        with pytest.raises(ContractError):
            loc_conv_forward(sce, Tensor(np.zeros((3, 3))), Tensor(np.ones(9)),
                            Tensor(np.zeros((2, 9, 2))), np.array([[1, 1]]))

    def test_gradient_through_sigma(self):
        rng = np.random.default_rng(7)
        grid = Tensor(rng.normal(size=(8, 8, 2)))
        kernel = Tensor(rng.normal(size=(3, 3)))
        m = Tensor(rng.uniform(0.3, 0.7, size=9))
        anchors = np.array([[4.0, 4.0]])
        l = Tensor(np.array([[2.0, 2.5, 1.5, 2.0]]))
        s = Tensor(np.array([[1.0, 1.5, 2.0, 1.2]]))
        weights = rng.normal(size=(8, 8, 2))
        sigma_raw = rng.uniform(0.25, 0.75, size=(1, 4))

        def run(sig_tensor):
            coords = loc_plan_coords(l, s, sig_tensor, anchors)
            out = loc_conv_forward(grid, kernel, m, coords, np.array([[4, 4]]))
            return (out * weights).sum()

        leaf = Tensor(sigma_raw, requires_grad=True)
        with Tape() as tape:
            tape.backward(run(leaf))
        numeric = finite_difference_grad(lambda: run(leaf).item(), sigma_raw)
        assert relative_error(leaf.grad, numeric) < 1e-3

    def test_gradient_through_box_parameters(self):
        rng = np.random.default_rng(8)
        grid = Tensor(rng.normal(size=(8, 8, 2)))
        kernel = Tensor(rng.normal(size=(3, 3)))
        m = Tensor(rng.uniform(0.3, 0.7, size=9))
        anchors = np.array([[3.0, 4.0]])
        s_frac = np.array([[0.4, 0.6, 0.5, 0.3]])
        sigma = Tensor(np.array([[0.3, 0.6, 0.4, 0.7]]))
        weights = rng.normal(size=(8, 8, 2))
        # generic values keep every plan coordinate off the integer lattice,
        # where bilinear sampling is not differentiable
        l_raw = np.array([[2.3, 2.45, 1.7, 2.15]])

        def run(l_tensor):
            w = l_tensor[:, 1] + l_tensor[:, 3]
            h = l_tensor[:, 0] + l_tensor[:, 2]
            from orientdet.autodiff import stack

            s = stack([s_frac[:, 0] * w, s_frac[:, 1] * h, s_frac[:, 2] * w, s_frac[:, 3] * h], axis=1)
            coords = loc_plan_coords(l_tensor, s, sigma, anchors)
            out = loc_conv_forward(grid, kernel, m, coords, np.array([[3, 4]]))
            return (out * weights).sum()

        leaf = Tensor(l_raw, requires_grad=True)
        with Tape() as tape:
            tape.backward(run(leaf))
        numeric = finite_difference_grad(lambda: run(leaf).item(), l_raw)
        assert relative_error(leaf.grad, numeric) < 1e-3


class TestRefine:
    def test_unit_deltas_identity(self):
        box = make_box((2, 2), (2, 2, 2, 2), (1, 1.5, 0.5, 1))
        out = refine_obb(box, np.ones(4), np.ones(4))
        np.testing.assert_array_equal(out.l, box.l)
        np.testing.assert_array_equal(out.s, box.s)

    def test_uniform_doubling(self):
        box = make_box((2, 2), (1, 2, 3, 4), (1, 1, 1, 1))
        out = refine_obb(box, np.full(4, 2.0), np.ones(4))
        np.testing.assert_allclose(out.l, [2, 4, 6, 8])

    def test_glide_clamped_to_refined_range(self):
        box = make_box((2, 2), (2, 2, 2, 2), (3.9, 1, 1, 1))  # s1 close to w=4
        out = refine_obb(box, np.ones(4), np.array([2.0, 1, 1, 1]))
        assert out.s[0] == out.l[1] + out.l[3]

    def test_nonpositive_delta_rejected(self):
        box = make_box((2, 2), (2, 2, 2, 2), (1, 1, 1, 1))
        with pytest.raises(ContractError):
            refine_obb(box, np.array([0.0, 1, 1, 1]), np.ones(4))
