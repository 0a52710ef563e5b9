import numpy as np
import pytest

from orientdet.autodiff import Tape
from orientdet.data import SynthSpec, synth_scene
from orientdet.errors import ManifestError
from orientdet.geometry import iou_polygon
from orientdet.model import ModelConfig, OrientedDetector, decode_level
from orientdet.train import (
    assign_sample,
    candidate_cells,
    prepare_samples,
    sample_losses,
)

TINY = ModelConfig(stem_channels=(6, 8, 12, 12), feat_channels=8, head_channels=8)


def tiny_model(seed=0, **kw):
    cfg = ModelConfig(stem_channels=(6, 8, 12, 12), feat_channels=8, head_channels=8, **kw)
    return OrientedDetector(cfg, seed=seed)


class TestForward:
    def test_zero_image_zero_init_heads_give_half_objectness(self):
        model = tiny_model()
        outs = model.forward(np.zeros((64, 64, 1)))
        for out in outs:
            np.testing.assert_allclose(out.obj.data, 0.5, atol=1e-12)
            np.testing.assert_allclose(out.sigma.data, 0.5, atol=1e-12)
            np.testing.assert_allclose(out.cls.data, 0.5, atol=1e-12)

    def test_output_shapes(self):
        model = tiny_model()
        outs = model.forward(np.zeros((64, 64, 1)))
        assert outs[0].shape == (8, 8) and outs[0].stride == 8
        assert outs[1].shape == (4, 4) and outs[1].stride == 16
        assert outs[0].l_ref.data.shape == (8, 8, 4)
        assert outs[0].cls.data.shape == (8, 8, 3)

    def test_non_divisible_image_padded(self):
        model = tiny_model()
        outs = model.forward(np.zeros((60, 60, 1)))
        assert outs[0].shape == (8, 8)
        assert outs[1].shape == (4, 4)

    def test_shift_equivariance_interior(self):
        # translating the input by one stride shifts the purely convolutional
        # grids by one cell, at cells whose receptive field stays inside both
        # images. The refinement stage (absolute coordinate channels) and the
        # deform-mode classification branch (globally pooled kernel-blend
        # weights) are positional by design and tested in plain mode instead.
        # the top-down pyramid only admits shifts by the coarsest stride:
        # 16 px moves level 0 by two cells and level 1 by one
        rng = np.random.default_rng(0)
        for mode in ("deform", "plain"):
            model = tiny_model(seed=3, head_mode=mode)
            for name, p in model.params.items():  # non-zero heads make this meaningful
                if name.endswith(".w"):
                    p.data = p.data + 0.02 * rng.normal(size=p.data.shape)
            base = rng.uniform(0, 1, size=(160, 160, 1))
            shifted = np.zeros_like(base)
            shifted[16:, 16:] = base[:-16, :-16]
            none_cells = [np.zeros((0, 2), dtype=int)] * 2
            outs_a = model.forward(base, plan_cells=none_cells)
            outs_b = model.forward(shifted, plan_cells=none_cells)
            for lvl, cell_shift in ((0, 2), (1, 1)):
                out_a, out_b = outs_a[lvl], outs_b[lvl]
                grids = [
                    (out_a.obj.data, out_b.obj.data),
                    (out_a.l_init.data, out_b.l_init.data),
                    (out_a.sigma.data, out_b.sigma.data),
                ]
                if mode == "plain":
                    grids.append((out_a.cls.data, out_b.cls.data))
                    grids.append((out_a.l_ref.data, out_b.l_ref.data))
                lo, hi = 8 // (lvl + 1), 11 // (lvl + 1)
                for grid_a, grid_b in grids:
                    a = grid_a[lo:hi, lo:hi]
                    b = grid_b[lo + cell_shift : hi + cell_shift, lo + cell_shift : hi + cell_shift]
                    assert np.abs(a - b).max() < 1e-6, (mode, lvl)

    def test_train_and_inference_agree_given_same_cells(self):
        rng = np.random.default_rng(1)
        model = tiny_model(seed=2)
        image = rng.uniform(0, 1, size=(64, 64, 1))
        inference = model.forward(image)  # prefilter picks cells
        cells = [o.plan_cells for o in inference]
        training = model.forward(image, plan_cells=cells)
        for a, b in zip(inference, training):
            np.testing.assert_array_equal(a.l_ref.data, b.l_ref.data)
            np.testing.assert_array_equal(a.cls.data, b.cls.data)
            np.testing.assert_array_equal(a.obj.data, b.obj.data)

    def test_plain_mode_runs_without_plans(self):
        model = tiny_model(head_mode="plain")
        outs = model.forward(np.zeros((64, 64, 1)))
        assert all(len(o.plan_cells) == 0 for o in outs)


class TestGradientFlow:
    def test_every_parameter_receives_gradient(self):
        scene = synth_scene(3, SynthSpec(count_min=2, count_max=2))
        samples = prepare_samples([scene], 64, (8, 16), 24.0, 1e-3)
        model = tiny_model(seed=1)
        # move off the zero-initialized point: exactly-zero prediction heads
        # would block gradients into everything upstream
        rng = np.random.default_rng(7)
        for p in model.params.values():
            p.data = p.data + 0.05 * rng.normal(size=p.data.shape)
        sample = samples[0]
        with Tape() as tape:
            cells = candidate_cells(sample.targets, 0.3)
            outputs = model.forward(sample.scene.image, plan_cells=cells)
            maps = assign_sample(sample.targets, outputs, "dynamic", 0.3, 0.3, 0, 10)
            obj_l, loc_l, cls_l, counts = sample_losses(sample, outputs, maps, 2.0, 3)
            total = obj_l + loc_l + cls_l
            tape.backward(total)
        dead = [
            name for name, p in model.params.items()
            if p.grad is None or not np.any(p.grad != 0)
        ]
        assert dead == [], f"parameters with no gradient: {dead}"


class TestDecode:
    def test_empty_below_threshold(self):
        l = np.ones((4, 4, 4))
        s = np.zeros((4, 4, 4))
        obj = np.full((4, 4), 0.2)
        cls = np.full((4, 4, 2), 0.2)
        assert decode_level(l, s, obj, cls, 8, conf_thresh=0.5) == []

    def test_hand_planted_diamond(self):
        W = H = 8
        l = np.ones((W, H, 4))
        s = np.zeros((W, H, 4))
        obj = np.zeros((W, H))
        cls = np.zeros((W, H, 3))
        l[3, 4] = [2.0, 2.0, 2.0, 2.0]
        s[3, 4] = [2.0, 2.0, 2.0, 2.0]
        obj[3, 4] = 0.9
        cls[3, 4, 1] = 0.8
        dets = decode_level(l, s, obj, cls, stride=8, conf_thresh=0.5)
        assert len(dets) == 1
        det = dets[0]
        assert det.cls == 1
        assert det.score == pytest.approx(0.72)
        # anchor cell (3,4) is pixel (28, 36); the diamond spans +-16 px
        expected = np.array([[28.0, 20.0], [44.0, 36.0], [28.0, 52.0], [12.0, 36.0]])
        np.testing.assert_allclose(det.polygon, expected, atol=1e-9)

    def test_score_monotone_in_objectness(self):
        rng = np.random.default_rng(2)
        l = np.ones((4, 4, 4)) + rng.uniform(0, 1, (4, 4, 4))
        s = np.zeros((4, 4, 4))
        cls = rng.uniform(0.3, 0.9, (4, 4, 2))
        obj = rng.uniform(0.3, 0.9, (4, 4))
        base = {(d.polygon[0, 0], d.polygon[0, 1]): d.score
                for d in decode_level(l, s, obj, cls, 8, 0.0)}
        obj2 = obj.copy()
        obj2[2, 2] = min(obj[2, 2] + 0.05, 1.0)
        bumped = {(d.polygon[0, 0], d.polygon[0, 1]): d.score
                  for d in decode_level(l, s, obj2, cls, 8, 0.0)}
        assert all(bumped[k] >= v for k, v in base.items())


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        model = tiny_model(seed=5)
        rng = np.random.default_rng(3)
        for p in model.params.values():
            p.data = p.data + rng.normal(size=p.data.shape) * 0.01
        stored = {k: p.data.copy() for k, p in model.params.items()}
        model.save_checkpoint(tmp_path / "ckpt")
        fresh = tiny_model(seed=99)
        fresh.load_checkpoint(tmp_path / "ckpt")
        for k, arr in stored.items():
            np.testing.assert_array_equal(fresh.params[k].data, arr)

    def test_shape_mismatch_raises(self, tmp_path):
        model = tiny_model(seed=5)
        model.save_checkpoint(tmp_path / "ckpt")
        other = OrientedDetector(
            ModelConfig(stem_channels=(6, 8, 12, 12), feat_channels=8, head_channels=16), seed=0
        )
        with pytest.raises(ManifestError):
            other.load_checkpoint(tmp_path / "ckpt")

    def test_corruption_detected(self, tmp_path):
        model = tiny_model(seed=5)
        model.save_checkpoint(tmp_path / "ckpt")
        binary = tmp_path / "ckpt" / "params.bin"
        blob = bytearray(binary.read_bytes())
        blob[100] ^= 0xFF
        binary.write_bytes(bytes(blob))
        with pytest.raises(ManifestError, match="checksum"):
            tiny_model(seed=5).load_checkpoint(tmp_path / "ckpt")

    def test_missing_files(self, tmp_path):
        with pytest.raises(ManifestError):
            tiny_model().load_checkpoint(tmp_path / "nothing")


class TestUntrainedEval:
    def test_high_confidence_threshold_gives_empty_detections(self):
        from orientdet.train import evaluate_model

        scene = synth_scene(1, SynthSpec())
        model = tiny_model()
        outs = model.forward(scene.image)
        assert model.decode(outs, conf_thresh=0.99) == []
        res = evaluate_model(model, [scene], conf_thresh=0.99)
        assert res.map50 == 0.0
